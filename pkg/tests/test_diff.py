import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dissipnet.diff import (
    NonFiniteLossError,
    check_gradient,
    fd_grad_sym,
    grad_params,
    grad_scalar,
    tree_dot,
    tree_fd_directional,
)
from dissipnet.invariants import beta1, beta2, smoothed_sqrt
from dissipnet.nets import init_params, psi_net_spec, icnn_forward, two_branch_spec
from dissipnet.tensor import det, ddot


def rand_sym(rng):
    A = rng.normal(size=(3, 3))
    return 0.5 * (A + A.T)


class TestGradScalar:
    def test_trace(self):
        X = rand_sym(np.random.default_rng(0))
        np.testing.assert_allclose(grad_scalar(jnp.trace, X), np.eye(3), atol=1e-15)

    def test_half_norm(self):
        X = rand_sym(np.random.default_rng(1))
        np.testing.assert_allclose(grad_scalar(lambda A: 0.5 * jnp.sum(A * A), X), X, atol=1e-14)

    def test_beta1_stationary_at_identity(self):
        np.testing.assert_allclose(grad_scalar(beta1, jnp.eye(3)), np.zeros((3, 3)), atol=1e-14)
        np.testing.assert_allclose(fd_grad_sym(beta1, np.eye(3)), np.zeros((3, 3)), atol=1e-9)

    def test_symmetrization_contract(self):
        rng = np.random.default_rng(2)
        f = lambda A: jnp.sum(jnp.sin(A) * jnp.arange(1.0, 10.0).reshape(3, 3)) + det(A) ** 2
        for _ in range(100):
            X, H = rand_sym(rng), rand_sym(rng)
            d = jax.jvp(f, (jnp.asarray(X),), (jnp.asarray(H),))[1]
            assert abs(float(d) - float(ddot(grad_scalar(f, X), H))) <= 1e-10 * max(1.0, abs(float(d)))

    def test_result_symmetric_for_asymmetric_form(self):
        # f reads only the upper triangle; the gradient still has to come out symmetric
        G = np.asarray(grad_scalar(lambda A: A[0, 1] + 2 * A[1, 2], jnp.eye(3)))
        np.testing.assert_allclose(G, G.T, atol=0)
        assert G[0, 1] == pytest.approx(0.5) and G[1, 2] == pytest.approx(1.0)


class TestCheckGradient:
    def test_beta2_of_det(self):
        assert check_gradient(lambda A: beta2(det(A)), np.eye(3), h=1e-6) <= 1e-6

    def test_linear(self):
        # no truncation error, so a wide step keeps roundoff well under the bound
        W = np.arange(9.0).reshape(3, 3)
        assert check_gradient(lambda A: jnp.sum(W * A), np.eye(3) * 2.0, h=1e-2) <= 1e-10

    def test_smoothed_sqrt_at_kink(self):
        f = lambda A: smoothed_sqrt(A[0, 0] ** 2) + smoothed_sqrt(jnp.abs(A[1, 1]))
        assert check_gradient(f, np.diag([1e-4, 1e-3, 1.0]), h=1e-6) <= 1e-5


class TestGradParams:
    def test_half_norm(self):
        theta = {"a": jnp.arange(3.0), "b": jnp.ones((2, 2))}
        val, g = grad_params(lambda p: 0.5 * sum(jnp.sum(v * v) for v in p.values()), theta)
        assert float(val) == pytest.approx(0.5 * (5.0 + 4.0))
        for k in theta:
            np.testing.assert_array_equal(g[k], theta[k])

    def test_constant_parameter_gets_zero(self):
        theta = {"used": jnp.ones(2), "unused": jnp.ones(3)}
        _, g = grad_params(lambda p: jnp.sum(p["used"] ** 3), theta)
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteLossError):
            grad_params(lambda p: jnp.log(p["a"] - 1.0), {"a": jnp.zeros(())})

    def test_nested_stress_loss_matches_fd(self):
        # stress = 2 d(psi)/dC, loss = stress MSE against a fixed target
        spec = two_branch_spec("icnn", 3, [4, 1], ["exp", "softplus"])
        rng = np.random.default_rng(3)
        C = np.eye(3) + 0.1 * rand_sym(rng)
        target = rand_sym(rng)

        def energy(p, A):
            y = jnp.array([jnp.trace(A) - 3.0, beta1(A), beta2(det(A))])
            return icnn_forward(p, spec, y)[1][0]

        def loss(p):
            S = 2.0 * grad_scalar(lambda A: energy(p, A), C)
            return jnp.mean((S - target) ** 2)

        for seed in range(5):
            theta = init_params(spec, seed)
            _, g = grad_params(loss, theta)
            d = jax.tree_util.tree_map(lambda x: jnp.asarray(rng.normal(size=x.shape)), theta)
            fd = tree_fd_directional(loss, theta, d, h=1e-5)
            assert abs(tree_dot(g, d) - fd) <= 1e-4 * abs(fd)


class TestProperties:
    def test_forward_equals_reverse(self):
        rng = np.random.default_rng(4)
        ops = [
            lambda a, b: a + b,
            lambda a, b: a * b,
            lambda a, b: jnp.exp(0.3 * a) + b,
            lambda a, b: jnp.log(1.0 + a * a) * b,
            lambda a, b: jnp.tanh(a) - b,
        ]
        for _ in range(1000):
            seq = rng.integers(0, len(ops), size=6)

            def f(x):
                a, b = x[0], x[1]
                for k in seq:
                    a, b = ops[k](a, b), a
                return a

            x = jnp.asarray(rng.normal(size=2))
            rev = jax.grad(f)(x)
            fwd = jnp.array([jax.jvp(f, (x,), (e,))[1] for e in jnp.eye(2)])
            assert np.allclose(rev, fwd, rtol=1e-12, atol=1e-12)

    def test_nested_mode_random_networks(self):
        rng = np.random.default_rng(5)
        spec = psi_net_spec(in_dim=2, width=3)
        C = np.eye(3) + 0.05 * rand_sym(rng)

        def stress_component(p):
            def energy(A):
                y = jnp.array([beta1(A), beta2(det(A))])
                return icnn_forward(p, spec, y)[1][0]
            return grad_scalar(energy, C)[0, 1]

        stress_component = jax.jit(stress_component)
        outer = jax.jit(jax.grad(stress_component))
        for seed in range(100):
            theta = init_params(spec, seed, nonneg_init="fan_in")
            g = outer(theta)
            d = jax.tree_util.tree_map(lambda x: jnp.asarray(rng.normal(size=x.shape)), theta)
            fd = tree_fd_directional(stress_component, theta, d, h=1e-5)
            ad = tree_dot(g, d)
            assert abs(ad - fd) <= 1e-4 * max(abs(fd), 1e-8), seed
