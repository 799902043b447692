import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dissipnet import ConfigurationError, ParameterError
from dissipnet.checks import admissible_draw
from dissipnet.nets import (
    aux_linn_spec,
    baseline_spec,
    compose_forward,
    ffn_spec,
    icnn_forward,
    imnn_forward,
    init_params,
    linn_baseline_step,
    linn_step,
    min_constrained,
    param_shapes,
    phi_net_specs,
    project_constraints,
    psi_net_spec,
    rnn_baseline_step,
    two_branch_spec,
    xi,
)


def stack(trees):
    return jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *trees)


class TestHandValues:
    def test_single_softplus_icnn(self):
        spec = two_branch_spec("icnn", 1, [1], ["softplus"])
        p = {k: jnp.zeros(s) for k, s in param_shapes(spec).items()}
        p["0.Wy"] = jnp.ones((1, 1))
        p["0.byu"] = jnp.ones(1)
        _, z = icnn_forward(p, spec, jnp.array([1.0]))
        expected = math.log1p(math.e) - math.log(2.0)
        assert float(z[0]) == pytest.approx(expected, abs=1e-14)
        assert float(z[0]) == pytest.approx(0.62011, abs=1e-5)

    def test_single_tanh_imnn(self):
        spec = two_branch_spec("imnn", 1, [1], ["tanh"])
        p = {k: jnp.zeros(s) for k, s in param_shapes(spec).items()}
        p["0.Ws"] = jnp.full((1, 1), 2.0)
        p["0.bsr"] = jnp.ones(1)
        out = imnn_forward(p, spec, jnp.array([1.0]))
        assert float(out[0]) == pytest.approx(math.tanh(2.0), abs=1e-15)
        assert float(out[0]) == pytest.approx(0.96403, abs=1e-5)

    def test_identity_imnn_reduces_composition(self):
        conv, _ = phi_net_specs()
        mono = two_branch_spec("imnn", 4, [1], ["linear"])
        pc = admissible_draw(conv, 3)
        pm = {k: jnp.zeros(s) for k, s in param_shapes(mono).items()}
        pm["0.Ws"] = jnp.ones((1, 4))
        pm["0.bsr"] = jnp.ones(4)
        y = jnp.abs(jnp.asarray(np.random.default_rng(0).normal(size=18)))
        _, z = icnn_forward(pc, conv, y)
        assert float(compose_forward(pc, conv, pm, mono, y)) == pytest.approx(float(jnp.sum(z)), abs=1e-14)


class TestZeroAtOrigin:
    def test_icnn_with_pass_through(self):
        spec = two_branch_spec("icnn", 3, [5, 5, 1], ["exp", "softplus", "softplus"], x_dim=2)
        p = admissible_draw(spec, 0)
        for x in (jnp.zeros(2), jnp.array([3.0, -7.0])):
            assert abs(float(icnn_forward(p, spec, jnp.zeros(3), x)[1][0])) <= 1e-14

    def test_paper_nets(self):
        psi = psi_net_spec()
        conv, mono = phi_net_specs()
        for seed in range(20):
            assert abs(float(icnn_forward(admissible_draw(psi, seed), psi, jnp.zeros(15))[1][0])) <= 1e-14
            pc, pm = admissible_draw(conv, seed), admissible_draw(mono, seed + 1)
            assert abs(float(imnn_forward(pm, mono, jnp.zeros(4))[0])) <= 1e-14
            assert abs(float(compose_forward(pc, conv, pm, mono, jnp.zeros(18)))) <= 1e-14

    def test_linn_cell(self):
        spec = aux_linn_spec()
        p = admissible_draw(spec, 4)
        out = linn_step(p, spec, jnp.zeros(6), jnp.zeros(12), 0.05)
        assert float(jnp.max(jnp.abs(out))) <= 1e-14
        out = linn_step(p, spec, jnp.zeros(6), jnp.zeros(12), 0.05, scheme="exponential")
        assert float(jnp.max(jnp.abs(out))) <= 1e-14


class TestConstraints:
    def test_negative_weight_rejected(self):
        spec = psi_net_spec()
        p = dict(init_params(spec, 0))
        p["2.Wz"] = p["2.Wz"].at[0, 0].set(-1e-3)
        with pytest.raises(ParameterError):
            icnn_forward(p, spec, jnp.ones(15))

    def test_width_mismatch(self):
        conv, mono = phi_net_specs()
        with pytest.raises(ConfigurationError):
            compose_forward(init_params(conv, 0), conv, init_params(psi_net_spec(), 0), psi_net_spec(), jnp.ones(18))
        with pytest.raises(ConfigurationError):
            icnn_forward(init_params(conv, 0), conv, jnp.ones(17))

    def test_non_monotone_activation_rejected(self):
        with pytest.raises(ConfigurationError):
            two_branch_spec("icnn", 2, [3, 1], ["tanh", "linear"])
        with pytest.raises(ConfigurationError):
            two_branch_spec("imnn", 2, [3, 1], ["gelu", "linear"])

    def test_init_and_projection(self):
        spec = psi_net_spec()
        a, b = init_params(spec, 7), init_params(spec, 7)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        assert min_constrained(a) >= 0.0
        for k, v in a.items():
            if v.ndim == 2 and v.size:
                lim = math.sqrt(6.0 / sum(v.shape)) if sum(v.shape) else 0.0
                assert float(jnp.max(jnp.abs(v))) <= lim
        noisy = {k: v - 0.5 for k, v in a.items()}
        once = project_constraints(noisy)
        assert min_constrained(once) >= 0.0
        twice = project_constraints(once)
        for k in once:
            np.testing.assert_array_equal(once[k], twice[k])

    def test_fan_in_init_range(self):
        p = init_params(psi_net_spec(), 0, nonneg_init="fan_in")
        assert float(jnp.max(p["1.Wz"])) <= 2.0 / 16
        with pytest.raises(ConfigurationError):
            init_params(psi_net_spec(), 0, nonneg_init="he")


class TestShapeProperties:
    def test_icnn_midpoint_convexity(self):
        spec = psi_net_spec()
        draws, pairs = 1000, 100
        params = stack([admissible_draw(spec, d) for d in range(draws)])
        rng = np.random.default_rng(0)
        a = np.abs(rng.normal(size=(draws, pairs, 15))) * rng.uniform(0, 3, size=(draws, pairs, 1))
        b = np.abs(rng.normal(size=(draws, pairs, 15))) * rng.uniform(0, 3, size=(draws, pairs, 1))

        def gap(p, ya, yb):
            f = lambda y: icnn_forward(p, spec, y)[1][0]
            fa, fb = f(ya), f(yb)
            return (f(0.5 * (ya + yb)) - 0.5 * (fa + fb)) / jnp.maximum(1.0, jnp.maximum(fa, fb))

        g = jax.jit(jax.vmap(jax.vmap(gap, in_axes=(None, 0, 0))))(params, a, b)
        assert float(jnp.max(g)) <= 1e-9

    def test_icnn_convexity_with_pass_through(self):
        spec = two_branch_spec("icnn", 3, [6, 6, 1], ["exp", "relu", "softplus"], x_dim=2)
        rng = np.random.default_rng(1)

        def gap(p, x, ya, yb):
            f = lambda y: icnn_forward(p, spec, y, x)[1][0]
            return f(0.5 * (ya + yb)) - 0.5 * (f(ya) + f(yb))

        g = jax.jit(jax.vmap(gap, in_axes=(None, 0, 0, 0)))
        for d in range(50):
            x = rng.normal(size=(100, 2))
            out = g(admissible_draw(spec, d), x, np.abs(rng.normal(size=(100, 3))), np.abs(rng.normal(size=(100, 3))))
            assert float(jnp.max(out)) <= 1e-9

    def test_imnn_monotone(self):
        _, spec = phi_net_specs()
        draws, pairs = 1000, 100
        params = stack([admissible_draw(spec, d) for d in range(draws)])
        rng = np.random.default_rng(2)
        s = rng.normal(size=(draws, pairs, 4)) * 3
        s2 = s + np.abs(rng.normal(size=(draws, pairs, 4)))

        def diff(p, lo, hi):
            return imnn_forward(p, spec, hi)[0] - imnn_forward(p, spec, lo)[0]

        d = jax.jit(jax.vmap(jax.vmap(diff, in_axes=(None, 0, 0))))(params, s, s2)
        assert float(jnp.min(d)) >= -1e-9

    def test_composition_monotone_on_rays(self):
        conv, mono = phi_net_specs()
        rng = np.random.default_rng(3)
        lam = jnp.linspace(0.0, 2.0, 41)
        f = jax.jit(jax.vmap(lambda pc, pm, y, l: compose_forward(pc, conv, pm, mono, l * y),
                             in_axes=(None, None, None, 0)))
        for d in range(100):
            pc, pm = admissible_draw(conv, 2 * d), admissible_draw(mono, 2 * d + 1)
            vals = np.asarray(f(pc, pm, np.abs(rng.normal(size=18)), lam))
            assert np.all(np.diff(vals) >= -1e-9)
            assert vals[0] == pytest.approx(0.0, abs=1e-14)

    def test_paper_topologies(self):
        psi = psi_net_spec()
        assert [l.n_out for l in psi.layers] == [16, 16, 16, 16, 1]
        assert [l.activation for l in psi.layers] == ["exp", "softplus", "softplus", "softplus", "softplus"]
        conv, mono = phi_net_specs()
        assert conv.in_dim == 18 and [l.n_out for l in conv.layers] == [16, 16, 16, 4]
        assert conv.layers[-1].activation == "relu"
        assert [l.n_out for l in mono.layers] == [16, 16, 16, 1]
        assert [l.activation for l in mono.layers] == ["tanh", "tanh", "softplus", "linear"]
        aux = aux_linn_spec()
        assert aux.alpha.in_dim == 18
        assert [l.n_out for l in aux.alpha.layers] == [12, 12, 8, 8, 6]
        assert [l.activation for l in aux.alpha.layers] == ["gelu"] * 4 + ["relu"]


class TestLinn:
    def test_dt_zero_keeps_state(self):
        spec = aux_linn_spec()
        p = admissible_draw(spec, 5)
        h = jnp.asarray(np.random.default_rng(0).normal(size=6))
        q = jnp.asarray(np.random.default_rng(1).normal(size=12))
        for scheme in ("euler", "exponential"):
            np.testing.assert_array_equal(linn_step(p, spec, h, q, 0.0, scheme), h)

    def test_zero_decay_reduces_to_forcing(self):
        spec = aux_linn_spec()
        p = dict(admissible_draw(spec, 6))
        p["alpha.4.W"] = jnp.zeros_like(p["alpha.4.W"])
        p["alpha.4.b"] = jnp.zeros_like(p["alpha.4.b"])
        from dissipnet.nets import ffn_forward
        h = jnp.asarray(np.random.default_rng(2).normal(size=6))
        q = jnp.asarray(np.random.default_rng(3).normal(size=12))
        f = ffn_forward(p, spec.f, jnp.concatenate([h, q]), "f.")
        for scheme in ("euler", "exponential"):
            np.testing.assert_allclose(linn_step(p, spec, h, q, 0.1, scheme), h + 0.1 * f, atol=1e-15)

    def test_xi(self):
        assert float(xi(0.0)) == 1.0
        assert float(xi(1e-3)) == pytest.approx(math.expm1(1e-3) / 1e-3, rel=1e-15)
        assert float(xi(-2.0)) == pytest.approx(math.expm1(-2.0) / -2.0, rel=1e-15)

    def test_alpha_non_negative(self):
        spec = aux_linn_spec()
        from dissipnet.nets import ffn_forward
        rng = np.random.default_rng(4)
        for d in range(20):
            p = admissible_draw(spec, d, spread=1.0)
            a = jax.vmap(lambda z: ffn_forward(p, spec.alpha, z, "alpha."))(rng.normal(size=(100, 18)) * 5)
            assert float(jnp.min(a)) >= 0.0


class TestBaselines:
    def test_rnn_zero_weights(self):
        spec = baseline_spec("rnn")
        p = {k: jnp.zeros(s) for k, s in param_shapes(spec).items()}
        p["h.b"] = jnp.arange(6.0)
        p["y.b"] = jnp.ones(6)
        h, y = rnn_baseline_step(p, spec, jnp.ones(6), jnp.ones(7))
        np.testing.assert_array_equal(h, np.arange(6.0))
        np.testing.assert_array_equal(y, np.ones(6))

    def test_rnn_deterministic_and_finite(self):
        spec = baseline_spec("rnn")
        a, b = init_params(spec, 3), init_params(spec, 3)
        rng = np.random.default_rng(5)
        x, h = rng.normal(size=7), rng.normal(size=6)
        ra, rb = rnn_baseline_step(a, spec, h, x), rnn_baseline_step(b, spec, h, x)
        np.testing.assert_array_equal(ra[0], rb[0])
        np.testing.assert_array_equal(ra[1], rb[1])
        step = jax.jit(lambda h, x: rnn_baseline_step(a, spec, h, x))
        for _ in range(200):
            x = rng.normal(size=7) * rng.uniform(0, 1e3)
            h = rng.normal(size=6) * rng.uniform(0, 1e3)
            x *= min(1.0, 1e3 / np.linalg.norm(x))
            h *= min(1.0, 1e3 / np.linalg.norm(h))
            hn, y = step(h, x)
            assert np.all(np.isfinite(hn)) and np.all(np.isfinite(y))

    def test_rnn_width_mismatch(self):
        spec = baseline_spec("rnn")
        with pytest.raises(ConfigurationError):
            rnn_baseline_step(init_params(spec, 0), spec, jnp.zeros(6), jnp.zeros(8))

    def test_linn_baseline_origin_and_hold(self):
        spec = baseline_spec("linn")
        p = init_params(spec, 4)
        h, _ = linn_baseline_step(p, spec, jnp.zeros(6), jnp.zeros(7), 0.05)
        assert float(jnp.max(jnp.abs(h))) <= 1e-14
        hs = jnp.asarray(np.random.default_rng(6).normal(size=6))
        p0 = dict(p)
        last = len(spec.hidden)
        p0[f"alpha.{last}.W"] = jnp.zeros_like(p0[f"alpha.{last}.W"])
        h, _ = linn_baseline_step(p0, spec, hs, jnp.ones(7), 0.0)
        np.testing.assert_array_equal(h, hs)

    def test_linn_baseline_norm_bound(self):
        spec = baseline_spec("linn")
        from dissipnet.nets import ffn_forward
        rng = np.random.default_rng(7)
        for seed in range(20):
            p = {k: v * 3.0 for k, v in init_params(spec, seed).items()}
            h, x = rng.normal(size=6) * 10, rng.normal(size=7) * 10
            f = ffn_forward(p, spec.stacks()["f"], jnp.concatenate([x, h]), "f.")
            hn, _ = linn_baseline_step(p, spec, h, x, 0.05)
            assert float(jnp.linalg.norm(hn)) <= float(jnp.linalg.norm(h) + 0.05 * jnp.linalg.norm(f)) + 1e-12


def test_ffn_chain_validation():
    with pytest.raises(ConfigurationError):
        from dissipnet.nets import FfnSpec, LayerSpec
        FfnSpec((LayerSpec(3, 4, "gelu"), LayerSpec(5, 2, "linear")))
    assert ffn_spec(3, [4, 2], ["gelu", "linear"]).out_dim == 2
