import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dissipnet import ConfigurationError
from dissipnet.checks import _miniature, suite_gradient
from dissipnet.consti import init_theta
from dissipnet.diff import NonFiniteLossError
from dissipnet.nets import is_nonneg
from dissipnet.train import (
    History,
    TrainConfig,
    _batch,
    _run_stage,
    adam_step,
    clip_global_norm,
    evaluate,
    evaluate_baseline,
    fit,
    fit_baseline,
    global_norm,
    init_moments,
    loss_evo,
    loss_parts,
    loss_stress,
    loss_total,
    mse,
    topology_for,
)

TINY = TrainConfig(epochs=6, pretrain_epochs=3, pretrain_steps=4)


@pytest.fixture(scope="module")
def mini():
    return _miniature(0)


@pytest.fixture(scope="module")
def setup(mini):
    topo = topology_for(mini, TrainConfig())
    return topo, init_theta(topo, 0), _batch(mini)


def leaves_with_names(theta):
    for g, block in theta.items():
        for name, v in block.items():
            yield g, name, np.asarray(v)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.clip, c.lambda_evo, c.lambda_gr) == (1e-3, 1e-3, 1000.0, 1e-4)
        assert (c.pretrain_epochs, c.pretrain_paths, c.pretrain_steps) == (500, 1, 40)

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"clip": -1.0}, {"epochs": -1}, {"update": "rk4"},
                                    {"lambda_evo": -1.0}, {"pretrain_steps": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)


class TestLosses:
    def test_mse_examples(self):
        assert float(mse(jnp.zeros((2, 3, 6)))) == 0.0
        e = jnp.array([[0.1, 0, 0, 0, 0, 0]])
        assert float(mse(e)) == pytest.approx(1.6667e-3, abs=1e-7)
        assert float(mse(jnp.array([[0.2, 0, 0, 0, 0, 0]]))) == pytest.approx(6.6667e-3, abs=1e-7)
        assert float(mse(jnp.concatenate([e, e]))) == float(mse(e))

    def test_total_arithmetic(self):
        assert 1e-5 + 1000.0 * 1e-8 == pytest.approx(2e-5, rel=1e-12)

    def test_prediction_equals_target_gives_zero(self, setup):
        topo, theta, (C, dt, _) = setup
        from dissipnet.train import predict
        S = predict(theta, topo, C, dt)
        assert float(loss_stress(theta, topo, (C, dt, S))) == 0.0

    def test_decomposition_exact(self, setup):
        topo, theta, batch = setup
        ls, le = loss_parts(theta, topo, batch)
        for lam in (0.0, 1.0, 1000.0):
            lt = loss_total(theta, topo, batch, lam)
            # exact as an identity; subtracting back would reintroduce rounding
            assert float(lt) == float(ls + lam * le)
        assert float(loss_stress(theta, topo, batch)) == float(ls)
        assert float(loss_evo(theta, topo, batch)) == float(le)
        assert float(le) > 0

    def test_explicit_mode_has_no_evolution_term(self, setup):
        topo, theta, batch = setup
        assert float(loss_parts(theta, topo, batch, "explicit")[1]) == 0.0

    def test_batch_reordering(self, setup):
        topo, theta, (C, dt, S) = setup
        swapped = (C[::-1], dt[::-1], S[::-1])
        assert float(loss_evo(theta, topo, swapped)) == pytest.approx(float(loss_evo(theta, topo, (C, dt, S))),
                                                                      rel=1e-14)

    def test_non_finite_names_location(self, setup):
        topo, theta, batch = setup
        bad = jax.tree_util.tree_map(lambda x: x, theta)
        bad["psi"] = {k: v * np.nan for k, v in bad["psi"].items()}
        with pytest.raises(NonFiniteLossError, match="path 0, step 0"):
            loss_stress(bad, topo, batch)


class TestAdam:
    def test_zero_gradient(self):
        theta = {"w": jnp.array([0.3, -0.2])}
        new, _ = adam_step(theta, {"w": jnp.zeros(2)}, init_moments(theta), 1e-3, 1, project=False)
        np.testing.assert_array_equal(new["w"], theta["w"])

    def test_first_step_is_lr(self):
        theta = {"w": jnp.array(0.5)}
        new, _ = adam_step(theta, {"w": jnp.array(1.0)}, init_moments(theta), 1e-3, 1, project=False)
        assert float(theta["w"] - new["w"]) == pytest.approx(1e-3, rel=1e-7)

    def test_projection_clamps(self):
        theta = {"psi": {"1.Wz": jnp.array([1e-4, 0.5])}}
        g = {"psi": {"1.Wz": jnp.array([1.0, 1.0])}}
        new, _ = adam_step(theta, g, init_moments(theta), 1e-3, 1)
        assert is_nonneg("1.Wz")
        assert float(new["psi"]["1.Wz"][0]) == 0.0
        assert float(new["psi"]["1.Wz"][1]) == pytest.approx(0.499, abs=1e-8)


class TestClip:
    def test_examples(self):
        g = {"a": jnp.array([3e-4, 4e-4])}
        np.testing.assert_array_equal(clip_global_norm(g, 1e-3)["a"], g["a"])
        big = {"a": jnp.array([6e-3, 8e-3])}
        c = clip_global_norm(big, 1e-3)
        np.testing.assert_allclose(c["a"], 0.1 * big["a"], rtol=1e-14)
        assert float(global_norm(c)) == pytest.approx(1e-3, rel=1e-14)
        z = clip_global_norm({"a": jnp.zeros(3)}, 1e-3)
        np.testing.assert_array_equal(z["a"], np.zeros(3))


class TestFit:
    def test_zero_epochs_returns_init(self, mini):
        theta, hist = fit(mini, TrainConfig(epochs=0))
        ref = init_theta(topology_for(mini, TrainConfig()), 0)
        for (g, n, a), (_, _, b) in zip(leaves_with_names(theta), leaves_with_names(ref)):
            np.testing.assert_array_equal(a, b)
        assert len(hist) == 0

    def test_history_and_checkpoints(self, mini):
        theta, hist = fit(mini, TINY)
        assert [r["epoch"] for r in hist] == list(range(1, 10))
        assert [r["stage"] for r in hist] == ["pretrain"] * 3 + ["main"] * 6
        best = [r["best_total"] for r in hist]
        assert all(b2 <= b1 for b1, b2 in zip(best[3:], best[4:]))
        assert all(b2 <= b1 for b1, b2 in zip(best[:3], best[1:3]))
        for r in hist:
            assert r["loss_total"] == r["loss_stress"] + TINY.lambda_evo * r["loss_evo"]
        for g, name, v in leaves_with_names(theta):
            if is_nonneg(name):
                assert v.min() >= 0.0, (g, name)

    def test_deterministic(self, mini):
        a, ha = fit(mini, TINY)
        b, hb = fit(mini, TINY)
        assert [r["loss_total"] for r in ha] == [r["loss_total"] for r in hb]
        for (_, _, x), (_, _, y) in zip(leaves_with_names(a), leaves_with_names(b)):
            np.testing.assert_array_equal(x, y)

    def test_training_reduces_loss(self, mini):
        cfg = TrainConfig(epochs=60, pretrain_epochs=0)
        theta, hist = fit(mini, cfg)
        assert hist.best_loss < hist[0]["loss_total"]
        pred = evaluate(theta, mini, cfg)
        assert pred.shape == (2, 10, 6)

    def test_nan_aborts_with_checkpoint(self):
        def step_fn(theta, moments, batch, lr, k):
            loss = jnp.where(k >= 3, jnp.nan, 1.0 / k)
            return {"w": theta["w"] + 1.0}, moments, (loss, jnp.zeros(()), loss)

        hist = History()
        best, aborted = _run_stage(step_fn, {"w": jnp.zeros(())}, None, 10, 1e-3, hist, "main", 0, 0)
        assert aborted and hist.aborted
        assert len(hist) == 2
        assert float(best["w"]) == 1.0

    def test_loss_gradient_matches_fd(self):
        passed, m = suite_gradient(samples=2, directions=3)
        assert m["loss_fd_rel"] <= 1e-4
        assert m["stress_fd_rel"] <= 1e-6
        assert passed


class TestBaseline:
    @pytest.mark.parametrize("kind", ["rnn", "linn"])
    def test_zero_epochs_and_shapes(self, mini, kind):
        params, hist = fit_baseline(mini, TrainConfig(epochs=0), kind)
        assert len(hist) == 0
        assert evaluate_baseline(params, mini, kind).shape == (2, 10, 6)

    def test_deterministic_and_single_stage(self, mini):
        a, ha = fit_baseline(mini, TINY, "rnn")
        b, hb = fit_baseline(mini, TINY, "rnn")
        assert len(ha) == TINY.epochs and {r["stage"] for r in ha} == {"main"}
        assert [r["loss_total"] for r in ha] == [r["loss_total"] for r in hb]
        assert all(r["loss_evo"] == 0.0 for r in ha)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_optional_pretrain(self, mini):
        _, hist = fit_baseline(mini, TINY, "rnn", pretrain=True)
        assert len(hist) == TINY.epochs + TINY.pretrain_epochs
