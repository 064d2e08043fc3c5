"""Tests for the heteroscedastic regression models and two-stage training.

The GNLL and link functions are checked against hand computations and
finite differences; training is checked on a homoscedastic toy problem
whose optimal variance is known in closed form.
"""

import numpy as np
import pytest

from varexplain import hetreg
from varexplain.hetreg import (
    VAR_FLOOR,
    DivergenceError,
    SharedHetModel,
    TrainConfig,
    TwoBranchHetModel,
    extend_pretrained_head,
    gnll_loss,
    mse_loss,
    train_two_stage,
    variance_link,
    variance_link_inverse,
)
from varexplain.nncore.layers import LayerSpec
from varexplain.nncore.network import Network


def shared_model(d=4, hidden=(8,), seed=0):
    specs = []
    for h in hidden:
        specs.append(LayerSpec("dense", units=h))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("dense", units=2))
    return SharedHetModel(Network(specs, (d,), seed))


class TestVarianceLink:
    def test_positive_with_floor(self):
        raw = np.array([-1000.0, -5.0, 0.0, 3.0])
        s2 = variance_link(raw)
        assert np.all(s2 >= VAR_FLOOR)
        assert s2[2] == pytest.approx(np.log(2) + VAR_FLOOR)

    def test_inverse_roundtrip(self):
        for v in (0.01, 0.5, 1.0, 10.0):
            assert variance_link(variance_link_inverse(v)) == pytest.approx(v, rel=1e-10)

    def test_inverse_rejects_at_or_below_floor(self):
        with pytest.raises(ValueError):
            variance_link_inverse(VAR_FLOOR / 2)


class TestLosses:
    def test_mse_hand_case(self):
        assert mse_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0])) == pytest.approx(2.5)

    def test_gnll_hand_case(self):
        # single point: log(4) + 9/4
        mu = np.array([1.0])
        s2 = np.array([4.0])
        y = np.array([4.0])
        assert gnll_loss(mu, s2, y) == pytest.approx(np.log(4) + 2.25)

    def test_gnll_minimized_at_true_variance(self):
        """For fixed residuals, mean GNLL over sigma^2 is minimized at the
        mean squared residual (d/ds2 [log s2 + r2/s2] = 0 at s2 = r2)."""
        rng = np.random.default_rng(0)
        resid = rng.normal(0, 2.0, 4000)
        y = resid
        mu = np.zeros_like(y)
        best = float(np.mean(resid ** 2))
        loss_at = lambda s2: gnll_loss(mu, np.full_like(y, s2), y)
        assert loss_at(best) < loss_at(best * 1.3)
        assert loss_at(best) < loss_at(best * 0.7)

    def test_gnll_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            gnll_loss(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2))


class TestSharedModelGradients:
    def test_stage2_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        model = shared_model(seed=4)
        X = rng.standard_normal((6, 4))
        y = rng.standard_normal(6)
        _, grads = model.loss_and_grads(X, y, stage=2)
        params = model.params(2)
        eps = 1e-6
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = p[i]
                p[i] = orig + eps
                model.net.bump_version()
                hi, _ = model.loss_and_grads(X, y, stage=2)
                p[i] = orig - eps
                model.net.bump_version()
                lo, _ = model.loss_and_grads(X, y, stage=2)
                p[i] = orig
                model.net.bump_version()
                assert g[i] == pytest.approx((hi - lo) / (2 * eps), rel=1e-4, abs=1e-7)

    def test_stage1_ignores_variance_column(self):
        rng = np.random.default_rng(2)
        model = shared_model(seed=5)
        X = rng.standard_normal((5, 4))
        y = rng.standard_normal(5)
        _, grads = model.loss_and_grads(X, y, stage=1)
        # final dense layer W gradient: variance column untouched by MSE
        gW = grads[-2]
        np.testing.assert_array_equal(gW[:, 1], 0.0)


class TestVarianceColumnReset:
    def test_reset_sets_initial_prediction(self):
        model = shared_model(seed=6)
        model.reset_variance_column(0, 0.37)
        X = np.zeros((3, 4))
        _, s2 = model.predict(X)
        # with near-zero weights the prediction sits at the bias value
        np.testing.assert_allclose(s2, 0.37, rtol=1e-2)

    def test_extend_pretrained_head_preserves_mean(self):
        rng = np.random.default_rng(3)
        specs = [LayerSpec("dense", units=6), LayerSpec("relu"),
                 LayerSpec("dense", units=1)]
        mean_net = Network(specs, (4,), 7)
        X = rng.standard_normal((10, 4))
        before = mean_net.forward(X, mode="eval")[0][:, 0]
        model = extend_pretrained_head(mean_net, seed=0, init_variance=1.0)
        mu, s2 = model.predict(X)
        # matmul against the widened head reassociates sums, so exact
        # equality is not guaranteed — only tiny float noise is allowed
        np.testing.assert_allclose(mu, before, rtol=1e-12, atol=1e-14)
        assert np.all(s2 > 0)


class TestTwoStageTraining:
    def test_recovers_homoscedastic_variance(self):
        """y = x.w + N(0, 0.01): after the two stages the predicted variance
        should sit near 0.01 everywhere."""
        rng = np.random.default_rng(4)
        n, d = 2000, 3
        X = rng.standard_normal((n, d))
        w = np.array([1.0, -0.5, 0.25])
        y = X @ w + rng.normal(0, 0.1, n)
        model = shared_model(d=d, hidden=(16, 8), seed=8)
        cfg = TrainConfig(stage1_max_epochs=40, stage1_patience=8,
                          stage2_max_epochs=30, stage2_patience=8,
                          lr_stage2=1e-3, seed=1)
        hist = train_two_stage(model, (X[:1600], y[:1600]), (X[1600:], y[1600:]), cfg)
        mu, s2 = model.predict(X[1600:])
        assert np.mean((y[1600:] - mu) ** 2) < 0.03
        assert 0.005 < np.median(s2) < 0.03
        assert hist.stage1_best_epoch >= 0
        assert hist.stage2_best_epoch >= 0

    def test_checkpoint_is_best_validation(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((400, 3))
        y = X @ np.array([1.0, 0.0, -1.0]) + rng.normal(0, 0.2, 400)
        model = shared_model(d=3, hidden=(8,), seed=9)
        cfg = TrainConfig(stage1_max_epochs=15, stage1_patience=15,
                          stage2_max_epochs=10, stage2_patience=10, seed=2)
        hist = train_two_stage(model, (X[:300], y[:300]), (X[300:], y[300:]), cfg)
        val = model.eval_loss(X[300:], y[300:], stage=2)
        assert val == pytest.approx(hist.stage2_checkpoint_val, rel=1e-9)
        assert hist.stage2_checkpoint_val <= min(hist.stage2_val) + 1e-12

    def test_swa_mode_runs_full_budget_and_averages(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((300, 3))
        y = X @ np.array([0.5, -0.5, 1.0]) + rng.normal(0, 0.3, 300)
        model = shared_model(d=3, hidden=(8,), seed=10)
        cfg = TrainConfig(stage1_max_epochs=5, stage1_patience=5,
                          stage2_max_epochs=8, stage2_swa_start=4,
                          lr_stage2=1e-3, seed=3)
        hist = train_two_stage(model, (X[:200], y[:200]), (X[200:], y[200:]), cfg)
        # swa mode records one extra validation point (the averaged weights)
        # and never early-stops: 1 initial + 8 epochs + 1 final
        assert len(hist.stage2_val) == 10
        assert np.isfinite(hist.stage2_checkpoint_val)

    def test_weight_decay_shrinks_weights(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((300, 4))
        y = rng.standard_normal(300)
        base_cfg = dict(stage1_max_epochs=0, stage2_max_epochs=15,
                        stage2_patience=15, lr_stage2=1e-3, seed=4)
        plain = shared_model(seed=11)
        train_two_stage(plain, (X[:200], y[:200]), (X[200:], y[200:]),
                        TrainConfig(**base_cfg))
        decayed = shared_model(seed=11)
        train_two_stage(decayed, (X[:200], y[:200]), (X[200:], y[200:]),
                        TrainConfig(stage2_weight_decay=0.5, **base_cfg))
        norm = lambda m: sum(float(np.sum(p ** 2)) for p in m.net.params())
        assert norm(decayed) < norm(plain)

    def test_l1_input_sparsifies_first_layer(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((300, 6))
        y = X[:, 0] + rng.normal(0, 0.1, 300)
        cfg = dict(stage1_max_epochs=0, stage2_max_epochs=25,
                   stage2_patience=25, lr_stage2=1e-3, seed=5)
        plain = shared_model(d=6, seed=12)
        train_two_stage(plain, (X[:200], y[:200]), (X[200:], y[200:]),
                        TrainConfig(**cfg))
        sparse = shared_model(d=6, seed=12)
        train_two_stage(sparse, (X[:200], y[:200]), (X[200:], y[200:]),
                        TrainConfig(stage2_l1_input=5e-2, **cfg))
        med = lambda m: float(np.median(np.abs(m.net.params()[0])))
        assert med(sparse) < med(plain)

    def test_divergence_carries_checkpoint(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((64, 3))
        y = rng.standard_normal(64)
        model = shared_model(d=3, seed=13)
        model.net.params()[0][0, 0] = np.nan   # poisoned weight -> non-finite loss
        model.net.bump_version()
        cfg = TrainConfig(stage1_max_epochs=5, stage2_max_epochs=5, seed=6)
        with pytest.raises(DivergenceError) as exc:
            train_two_stage(model, (X, y), (X, y), cfg)
        assert exc.value.checkpoint is not None

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(stage2_weight_decay=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(stage2_swa_start=-2)


class TestTwoBranchModel:
    def tiny_image_model(self):
        enc = lambda seed: Network([
            LayerSpec("conv2d", filters=2, kernel=3, stride=1, padding=1),
            LayerSpec("relu"),
            LayerSpec("maxpool2d", pool=2),
            LayerSpec("flatten"),
            LayerSpec("dense", units=1),
        ], (1, 8, 8), seed)
        return TwoBranchHetModel(enc(0), enc(1))

    def test_stage1_trains_only_mean_branch(self):
        model = self.tiny_image_model()
        assert len(model.params(1)) == len(model.mean_net.params())
        assert len(model.params(2)) == (len(model.mean_net.params())
                                        + len(model.var_net.params()))

    def test_predict_shapes_and_positivity(self):
        model = self.tiny_image_model()
        X = np.random.default_rng(0).random((3, 1, 8, 8))
        mu, s2 = model.predict(X)
        assert mu.shape == s2.shape == (3,)
        assert np.all(s2 >= VAR_FLOOR)


class TestModelIO:
    def test_shared_roundtrip(self, tmp_path):
        model = shared_model(seed=14)
        prefix = tmp_path / "m"
        hetreg.save_model(model, prefix, meta={"note": "test"})
        again = hetreg.load_model(prefix)
        X = np.random.default_rng(1).standard_normal((5, 4))
        for a, b in zip(model.predict(X), again.predict(X)):
            np.testing.assert_array_equal(a, b)

    def test_two_branch_roundtrip(self, tmp_path):
        model = TestTwoBranchModel().tiny_image_model()
        prefix = tmp_path / "img"
        hetreg.save_model(model, prefix)
        again = hetreg.load_model(prefix)
        X = np.random.default_rng(2).random((2, 1, 8, 8))
        for a, b in zip(model.predict(X), again.predict(X)):
            np.testing.assert_array_equal(a, b)


class TestCalibrationReport:
    def test_keys_and_range(self):
        rng = np.random.default_rng(10)
        model = shared_model(seed=15)
        X = rng.standard_normal((50, 4))
        y = rng.standard_normal(50)
        rep = hetreg.calibration_report(model, X, y)
        assert set(rep) >= {"spearman_resid_var", "mse", "gnll"}
        assert -1.0 <= rep["spearman_resid_var"] <= 1.0
