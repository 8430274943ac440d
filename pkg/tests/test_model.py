import math

import numpy as np
import pytest

from wima.errors import DimensionError, UsageError
from wima.model import Batch, ModelSpec, init_params, logits, loss_and_grad, predict
from wima.paramvec import ParamVector

from oracles import central_differences, gradient_mismatch

SPECS = [
    ModelSpec("logistic", 4, 3),
    ModelSpec("mlp1", 4, 3, hidden_dim=5, activation="relu"),
    ModelSpec("mlp1", 4, 3, hidden_dim=5, activation="tanh"),
]


def random_batch(rng, spec, n=10):
    return Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, n))


class TestSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(kind="cnn", input_dim=2, num_classes=2),
            dict(kind="logistic", input_dim=0, num_classes=2),
            dict(kind="logistic", input_dim=2, num_classes=1),
            dict(kind="mlp1", input_dim=2, num_classes=2, hidden_dim=0),
            dict(kind="mlp1", input_dim=2, num_classes=2, hidden_dim=3, activation="gelu"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(UsageError):
            ModelSpec(**kwargs)


class TestInitParams:
    def test_deterministic(self):
        spec = SPECS[1]
        assert init_params(spec, 7).bit_equal(init_params(spec, 7))
        assert not init_params(spec, 7).bit_equal(init_params(spec, 8))

    def test_logistic_length(self):
        assert len(init_params(ModelSpec("logistic", 4, 3), 0)) == 15

    def test_mlp_segments(self):
        spec = ModelSpec("mlp1", 4, 3, hidden_dim=5)
        p = init_params(spec, 0)
        assert p.segment("feature_extractor").size == 25
        assert p.segment("classifier").size == 18
        # biases start at zero
        assert not p.values[20:25].any()
        assert not p.values[-3:].any()

    def test_scale(self):
        spec = ModelSpec("logistic", 400, 50)
        w = init_params(spec, 0).values[: 400 * 50]
        assert abs(w.std() - 1 / math.sqrt(400)) < 0.002
        assert abs(w.mean()) < 0.001


class TestLossAndGrad:
    def test_zero_params_loss_is_log_classes(self, backend, rng):
        for C in (2, 3, 10):
            spec = ModelSpec("logistic", 4, C)
            loss, _ = loss_and_grad(spec, ParamVector.zeros(spec.layout), random_batch(rng, spec))
            assert loss == pytest.approx(math.log(C), rel=1e-15)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
    def test_matches_finite_differences(self, backend, spec, rng):
        for _ in range(20):
            p = rng.normal(size=spec.layout.total_len)
            batch = random_batch(rng, spec)
            _, g = loss_and_grad(spec, ParamVector(p, spec.layout), batch)
            fd = central_differences(spec, p, batch.features, batch.labels)
            assert (gradient_mismatch(g.values, fd) <= 0).all()

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
    def test_duplication_invariant(self, backend, spec, rng):
        p = init_params(spec, 3)
        b = random_batch(rng, spec)
        doubled = Batch(np.concatenate([b.features, b.features]), np.concatenate([b.labels, b.labels]))
        l1, g1 = loss_and_grad(spec, p, b)
        l2, g2 = loss_and_grad(spec, p, doubled)
        assert l1 == pytest.approx(l2, rel=1e-13)
        np.testing.assert_allclose(g1.values, g2.values, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
    def test_descent_step(self, backend, spec, rng):
        for _ in range(20):
            p = ParamVector(rng.normal(size=spec.layout.total_len), spec.layout)
            b = random_batch(rng, spec)
            loss, g = loss_and_grad(spec, p, b)
            assert loss >= 0
            after, _ = loss_and_grad(spec, p - g.scale(1e-3), b)
            assert after < loss

    def test_label_out_of_range(self):
        spec = SPECS[0]
        with pytest.raises(UsageError):
            loss_and_grad(spec, init_params(spec, 0), Batch(np.zeros((2, 4)), [0, 3]))

    def test_non_finite_feature(self):
        spec = SPECS[0]
        X = np.zeros((2, 4))
        X[1, 2] = np.nan
        with pytest.raises(UsageError):
            loss_and_grad(spec, init_params(spec, 0), Batch(X, [0, 1]))

    def test_wrong_layout(self):
        with pytest.raises(DimensionError):
            loss_and_grad(SPECS[0], init_params(SPECS[1], 0), Batch(np.zeros((1, 4)), [0]))

    def test_extreme_logits_stay_finite(self, backend):
        spec = ModelSpec("logistic", 1, 2)
        p = ParamVector([800.0, -800.0, 0.0, 0.0], spec.layout)
        loss, g = loss_and_grad(spec, p, Batch([[1.0]], [1]))
        assert loss == pytest.approx(1600.0)
        assert g.is_finite()


class TestPredict:
    def test_zero_params_pick_class_zero(self, rng):
        spec = SPECS[1]
        assert (predict(spec, ParamVector.zeros(spec.layout), rng.normal(size=(7, 4))) == 0).all()

    def test_hand_set_logits(self):
        spec = ModelSpec("logistic", 2, 3)
        p = ParamVector([0, 0, 0, 0, 0, 0, 0.0, 0.5, 2.0], spec.layout)
        assert predict(spec, p, [[3.0, -1.0]]).tolist() == [2]

    def test_shift_invariance(self, rng):
        spec = ModelSpec("logistic", 4, 5)
        p = ParamVector(rng.normal(size=spec.layout.total_len), spec.layout)
        shifted = ParamVector(p.values + np.r_[np.zeros(20), np.full(5, 3.25)], spec.layout)
        X = rng.normal(size=(50, 4))
        np.testing.assert_allclose(logits(spec, shifted, X) - logits(spec, p, X), 3.25)
        np.testing.assert_array_equal(predict(spec, shifted, X), predict(spec, p, X))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            predict(SPECS[0], init_params(SPECS[0], 0), np.zeros((2, 5)))
