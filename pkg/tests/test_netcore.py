"""Model evaluation and SGD training contracts."""

import numpy as np
import pytest

from fairprune.data import Dataset
from fairprune.diffengine import gradient
from fairprune.netcore import (
    DivergenceError,
    ModelSpec,
    ParamVector,
    TrainConfig,
    empirical_risk,
    group_risk,
    init_model,
    load_params,
    predict_soft,
    save_params,
    train,
)
from util import make_dataset, numpy_per_sample_losses, random_params


class TestModelSpec:
    def test_output_loss_pairing_enforced(self):
        with pytest.raises(ValueError, match="must be trained with"):
            ModelSpec((2, 3), output="softmax", loss_kind="mse")
        with pytest.raises(ValueError, match="must be trained with"):
            ModelSpec((2, 1), output="sigmoid_binary", loss_kind="cross_entropy")

    def test_sigmoid_binary_needs_width_one(self):
        with pytest.raises(ValueError, match="width of 1"):
            ModelSpec((2, 2), output="sigmoid_binary", loss_kind="binary_cross_entropy")

    def test_round_trips_through_dict(self):
        spec = ModelSpec((4, 8, 3), hidden_activation="relu")
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestInitModel:
    def test_parameter_count_2_3_2(self):
        """Layer sizes [2,3,2]: 2*3+3 weights+biases then 3*2+2 gives 17."""
        spec = ModelSpec((2, 3, 2))
        params = init_model(spec, 0)
        assert params.k == 17

    def test_same_seed_identical(self):
        spec = ModelSpec((5, 4, 3))
        a = init_model(spec, 42)
        b = init_model(spec, 42)
        assert a.values.tobytes() == b.values.tobytes()

    def test_biases_start_at_zero(self):
        spec = ModelSpec((5, 4, 3))
        params = init_model(spec, 1)
        assert np.all(params.values[params.bias_indices()] == 0.0)
        weights = np.delete(params.values, params.bias_indices())
        assert np.all(weights != 0.0)

    def test_weight_scale_tracks_fan_in(self):
        spec = ModelSpec((100, 4, 2))
        params = init_model(spec, 3)
        w0 = params.slot_values("W0")
        assert np.abs(w0).max() <= 1.0 / np.sqrt(100)


class TestPredictSoft:
    def test_zero_weight_softmax_is_uniform(self):
        spec = ModelSpec((3, 4))
        params = ParamVector(np.zeros(init_model(spec, 0).k), init_model(spec, 0).layout)
        out = predict_soft(spec, params, np.array([1.0, -2.0, 3.0]))
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_zero_weight_sigmoid_is_half(self):
        spec = ModelSpec((3, 1), output="sigmoid_binary", loss_kind="binary_cross_entropy")
        zeros = init_model(spec, 0)
        params = zeros.with_values(np.zeros(zeros.k))
        assert predict_soft(spec, params, np.array([4.0, 5.0, 6.0])) == 0.5

    def test_one_param_logistic_at_zero(self):
        spec = ModelSpec((1, 1), output="sigmoid_binary",
                         loss_kind="binary_cross_entropy", use_bias=False)
        params = ParamVector(np.array([0.0]), init_model(spec, 0).layout)
        assert predict_soft(spec, params, np.array([3.0])) == 0.5

    def test_softmax_sums_to_one_in_bulk(self):
        """Probability outputs stay on the simplex across 10^4 random
        (params, input) pairs."""
        rng = np.random.default_rng(11)
        spec = ModelSpec((4, 6, 5))
        for _ in range(10):
            params = random_params(spec, rng, scale=2.0)
            X = rng.standard_normal((1000, 4)) * 3.0
            out = predict_soft(spec, params, X)
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_dimension_mismatch_rejected(self):
        spec = ModelSpec((3, 2))
        params = init_model(spec, 0)
        with pytest.raises(ValueError, match="expected 3 features"):
            predict_soft(spec, params, np.ones(4))


class TestEmpiricalRisk:
    def test_perfect_prediction_cross_entropy_near_zero(self):
        """Saturated correct logits sit at the simplex minimum of the loss."""
        spec = ModelSpec((2, 2), use_bias=True)
        base = init_model(spec, 0)
        # W maps class-c inputs to a huge logit on class c
        values = np.zeros(base.k)
        values[:4] = [40.0, 0.0, 0.0, 40.0]
        params = base.with_values(values)
        ds = Dataset(np.eye(2), np.zeros(2, int), np.array([0, 1]))
        assert empirical_risk(spec, params, ds) < 1e-9

    def test_mse_zero_when_prediction_matches(self):
        """Scalar linear model f(x) = x with numeric target 2 at x=2."""
        spec = ModelSpec((1, 1), output="linear", loss_kind="mse", use_bias=False)
        params = ParamVector(np.array([1.0]), init_model(spec, 0).layout)
        ds = Dataset(np.array([[2.0]]), np.array([0]), np.array([2]))
        assert empirical_risk(spec, params, ds) == 0.0

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(5)
        for spec in (
            ModelSpec((3, 5, 4), hidden_activation="relu"),
            ModelSpec((3, 5, 1), hidden_activation="sigmoid",
                      output="sigmoid_binary", loss_kind="binary_cross_entropy"),
            ModelSpec((3, 5, 2), hidden_activation="tanh", output="linear",
                      loss_kind="mse"),
        ):
            ds = make_dataset(rng, 40, 3, n_classes=min(spec.n_classes, 4))
            params = random_params(spec, rng)
            expected = float(numpy_per_sample_losses(spec, params, ds).mean())
            assert empirical_risk(spec, params, ds) == pytest.approx(expected, rel=1e-12)


class TestGroupRisk:
    def test_single_group_equals_empirical(self):
        rng = np.random.default_rng(6)
        spec = ModelSpec((3, 4, 2))
        ds = make_dataset(rng, 30, 3)
        params = random_params(spec, rng)
        assert group_risk(spec, params, ds, 0) == empirical_risk(spec, params, ds)

    def test_weighted_decomposition(self):
        """The full risk is the size-weighted sum of group risks, to 1e-10."""
        rng = np.random.default_rng(7)
        spec = ModelSpec((4, 6, 3))
        for _ in range(20):
            ds = make_dataset(rng, 60, 4, n_classes=3, n_groups=3)
            params = random_params(spec, rng)
            total = empirical_risk(spec, params, ds)
            sizes = ds.group_sizes()
            mix = sum(
                sizes[a] / ds.n * group_risk(spec, params, ds, a)
                for a in range(ds.n_groups)
            )
            assert abs(total - mix) < 1e-10

    def test_two_group_brute_force(self):
        rng = np.random.default_rng(8)
        spec = ModelSpec((3, 4, 1), output="sigmoid_binary",
                         loss_kind="binary_cross_entropy")
        ds = make_dataset(rng, 50, 3, n_classes=2, n_groups=2)
        params = random_params(spec, rng)
        per = numpy_per_sample_losses(spec, params, ds)
        for a in range(2):
            expected = per[ds.groups == a].mean()
            assert group_risk(spec, params, ds, a) == pytest.approx(expected, rel=1e-12)

    def test_absent_group_rejected(self):
        rng = np.random.default_rng(9)
        spec = ModelSpec((3, 2))
        ds = make_dataset(rng, 10, 3)
        with pytest.raises(ValueError, match="unknown group"):
            group_risk(spec, random_params(spec, rng), ds, 3)


class TestTrain:
    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(10)
        spec = ModelSpec((3, 4, 2))
        ds = make_dataset(rng, 20, 3)
        params = init_model(spec, 0)
        cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=8, seed=0)
        result = train(spec, params, ds, cfg)
        assert result.params.values.tobytes() == params.values.tobytes()

    def test_convex_logistic_reaches_small_gradient(self):
        """A linear sigmoid model on overlapping classes is convex; a couple
        hundred full-batch epochs drive the gradient norm below 1e-4."""
        rng = np.random.default_rng(12)
        n = 80
        X = rng.standard_normal((n, 2))
        y = (X[:, 0] + 0.5 * rng.standard_normal(n) > 0).astype(int)
        ds = Dataset(X, np.zeros(n, int), y)
        spec = ModelSpec((2, 1), output="sigmoid_binary",
                         loss_kind="binary_cross_entropy")
        cfg = TrainConfig(learning_rate=0.8, epochs=200, batch_size=n,
                          momentum=0.9, weight_decay=0.0, seed=0)
        result = train(spec, init_model(spec, 0), ds, cfg)
        grad = gradient(spec, result.params, ds)
        assert np.linalg.norm(grad.values) < 1e-4

    def test_quadratic_full_batch_descent_is_monotone(self):
        """Exact gradient descent on a quadratic with lr < 2/lambda_max."""
        rng = np.random.default_rng(13)
        n, d = 30, 3
        X = rng.standard_normal((n, d))
        y = np.zeros(n, int)
        ds = Dataset(X, y, rng.integers(0, 2, n))
        spec = ModelSpec((d, 1), output="linear", loss_kind="mse")
        aug = np.hstack([X, np.ones((n, 1))])
        lmax = np.linalg.eigvalsh(2.0 * aug.T @ aug / n).max()
        cfg = TrainConfig(learning_rate=1.0 / lmax, epochs=50, batch_size=n,
                          momentum=0.0, weight_decay=0.0, seed=0)
        result = train(spec, init_model(spec, 3), ds, cfg)
        assert np.all(np.diff(result.epoch_losses) <= 1e-15)

    def test_bit_reproducible(self):
        rng = np.random.default_rng(14)
        spec = ModelSpec((3, 5, 2))
        ds = make_dataset(rng, 40, 3)
        cfg = TrainConfig(learning_rate=0.05, epochs=10, batch_size=7, seed=21)
        a = train(spec, init_model(spec, 2), ds, cfg)
        b = train(spec, init_model(spec, 2), ds, cfg)
        assert a.params.values.tobytes() == b.params.values.tobytes()
        np.testing.assert_array_equal(a.epoch_losses, b.epoch_losses)

    def test_divergence_carries_last_finite_state(self):
        rng = np.random.default_rng(15)
        spec = ModelSpec((2, 4, 2), hidden_activation="relu")
        ds = make_dataset(rng, 20, 2, scale=10.0)
        cfg = TrainConfig(learning_rate=1e12, epochs=10, batch_size=5, seed=0)
        with pytest.raises(DivergenceError) as info:
            train(spec, init_model(spec, 0), ds, cfg)
        err = info.value
        assert np.all(np.isfinite(err.last_params.values))
        assert err.epochs_completed < 10

    def test_masked_coordinates_stay_exactly_zero(self):
        rng = np.random.default_rng(16)
        spec = ModelSpec((3, 6, 2))
        ds = make_dataset(rng, 30, 3)
        params = init_model(spec, 1)
        keep = np.ones(params.k, dtype=bool)
        keep[::3] = False
        start = params.with_values(np.where(keep, params.values, 0.0))
        cfg = TrainConfig(learning_rate=0.1, epochs=8, batch_size=8, seed=2)
        result = train(spec, start, ds, cfg, mask=keep)
        assert np.all(result.params.values[~keep] == 0.0)
        assert np.any(result.params.values[keep] != start.values[keep])

    def test_epoch_loss_length(self):
        rng = np.random.default_rng(17)
        spec = ModelSpec((3, 2))
        ds = make_dataset(rng, 12, 3)
        cfg = TrainConfig(learning_rate=0.01, epochs=7, batch_size=4, seed=0)
        result = train(spec, init_model(spec, 0), ds, cfg)
        assert len(result.epoch_losses) == 7


class TestParamSerialization:
    def test_round_trip_with_sidecar(self, tmp_path):
        rng = np.random.default_rng(18)
        spec = ModelSpec((4, 3, 2), hidden_activation="relu")
        params = random_params(spec, rng)
        path = tmp_path / "model.params"
        save_params(params, path, spec)
        back, back_spec = load_params(path)
        np.testing.assert_array_equal(back.values, params.values)
        assert back.layout == params.layout
        assert back_spec == spec

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"garbage!")
        with pytest.raises(ValueError, match="not a parameter vector"):
            load_params(path)
