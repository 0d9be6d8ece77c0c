"""Magnitude pruning, mask algebra, and perturbation norms."""

import numpy as np
import pytest

from fairprune.netcore import ModelSpec, ParamVector, init_model
from fairprune.pruner import (
    apply_mask,
    load_mask,
    magnitude_prune,
    nested,
    prune_delta_norm,
    save_mask,
)
from util import random_params


def vec(values) -> ParamVector:
    values = np.asarray(values, dtype=np.float64)
    spec = ModelSpec((values.size, 1), output="linear", loss_kind="mse",
                     use_bias=False)
    return ParamVector(values, init_model(spec, 0).layout)


class TestMagnitudePrune:
    def test_documented_half_rate_example(self):
        """[0.5, -0.1, 0.3, -0.7] at rate 0.5 zeroes indices 1 and 2."""
        mask, pruned = magnitude_prune(vec([0.5, -0.1, 0.3, -0.7]), 0.5)
        np.testing.assert_array_equal(mask.keep, [True, False, False, True])
        np.testing.assert_array_equal(pruned.values, [0.5, 0.0, 0.0, -0.7])

    def test_rate_zero_identity(self):
        params = vec([0.5, -0.1, 0.3, -0.7])
        mask, pruned = magnitude_prune(params, 0.0)
        assert mask.n_pruned == 0
        np.testing.assert_array_equal(pruned.values, params.values)

    def test_rate_one_zeroes_everything(self):
        mask, pruned = magnitude_prune(vec([0.5, -0.1, 0.3, -0.7]), 1.0)
        assert mask.n_pruned == 4
        np.testing.assert_array_equal(pruned.values, np.zeros(4))

    def test_round_half_up_count(self):
        # 5 coordinates at rate 0.5: round-half-up gives 3 pruned
        mask, _ = magnitude_prune(vec([1.0, 2.0, 3.0, 4.0, 5.0]), 0.5)
        assert mask.n_pruned == 3

    def test_ties_prune_lower_index_first(self):
        mask, _ = magnitude_prune(vec([0.3, 0.3, -0.3, 0.3]), 0.25)
        np.testing.assert_array_equal(mask.keep, [False, True, True, True])

    def test_exempt_indices_never_pruned(self):
        params = vec([0.01, 0.02, 5.0, 6.0])
        mask, pruned = magnitude_prune(params, 0.5, exempt_indices=[0])
        assert mask.keep[0]
        # 3 prunable coordinates -> round_half_up(1.5) = 2 pruned
        assert mask.n_pruned == 2
        np.testing.assert_array_equal(pruned.values, [0.01, 0.0, 0.0, 6.0])

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError, match="rate"):
            magnitude_prune(vec([1.0]), 1.5)

    def test_no_kept_weight_smaller_than_pruned(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            params = vec(rng.standard_normal(rng.integers(2, 40)))
            rate = float(rng.uniform(0, 1))
            mask, _ = magnitude_prune(params, rate)
            pruned_abs = np.abs(params.values[~mask.keep])
            kept_abs = np.abs(params.values[mask.keep])
            if pruned_abs.size and kept_abs.size:
                assert kept_abs.min() >= pruned_abs.max() - 1e-15

    def test_idempotent_at_same_rate(self):
        rng = np.random.default_rng(1)
        params = vec(rng.standard_normal(21))
        _, pruned = magnitude_prune(params, 0.4)
        _, again = magnitude_prune(pruned, 0.4)
        np.testing.assert_array_equal(again.values, pruned.values)


class TestNested:
    def test_lower_rate_nested_in_higher(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            params = vec(rng.standard_normal(25))
            r1, r2 = sorted(rng.uniform(0, 1, 2))
            low, _ = magnitude_prune(params, r1)
            high, _ = magnitude_prune(params, r2)
            assert nested(low, high)

    def test_equal_rates_nested(self):
        params = vec(np.arange(1.0, 9.0))
        a, _ = magnitude_prune(params, 0.5)
        b, _ = magnitude_prune(params, 0.5)
        assert nested(a, b) and nested(b, a)

    def test_different_sources_rejected(self):
        a, _ = magnitude_prune(vec([1.0, 2.0, 3.0]), 0.3)
        b, _ = magnitude_prune(vec([4.0, 5.0, 6.0]), 0.6)
        with pytest.raises(ValueError, match="different source"):
            nested(a, b)

    def test_length_mismatch_rejected(self):
        a, _ = magnitude_prune(vec([1.0, 2.0]), 0.5)
        b, _ = magnitude_prune(vec([1.0, 2.0, 3.0]), 0.5)
        with pytest.raises(ValueError, match="lengths differ"):
            nested(a, b)


class TestPruneDeltaNorm:
    def test_rate_zero_gives_zero(self):
        params = vec([0.5, -0.1, 0.3, -0.7])
        _, pruned = magnitude_prune(params, 0.0)
        assert prune_delta_norm(params, pruned) == 0.0

    def test_documented_value(self):
        """Pruning 0.1 and 0.3 gives a perturbation of sqrt(0.10)."""
        params = vec([0.5, -0.1, 0.3, -0.7])
        _, pruned = magnitude_prune(params, 0.5)
        assert prune_delta_norm(params, pruned) == pytest.approx(np.sqrt(0.10), rel=1e-12)

    def test_nondecreasing_in_rate(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec((6, 8, 3))
        params = random_params(spec, rng)
        norms = []
        for rate in np.linspace(0.0, 1.0, 11):
            _, pruned = magnitude_prune(params, float(rate))
            norms.append(prune_delta_norm(params, pruned))
        assert all(b >= a for a, b in zip(norms, norms[1:]))

    def test_equals_root_sum_of_pruned_squares(self):
        rng = np.random.default_rng(4)
        params = vec(rng.standard_normal(30))
        mask, pruned = magnitude_prune(params, 0.6)
        expected = np.sqrt(np.sum(params.values[~mask.keep] ** 2))
        assert prune_delta_norm(params, pruned) == pytest.approx(expected, rel=1e-14)


class TestMaskSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = vec(rng.standard_normal(37))
        mask, _ = magnitude_prune(params, 0.42)
        path = tmp_path / "mask.bin"
        save_mask(mask, path)
        back = load_mask(path)
        np.testing.assert_array_equal(back.keep, mask.keep)
        assert back.rate == mask.rate
        assert back.source_checksum == mask.source_checksum
        assert back.tie_policy_tag == mask.tie_policy_tag

    def test_apply_mask_matches_prune(self):
        rng = np.random.default_rng(6)
        params = vec(rng.standard_normal(15))
        mask, pruned = magnitude_prune(params, 0.5)
        np.testing.assert_array_equal(apply_mask(params, mask).values, pruned.values)
