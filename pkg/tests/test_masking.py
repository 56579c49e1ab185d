"""Mask algebra: intrinsic/augmented set identities, reweighting policy,
batch padding."""

import numpy as np
import pytest

from dualmae.masking import (
    IntrinsicMask,
    MaskError,
    MaskPolicy,
    build_padded_batch,
    derive_intrinsic_mask,
    keep_all_plan,
    logit_weights,
    sample_augmented_mask,
    sample_training_plan,
)


class TestIntrinsicMask:
    def test_definition(self):
        mask = derive_intrinsic_mask([5.0, None, 3.0])
        np.testing.assert_array_equal(mask.m, [1, 0, 1])
        np.testing.assert_array_equal(mask.recorded, [0, 2])
        np.testing.assert_array_equal(mask.missing, [1])

    def test_nan_counts_as_missing(self):
        mask = derive_intrinsic_mask([np.nan, 1.0])
        np.testing.assert_array_equal(mask.m, [0, 1])

    def test_all_missing(self):
        mask = derive_intrinsic_mask([None] * 4)
        assert mask.recorded.size == 0
        np.testing.assert_array_equal(mask.missing, np.arange(4))

    def test_all_present(self):
        mask = derive_intrinsic_mask([1.0, 2.0])
        assert mask.missing.size == 0


class TestLogitWeights:
    def test_a_zero_is_uniform_rate(self):
        p = np.array([0.0, 0.3, 0.99])
        np.testing.assert_array_equal(logit_weights(p, 0.0, 0.25), [0.25, 0.25, 0.25])

    def test_always_missing_column_gets_zero(self):
        w = logit_weights(np.array([1.0, 0.5]), 0.025, 0.5)
        assert w[0] == 0.0

    def test_even_odds_leaves_offset(self):
        w = logit_weights(np.array([0.5]), 0.025, 0.5)
        assert w[0] == pytest.approx(0.5, abs=1e-15)

    def test_high_missing_rate_value(self):
        # 0.5 + 0.025 * ln(0.88 / 0.12), 60-digit arithmetic, frozen
        w = logit_weights(np.array([0.88]), 0.025, 0.5)
        assert w[0] == pytest.approx(0.54981075411725515405, abs=1e-15)

    def test_out_of_range_rate_rejected(self):
        with pytest.raises(MaskError):
            logit_weights(np.array([1.2]), 0.0, 0.25)
        with pytest.raises(MaskError):
            logit_weights(np.array([-0.1]), 0.0, 0.25)

    def test_clamped_to_unit_interval(self):
        p = np.linspace(0.001, 0.999, 200)
        w = logit_weights(p, 0.4, 0.5)
        assert (w >= 0.0).all() and (w <= 1.0).all()

    def test_monotone_in_missing_rate(self):
        p = np.linspace(0.01, 0.99, 99)
        up = logit_weights(p, 0.025, 0.5)
        down = logit_weights(p, -0.025, 0.5)
        assert (np.diff(up) >= 0).all()
        assert (np.diff(down) <= 0).all()

    def test_policy_validates_base_rate(self):
        with pytest.raises(MaskError):
            MaskPolicy(a=0.0, b=0.0)
        with pytest.raises(MaskError):
            MaskPolicy(a=0.0, b=1.0)
        policy = MaskPolicy(a=0.0, b=0.25)
        np.testing.assert_array_equal(policy.weights(np.array([0.2])), [0.25])


class TestAugmentedSampling:
    def test_empty_recorded_set(self):
        mask = derive_intrinsic_mask([None, None])
        plan = sample_augmented_mask(mask, np.full(2, 0.5), np.random.default_rng(0))
        assert plan.augmented.size == 0 and plan.kept.size == 0

    def test_zero_weight_keeps_everything(self):
        mask = derive_intrinsic_mask([1.0] * 10)
        plan = sample_augmented_mask(mask, np.zeros(10), np.random.default_rng(0))
        assert plan.augmented.size == 0
        np.testing.assert_array_equal(plan.kept, np.arange(10))

    def test_monte_carlo_rate(self):
        n = 100_000
        mask = IntrinsicMask(np.ones(n, dtype=np.uint8))
        plan = sample_augmented_mask(mask, np.full(n, 0.25), np.random.default_rng(42))
        rate = plan.augmented.size / n
        assert abs(rate - 0.25) < 0.01

    def test_uniform_policy_equals_bernoulli(self):
        # a = 0 must behave as independent Bernoulli(b) over recorded tokens
        n = 100_000
        mask = IntrinsicMask(np.ones(n, dtype=np.uint8))
        w = logit_weights(np.full(n, 0.4), 0.0, 0.25)
        plan = sample_augmented_mask(mask, w, np.random.default_rng(7))
        assert abs(plan.augmented.size / n - 0.25) < 0.01

    def test_deterministic_under_seed(self):
        mask = IntrinsicMask((np.arange(50) % 3 != 0).astype(np.uint8))
        w = np.full(50, 0.5)
        a = sample_augmented_mask(mask, w, np.random.default_rng(5))
        b = sample_augmented_mask(mask, w, np.random.default_rng(5))
        np.testing.assert_array_equal(a.m_prime, b.m_prime)

    def test_partition_property(self):
        rng = np.random.default_rng(123)
        for _ in range(10_000):
            length = int(rng.integers(1, 12))
            m = (rng.random(length) < 0.6).astype(np.uint8)
            plan = sample_augmented_mask(IntrinsicMask(m), rng.random(length), rng)
            union = np.concatenate([plan.kept, plan.augmented, plan.missing])
            union.sort()
            np.testing.assert_array_equal(union, np.arange(length))
            assert np.intersect1d(plan.augmented, plan.missing).size == 0
            assert np.intersect1d(plan.kept, plan.augmented).size == 0

    def test_missing_positions_never_augmented(self):
        rng = np.random.default_rng(9)
        m = np.array([1, 0, 1, 0, 1], dtype=np.uint8)
        for _ in range(200):
            plan = sample_augmented_mask(IntrinsicMask(m), np.ones(5), rng)
            assert not np.isin(plan.augmented, [1, 3]).any()

    def test_training_plan_forces_nonempty_kept(self):
        mask = derive_intrinsic_mask([1.0, 2.0, 3.0])
        weights = np.array([1.0, 1.0, 1.0])  # always hides everything
        rng = np.random.default_rng(0)
        plan = sample_training_plan(mask, weights, rng)
        assert plan.kept.size >= 1

    def test_keep_all_plan(self):
        mask = derive_intrinsic_mask([1.0, None, 2.0])
        plan = keep_all_plan(mask)
        np.testing.assert_array_equal(plan.kept, [0, 2])
        assert plan.augmented.size == 0


class TestPaddedBatch:
    def _plans(self, kept_counts, length=8):
        plans = []
        rng = np.random.default_rng(0)
        for n in kept_counts:
            m = np.zeros(length, dtype=np.uint8)
            pos = rng.choice(length, size=n, replace=False)
            m[pos] = 1
            plans.append(keep_all_plan(IntrinsicMask(m)))
        return plans

    def test_equal_lengths_no_padding(self):
        batch = build_padded_batch(self._plans([3, 3]))
        assert batch.l_keep == 3
        assert batch.seq_len == 4  # CLS slot
        assert (batch.kept_idx >= 0).all()
        np.testing.assert_array_equal(batch.gamma, 1.0)

    def test_shorter_sample_gains_blocked_pads(self):
        batch = build_padded_batch(self._plans([5, 2]))
        assert batch.l_keep == 5
        assert (batch.kept_idx[1, 2:] == -1).all()
        # pad rows and columns of gamma are zero for the short sample
        assert (batch.gamma[1, 0, 3:, :] == 0.0).all()
        assert (batch.gamma[1, 0, :, 3:] == 0.0).all()
        # real block fully connected (slots 0..2: CLS + 2 kept)
        assert (batch.gamma[1, 0, :3, :3] == 1.0).all()

    def test_empty_batch_rejected(self):
        with pytest.raises(MaskError):
            build_padded_batch([])

    def test_sample_without_kept_tokens_rejected(self):
        mask = IntrinsicMask(np.zeros(4, dtype=np.uint8))
        with pytest.raises(MaskError):
            build_padded_batch([keep_all_plan(mask)])
