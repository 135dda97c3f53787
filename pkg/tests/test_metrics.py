"""Metric oracles: similarity, PSNR closed forms, Dice, significance tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as scipy_stats

from reference_metrics import ms_ssim_volume
from sctfuse.data import HU_RANGE, Volume
from sctfuse.errors import ContractError
from sctfuse.evaluation import (
    ThresholdBandSegmenter,
    dice,
    ms_ssim,
    paired_t_test,
    psnr,
    seg_score,
)
from sctfuse.phantoms import ORGAN_BANDS, structured_ct, two_organ_ct


class TestMsSsim:
    def test_identity_is_exactly_one(self):
        v = structured_ct((2, 64, 64), seed=1).voxels
        assert ms_ssim(v, v, scales=3) == 1.0

    def test_matches_reference_on_phantom_pairs(self):
        for seed_a, seed_b in ((1, 2), (3, 4), (5, 6)):
            a = structured_ct((2, 192, 192), seed=seed_a).voxels
            b = structured_ct((2, 192, 192), seed=seed_b).voxels
            ours = ms_ssim(a, b, scales=5)
            ref = ms_ssim_volume(a, b, scales=5, data_range=HU_RANGE)
            assert ours == pytest.approx(ref, abs=1e-4)

    def test_matches_reference_on_noisy_pair(self):
        rng = np.random.default_rng(7)
        gt = structured_ct((2, 192, 192), seed=9).voxels
        noisy = gt + rng.normal(0, 80, gt.shape)
        assert ms_ssim(noisy, gt) == pytest.approx(ms_ssim_volume(noisy, gt), abs=1e-4)

    def test_constant_vs_structured_is_low(self):
        gt = structured_ct((2, 64, 64), seed=2).voxels
        flat = np.full_like(gt, gt.mean())
        assert ms_ssim(flat, gt, scales=3) < 0.2

    def test_bounded(self):
        a = structured_ct((1, 64, 64), seed=3).voxels
        b = structured_ct((1, 64, 64), seed=4).voxels
        assert 0.0 <= ms_ssim(a, b, scales=3) <= 1.0

    def test_accepts_volume_objects(self):
        v = structured_ct((1, 64, 64), seed=5)
        assert ms_ssim(v, v, scales=3) == 1.0

    def test_scale_reduction_warns(self):
        v = structured_ct((1, 64, 64), seed=6).voxels
        with pytest.warns(UserWarning, match="scales"):
            value = ms_ssim(v, v, scales=5)
        assert value == 1.0

    def test_too_small_rejected(self):
        v = np.zeros((1, 8, 8))
        with pytest.raises(ContractError):
            ms_ssim(v, v)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ms_ssim(np.zeros((1, 64, 64)), np.zeros((2, 64, 64)))

    def test_degrades_with_noise(self):
        rng = np.random.default_rng(0)
        gt = structured_ct((1, 64, 64), seed=8).voxels
        small = ms_ssim(gt + rng.normal(0, 30, gt.shape), gt, scales=3)
        large = ms_ssim(gt + rng.normal(0, 300, gt.shape), gt, scales=3)
        assert large < small < 1.0


class TestPsnr:
    def test_identity_is_inf(self):
        v = structured_ct((1, 32, 32), seed=1).voxels
        assert psnr(v, v) == math.inf

    def test_constant_offset_closed_form(self):
        gt = np.zeros((4, 64, 64))
        assert psnr(gt + 30.24, gt) == pytest.approx(40.0, abs=1e-9)

    def test_closed_form_over_random_offsets(self):
        rng = np.random.default_rng(11)
        gt = np.zeros((2, 16, 16))
        for _ in range(20):
            d = float(rng.uniform(0.01, 500.0))
            expected = 20.0 * math.log10(HU_RANGE / abs(d))
            assert psnr(gt + d, gt) == pytest.approx(expected, abs=1e-9)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1000, 2000, (2, 16, 16))
        b = rng.uniform(-1000, 2000, (2, 16, 16))
        mse = float(np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(10 * math.log10(HU_RANGE**2 / mse), abs=1e-9)

    def test_monotone_in_mse(self):
        gt = np.zeros((1, 8, 8))
        values = [psnr(gt + d, gt) for d in (1.0, 10.0, 100.0, 1000.0)]
        assert values == sorted(values, reverse=True)

    def test_requires_positive_range(self):
        with pytest.raises(ContractError):
            psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), data_range=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


class TestDice:
    def test_equal_nonempty(self):
        m = np.zeros((4, 4), dtype=bool)
        m[1:3, 1:3] = True
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 8), dtype=bool)
        b = np.zeros((1, 8), dtype=bool)
        a[0, 0:4] = True
        b[0, 2:6] = True  # overlap 2, sizes 4+4
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        assert dice(np.zeros((3, 3), dtype=bool), np.zeros((3, 3), dtype=bool)) == 1.0

    def test_one_empty_is_zero(self):
        a = np.zeros((3, 3), dtype=bool)
        b = np.ones((3, 3), dtype=bool)
        assert dice(a, b) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            dice(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_bounded_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 6)) > 0.5
        b = rng.random((6, 6)) > 0.5
        d = dice(a, b)
        assert 0.0 <= d <= 1.0
        assert dice(b, a) == d


class TestSegmenter:
    def test_labels_follow_bands(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        v = two_organ_ct((2, 32, 32))
        labels = seg(v)
        assert labels.shape == v.shape
        assert set(np.unique(labels)) <= {0, 1, 2}
        assert (labels == 1).any() and (labels == 2).any()

    def test_overlapping_bands_rejected(self):
        with pytest.raises(ContractError):
            ThresholdBandSegmenter({"a": (0.0, 100.0), "b": (50.0, 150.0)})

    def test_deterministic(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        v = two_organ_ct((1, 16, 16))
        assert np.array_equal(seg(v), seg(v))


class TestSegScore:
    def test_identical_volumes_score_one(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        v = two_organ_ct((2, 64, 64))
        out = seg_score(v, v, seg)
        assert out.value == 1.0
        assert out.per_organ == {"bladder": 1.0, "prostate": 1.0}
        assert out.skipped == []

    def test_shifted_organ_matches_voxel_count_oracle(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        gt = two_organ_ct((2, 64, 64))
        pred = two_organ_ct((2, 64, 64), shift=(2, 0))
        out = seg_score(pred, gt, seg)
        # oracle: count overlap voxels of the band masks directly
        mask_p = (pred.voxels >= 250) & (pred.voxels <= 350)
        mask_g = (gt.voxels >= 250) & (gt.voxels <= 350)
        inter = int((mask_p & mask_g).sum())
        oracle_a = 2.0 * inter / (int(mask_p.sum()) + int(mask_g.sum()))
        assert out.per_organ["bladder"] == oracle_a
        assert out.per_organ["prostate"] == 1.0
        assert out.value == pytest.approx((oracle_a + 1.0) / 2.0)
        assert 0.0 < oracle_a < 1.0

    def test_gt_only_organ_scores_zero(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        gt = two_organ_ct((1, 64, 64))
        pred = Volume(np.zeros((1, 64, 64)), modality="CT")  # water only
        out = seg_score(pred, gt, seg)
        assert out.per_organ["bladder"] == 0.0
        assert out.per_organ["prostate"] == 0.0
        assert out.value == 0.0 and out.skipped == []

    def test_absent_from_both_skipped(self):
        seg = ThresholdBandSegmenter(ORGAN_BANDS)
        water = Volume(np.zeros((1, 16, 16)), modality="CT")
        out = seg_score(water, water, seg)
        assert out.value is None
        assert out.skipped == ["bladder", "prostate"]


class TestPairedTTest:
    def test_identical_lists_degenerate(self):
        res = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res.degenerate and res.p_value is None
        assert "degenerate" in res.describe()

    def test_shifted_scores_significant(self):
        rng = np.random.default_rng(5)
        base = rng.normal(0, 1, 20)
        noisy = base + 1.0 + rng.normal(0, 0.01, 20)
        res = paired_t_test(list(noisy), list(base))
        assert not res.degenerate
        assert res.p_value < 0.01

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            a = rng.normal(0, 1, 15)
            b = a + rng.normal(0.2, 0.5, 15)
            ours = paired_t_test(list(a), list(b))
            ref = scipy_stats.ttest_rel(a, b)
            assert ours.statistic == pytest.approx(ref.statistic, abs=1e-6)
            assert ours.p_value == pytest.approx(ref.pvalue, abs=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            paired_t_test([1.0, 2.0], [1.0])

    def test_too_short(self):
        with pytest.raises(ContractError):
            paired_t_test([1.0], [2.0])
