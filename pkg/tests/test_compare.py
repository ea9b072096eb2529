"""Comparator semantics: metric values against the brute-force oracle, the
failure conventions around Bottom/shape/non-finite inputs, and exact behavior
at the tolerance boundaries."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from difftrain.codec import Bottom, DtypeTag, FailureReason, StringListArtifact, TensorArtifact
from difftrain.compare import (
    REL_DENOM_FLOOR,
    CompareMetrics,
    VerdictStatus,
    _verdict,
    compare_arrays,
    compare_logits,
    cosine_similarity,
    max_token_kl,
)
from difftrain.contract import BF16_COMPARE, FP16_COMPARE, ToleranceProfile

WIDE = ToleranceProfile(max_abs=1e9, max_rel=1e9, cos_floor=-2.0, kl_ceiling=1e9)

# Dyadic thresholds so that boundary cases are exactly representable. With the
# shipped decimal thresholds an anchor >= 1 cannot produce max_abs_err equal to
# the threshold in float64, so exact-boundary behavior needs its own profile.
DYADIC = ToleranceProfile(max_abs=0.03125, max_rel=0.03125, cos_floor=0.5, kl_ceiling=1.0)


def norm_arrays(seed):
    rng = np.random.default_rng(seed)
    ndim = int(rng.integers(1, 5))
    shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
    scale = 10.0 ** float(rng.integers(-4, 3))
    ref = rng.normal(size=shape) * scale
    cand = ref + rng.normal(size=shape) * scale * 1e-3
    return ref, cand


class TestMetricsOracle:
    @pytest.mark.parametrize("seed", range(1000))
    def test_metrics_match_oracle(self, seed):
        ref, cand = norm_arrays(seed)
        got = compare_arrays(ref, cand, WIDE).metrics
        want = oracles.metrics_oracle(ref.reshape(-1).tolist(), cand.reshape(-1).tolist())
        for key, value in want.items():
            if key == "all_finite":
                assert got.all_finite == value
            else:
                assert oracles.close(getattr(got, key), value, 1e-12), (seed, key)

    @pytest.mark.parametrize("seed", range(200))
    def test_kl_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rows, vocab = int(rng.integers(1, 8)), int(rng.integers(2, 12))
        ref = rng.normal(size=(rows, vocab)) * 3
        cand = ref + rng.normal(size=(rows, vocab)) * 0.2
        got = max_token_kl(ref, cand)
        want = oracles.max_kl_oracle(ref.tolist(), cand.tolist())
        assert oracles.close(got, want, 1e-12)

    def test_identity_is_exactly_zero_error(self):
        arr = np.linspace(-3, 3, 23)
        m = compare_arrays(arr, arr.copy(), FP16_COMPARE).metrics
        assert (m.max_abs_err, m.mean_abs_err, m.max_rel_err) == (0.0, 0.0, 0.0)
        assert m.cosine_sim == pytest.approx(1.0, abs=1e-15)

    def test_rel_error_floor(self):
        # |ref| below the floor divides by the floor, not by |ref|.
        v = compare_arrays([1e-9], [2e-9], WIDE)
        assert v.metrics.max_rel_err == pytest.approx(1e-9 / REL_DENOM_FLOOR)
        v = compare_arrays([1.0], [1.5], WIDE)
        assert v.metrics.max_rel_err == pytest.approx(0.5)


class TestConventions:
    def test_empty_arrays_pass(self):
        v = compare_arrays(np.zeros(0), np.zeros(0), FP16_COMPARE)
        assert v.passed
        m = v.metrics
        assert (m.max_abs_err, m.mean_abs_err, m.max_rel_err, m.cosine_sim) == (0, 0, 0, 1.0)

    def test_zero_vectors_cosine(self):
        assert cosine_similarity(np.zeros(4), np.zeros(4)) == 1.0
        assert cosine_similarity(np.zeros(4), np.ones(4)) == 0.0
        assert cosine_similarity(np.zeros(0), np.zeros(0)) == 1.0

    def test_scalars_compare_as_length_one_arrays(self):
        assert compare_arrays(2.0, 2.0, FP16_COMPARE).passed
        assert compare_arrays(2.0, np.asarray([2.0]), FP16_COMPARE).passed

    def test_empty_logits_kl(self):
        assert max_token_kl(np.zeros((0, 5)), np.zeros((0, 5))) == 0.0

    def test_single_logit_kl_is_zero(self):
        # One-element softmax is a point mass either way.
        assert max_token_kl(np.asarray([3.0]), np.asarray([-5.0])) == 0.0


class TestHardFailures:
    def test_bottom_reference(self):
        v = compare_arrays(Bottom(FailureReason.TIMEOUT, "took too long"), [1.0], FP16_COMPARE)
        assert v.status is VerdictStatus.HARD_FAIL
        assert v.metrics is None
        assert v.reason == "[reference] took too long"

    def test_bottom_candidate_preferred_in_reason(self):
        v = compare_arrays(
            Bottom(FailureReason.TIMEOUT, "ref side"),
            Bottom(FailureReason.RUNTIME_ERROR, "cand side"),
            FP16_COMPARE,
        )
        assert v.reason == "[candidate] cand side"

    def test_string_list_is_schema_bottom(self):
        art = StringListArtifact("text", ("a",))
        v = compare_arrays(art, [1.0], FP16_COMPARE)
        assert v.status is VerdictStatus.HARD_FAIL
        assert "string list, not a tensor" in v.reason

    def test_shape_mismatch(self):
        v = compare_arrays(np.zeros((2, 3)), np.zeros((6,)), FP16_COMPARE)
        assert v.status is VerdictStatus.HARD_FAIL
        assert v.reason == "shape mismatch: reference [2, 3] vs candidate [6]"
        m = v.metrics
        assert not m.shape_match
        assert m.max_abs_err == math.inf and m.max_rel_err == math.inf
        assert m.cosine_sim == 0.0

    def test_nonfinite_values(self):
        v = compare_arrays([1.0, np.nan], [1.0, 1.0], FP16_COMPARE)
        assert v.status is VerdictStatus.HARD_FAIL
        assert v.reason == "non-finite values present"
        assert not v.metrics.all_finite

    def test_nonfinite_logits_skip_kl(self):
        v = compare_logits([np.inf, 1.0], [1.0, 1.0], FP16_COMPARE)
        assert v.status is VerdictStatus.HARD_FAIL
        assert v.metrics.max_token_kl is None

    def test_tensor_artifacts_compare_by_payload(self):
        a = TensorArtifact("x", (2,), DtypeTag.F32, [1.0, 2.0])
        b = TensorArtifact("x", (2,), DtypeTag.F32, [1.0, 2.0])
        assert compare_arrays(a, b, FP16_COMPARE).passed


class TestThresholdBoundaries:
    def test_exact_dyadic_boundary_passes(self):
        # max_abs_err and max_rel_err both land exactly on 0.03125.
        v = compare_arrays([1.0], [1.03125], DYADIC)
        assert v.metrics.max_abs_err == DYADIC.max_abs
        assert v.metrics.max_rel_err == DYADIC.max_rel
        assert v.passed

    def test_one_ulp_past_boundary_fails(self):
        v = compare_arrays([1.0], [math.nextafter(1.03125, 2.0)], DYADIC)
        assert v.status is VerdictStatus.FAIL
        assert "max_abs_err" in v.reason

    def test_just_inside_boundary_passes(self):
        v = compare_arrays([1.0], [math.nextafter(1.03125, 0.0)], DYADIC)
        assert v.passed

    @pytest.mark.parametrize("tol", [FP16_COMPARE, BF16_COMPARE], ids=["fp16", "bf16"])
    def test_named_profiles_pass_at_exact_threshold_metrics(self, tol):
        """Feed the verdict metrics that sit exactly on every threshold; strict
        inequalities must let them through."""
        metrics = CompareMetrics(
            shape_match=True,
            all_finite=True,
            max_abs_err=tol.max_abs,
            mean_abs_err=tol.max_abs,
            max_rel_err=tol.max_rel,
            cosine_sim=tol.cos_floor,
            max_token_kl=tol.kl_ceiling,
        )
        assert _verdict(metrics, tol, check_kl=True).passed

    @pytest.mark.parametrize("tol", [FP16_COMPARE, BF16_COMPARE], ids=["fp16", "bf16"])
    @pytest.mark.parametrize("axis", ["max_abs_err", "max_rel_err", "cosine_sim", "max_token_kl"])
    def test_named_profiles_fail_one_ulp_past_each_threshold(self, tol, axis):
        base = dict(
            shape_match=True,
            all_finite=True,
            max_abs_err=0.0,
            mean_abs_err=0.0,
            max_rel_err=0.0,
            cosine_sim=1.0,
            max_token_kl=0.0,
        )
        limits = {
            "max_abs_err": tol.max_abs,
            "max_rel_err": tol.max_rel,
            "cosine_sim": tol.cos_floor,
            "max_token_kl": tol.kl_ceiling,
        }
        direction = 0.0 if axis == "cosine_sim" else 2.0
        base[axis] = math.nextafter(limits[axis], direction)
        v = _verdict(CompareMetrics(**base), tol, check_kl=True)
        assert v.status is VerdictStatus.FAIL
        assert axis in v.reason

    def test_failure_reason_lists_every_breached_axis(self):
        v = compare_arrays([1.0, 0.0], [2.0, 1.0], FP16_COMPARE)
        assert v.status is VerdictStatus.FAIL
        assert "max_abs_err" in v.reason and "max_rel_err" in v.reason
        assert ";" in v.reason

    def test_kl_checked_only_for_logits(self):
        # Same probability ratios but a huge KL would only matter via compare_logits.
        ref = np.asarray([[1.0, 9.0]])
        cand = np.asarray([[9.0, 1.0]])
        tol = ToleranceProfile(max_abs=100.0, max_rel=1000.0, cos_floor=-2.0, kl_ceiling=1e-3)
        assert compare_arrays(ref, cand, tol).passed
        v = compare_logits(ref, cand, tol)
        assert v.status is VerdictStatus.FAIL
        assert "max_token_kl" in v.reason


finite_pairs = st.integers(min_value=0, max_value=2**31 - 1).map(norm_arrays)


class TestProperties:
    @given(finite_pairs)
    @settings(max_examples=80, deadline=None)
    def test_loosening_tolerance_never_flips_pass_to_fail(self, pair):
        ref, cand = pair
        tight = ToleranceProfile(max_abs=1e-3, max_rel=1e-3, cos_floor=0.9999, kl_ceiling=1e-3)
        loose = ToleranceProfile(max_abs=1e-1, max_rel=1e-1, cos_floor=0.9, kl_ceiling=1e-1)
        if compare_logits(ref, cand, tight).passed:
            assert compare_logits(ref, cand, loose).passed

    @given(finite_pairs)
    @settings(max_examples=80, deadline=None)
    def test_self_comparison_always_passes(self, pair):
        ref, _ = pair
        v = compare_logits(ref, ref.copy(), FP16_COMPARE)
        assert v.passed
        assert v.metrics.max_abs_err == 0.0

    @given(finite_pairs)
    @settings(max_examples=80, deadline=None)
    def test_verdict_is_total_on_finite_inputs(self, pair):
        ref, cand = pair
        v = compare_arrays(ref, cand, BF16_COMPARE)
        assert v.status in (VerdictStatus.PASS, VerdictStatus.FAIL)
        assert v.metrics is not None

    @given(
        hnp.arrays(
            np.float64,
            st.integers(min_value=1, max_value=16),
            elements=st.floats(min_value=-1e6, max_value=1e6),
        )
    )
    @settings(max_examples=80, deadline=None)
    def test_kl_nonnegative(self, ref):
        rng = np.random.default_rng(0)
        cand = ref + rng.normal(size=ref.shape)
        assert max_token_kl(ref, cand) >= -1e-12
