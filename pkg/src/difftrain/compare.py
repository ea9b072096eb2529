"""Array and logit comparators.

All metric accumulation happens in 64-bit floats no matter how the inputs
arrived. A comparison involving Bottom, a shape mismatch, or any non-finite
value is a hard failure regardless of the metric values.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .codec import Bottom, FailureReason, StringListArtifact, TensorArtifact
from .contract import ToleranceProfile

REL_DENOM_FLOOR = 1e-6

ComparatorInput = Union[TensorArtifact, Bottom, np.ndarray, float, int, list, tuple]


class VerdictStatus(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    HARD_FAIL = "hard_fail"


@dataclass(frozen=True)
class CompareMetrics:
    shape_match: bool
    all_finite: bool
    max_abs_err: float
    mean_abs_err: float
    max_rel_err: float
    cosine_sim: float
    max_token_kl: Optional[float] = None

    def to_json_dict(self) -> dict:
        out = {
            "shape_match": self.shape_match,
            "all_finite": self.all_finite,
            "max_abs_err": _json_float(self.max_abs_err),
            "mean_abs_err": _json_float(self.mean_abs_err),
            "max_rel_err": _json_float(self.max_rel_err),
            "cosine_sim": _json_float(self.cosine_sim),
        }
        if self.max_token_kl is not None:
            out["max_token_kl"] = _json_float(self.max_token_kl)
        return out


@dataclass(frozen=True)
class CompareVerdict:
    status: VerdictStatus
    metrics: Optional[CompareMetrics]
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.status is VerdictStatus.PASS

    @property
    def hard_failed(self) -> bool:
        return self.status is VerdictStatus.HARD_FAIL


def _json_float(x: float) -> Union[float, str]:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return float(x)


def _coerce(value: ComparatorInput) -> Union[Bottom, tuple[tuple[int, ...], np.ndarray]]:
    """Reduce an input to (shape, flat float64 data) or pass Bottom through.

    Scalars become length-1 arrays so every comparison is an array comparison.
    """
    if isinstance(value, Bottom):
        return value
    if isinstance(value, StringListArtifact):
        return Bottom(
            FailureReason.SCHEMA_MISMATCH,
            f"artifact '{value.name}' is a string list, not a tensor",
        )
    if isinstance(value, TensorArtifact):
        return value.shape, value.data.astype(np.float64)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return (1,), arr.reshape(1)
    return tuple(arr.shape), arr.reshape(-1)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Flattened cosine; two zero vectors agree perfectly, one zero vector
    agrees with nothing."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 and b.size == 0:
        return 1.0
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def _metrics(ref: np.ndarray, cand: np.ndarray, kl: Optional[float] = None) -> CompareMetrics:
    finite = bool(np.isfinite(ref).all() and np.isfinite(cand).all())
    if ref.size == 0:
        return CompareMetrics(True, finite, 0.0, 0.0, 0.0, 1.0, kl)
    # Non-finite inputs are an expected path (they hard-fail on all_finite),
    # so inf/inf noise in the metrics must not warn.
    with np.errstate(invalid="ignore"):
        diff = np.abs(ref - cand)
        rel = diff / np.maximum(np.abs(ref), REL_DENOM_FLOOR)
    return CompareMetrics(
        shape_match=True,
        all_finite=finite,
        max_abs_err=float(diff.max()),
        mean_abs_err=float(diff.mean()),
        max_rel_err=float(rel.max()),
        cosine_sim=cosine_similarity(ref, cand),
        max_token_kl=kl,
    )


_SHAPE_MISMATCH_METRICS = dict(
    all_finite=True,
    max_abs_err=math.inf,
    mean_abs_err=math.inf,
    max_rel_err=math.inf,
    cosine_sim=0.0,
)


def _verdict(metrics: CompareMetrics, tol: ToleranceProfile, check_kl: bool) -> CompareVerdict:
    if not metrics.shape_match:
        return CompareVerdict(VerdictStatus.HARD_FAIL, metrics, "shape mismatch")
    if not metrics.all_finite:
        return CompareVerdict(VerdictStatus.HARD_FAIL, metrics, "non-finite values present")
    failures = []
    if metrics.max_abs_err > tol.max_abs:
        failures.append(f"max_abs_err {metrics.max_abs_err:.6g} > {tol.max_abs:g}")
    if metrics.max_rel_err > tol.max_rel:
        failures.append(f"max_rel_err {metrics.max_rel_err:.6g} > {tol.max_rel:g}")
    if metrics.cosine_sim < tol.cos_floor:
        failures.append(f"cosine_sim {metrics.cosine_sim:.6g} < {tol.cos_floor:g}")
    if check_kl and metrics.max_token_kl is not None and metrics.max_token_kl > tol.kl_ceiling:
        failures.append(f"max_token_kl {metrics.max_token_kl:.6g} > {tol.kl_ceiling:g}")
    if failures:
        return CompareVerdict(VerdictStatus.FAIL, metrics, "; ".join(failures))
    return CompareVerdict(VerdictStatus.PASS, metrics, "")


def _bottom_verdict(ref: ComparatorInput, cand: ComparatorInput) -> Optional[CompareVerdict]:
    sides = []
    for label, value in (("reference", ref), ("candidate", cand)):
        if isinstance(coerced := _coerce(value), Bottom):
            sides.append((label, coerced))
    if not sides:
        return None
    # Candidate-side errors carry the diagnosis; prefer them in the reason.
    sides.sort(key=lambda item: 0 if item[0] == "candidate" else 1)
    label, bottom = sides[0]
    return CompareVerdict(
        VerdictStatus.HARD_FAIL, None, f"[{label}] {bottom.error}"
    )


def compare_arrays(
    ref: ComparatorInput, cand: ComparatorInput, tol: ToleranceProfile
) -> CompareVerdict:
    """Total comparison of two array-like observations under a tolerance."""
    bottom = _bottom_verdict(ref, cand)
    if bottom is not None:
        return bottom
    ref_shape, ref_data = _coerce(ref)
    cand_shape, cand_data = _coerce(cand)
    if ref_shape != cand_shape:
        metrics = CompareMetrics(shape_match=False, **_SHAPE_MISMATCH_METRICS)
        return CompareVerdict(
            VerdictStatus.HARD_FAIL,
            metrics,
            f"shape mismatch: reference {list(ref_shape)} vs candidate {list(cand_shape)}",
        )
    return _verdict(_metrics(ref_data, cand_data), tol, check_kl=False)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def max_token_kl(ref: np.ndarray, cand: np.ndarray) -> float:
    """Worst per-position KL(p_ref || p_cand) over the last axis."""
    ref = np.asarray(ref, dtype=np.float64)
    cand = np.asarray(cand, dtype=np.float64)
    if ref.ndim == 0:
        ref = ref.reshape(1)
        cand = cand.reshape(1)
    if ref.size == 0:
        return 0.0
    ls_ref = _log_softmax(ref)
    ls_cand = _log_softmax(cand)
    p_ref = np.exp(ls_ref)
    kl = (p_ref * (ls_ref - ls_cand)).sum(axis=-1)
    return float(kl.max())


def compare_logits(
    ref: ComparatorInput, cand: ComparatorInput, tol: ToleranceProfile
) -> CompareVerdict:
    """Array comparison plus the per-position KL ceiling over the vocab axis."""
    bottom = _bottom_verdict(ref, cand)
    if bottom is not None:
        return bottom
    ref_shape, ref_data = _coerce(ref)
    cand_shape, cand_data = _coerce(cand)
    if ref_shape != cand_shape:
        metrics = CompareMetrics(shape_match=False, **_SHAPE_MISMATCH_METRICS)
        return CompareVerdict(
            VerdictStatus.HARD_FAIL,
            metrics,
            f"shape mismatch: reference {list(ref_shape)} vs candidate {list(cand_shape)}",
        )
    finite = bool(np.isfinite(ref_data).all() and np.isfinite(cand_data).all())
    kl = None
    if finite:
        kl = max_token_kl(ref_data.reshape(ref_shape), cand_data.reshape(cand_shape))
    metrics = _metrics(ref_data, cand_data, kl=kl)
    return _verdict(metrics, tol, check_kl=True)


__all__ = [
    "CompareMetrics",
    "CompareVerdict",
    "ComparatorInput",
    "REL_DENOM_FLOOR",
    "VerdictStatus",
    "compare_arrays",
    "compare_logits",
    "cosine_similarity",
    "max_token_kl",
]
