"""Staged differential verification.

A run probes the reference alone (preflight), then walks both runtimes through
three gated stages: spec (identity and structure), numeric (forward and
gradient agreement), behavioral (replayed steps and generation). A stage runs
only when its predecessor passed; a gated stage carries a single BLOCKED
stage_gate record and no probes.

Fault routing follows one rule. A failure scoped to a single artifact (missing
name, non-finite payload) flows into the comparison that owns the artifact and
hard-fails it. A failure that takes out a whole probe (timeout, crash,
protocol breakdown) poisons the runtime handle, skips every check that needed
that probe, and lands on the stage's catch-all runtime check instead.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from . import ENGINE_VERSION
from .codec import (
    DEFAULT_FRAME_CAP,
    ArtifactSet,
    Bottom,
    FailureReason,
    StringListArtifact,
    TensorArtifact,
    is_bottom,
)
from .compare import CompareVerdict, VerdictStatus, compare_arrays, compare_logits
from .contract import (
    BoundedConfig,
    EquivalenceContract,
    Method,
    PpoValueMode,
    ProbeKind,
    ProbeSpec,
    ToleranceProfile,
    build_contract,
)
from .kernels import (
    DpoInputs,
    DpoLossType,
    KernelError,
    dpo_loss,
    global_grad_norm,
    lr_schedule,
    micro_batch_invariant,
    ppo_method_loss,
    ppo_valid_mask,
    sequence_logprobs,
    shifted_causal_ce,
    shifted_valid_mask,
    token_logprobs,
)
from .runner import RuntimeHandle, UnresolvableRuntime

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
SCHEDULE_HORIZON = 8

PPO_VALUES_REQUIRED = "PPO model must return values."
DPO_REF_LOGPS_REQUIRED = "ref log-probs required for sigmoid DPO loss"

PREFLIGHT_CHECKS = (
    "params_nonempty",
    "batch_nonempty",
    "forward_finite",
    "contract_derivable",
    "grads_finite",
    "lr_finite",
    "method_loss_finite",
    "generation_supported",
    "ref_model_available",
)
SPEC_CHECKS = (
    "stage_gate",
    "reference_reinit",
    "candidate_init",
    "runtime_contract",
    "weight_loading",
    "data_pipeline",
    "spec_runtime",
)
NUMERIC_CHECKS = (
    "stage_gate",
    "forward_logits",
    "forward_hidden_states",
    "forward_loss",
    "method_loss",
    "log_probs",
    "ref_log_probs",
    "token_logprobs",
    "advantages",
    "returns",
    "gradient_loss",
    "gradient_norm",
    "lr_schedule",
    "gradient_accumulation",
    "numeric_runtime",
)
BEHAVIORAL_CHECKS = (
    "stage_gate",
    "loss_curve",
    "generation",
    "behavior_runtime",
)
CHECK_REGISTRY = {
    "preflight": PREFLIGHT_CHECKS,
    "spec": SPEC_CHECKS,
    "numeric": NUMERIC_CHECKS,
    "behavioral": BEHAVIORAL_CHECKS,
}


class CheckStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    HARD_FAIL = "hard_fail"
    NOT_SUPPORTED = "not_supported"
    BLOCKED = "blocked"


class StageStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    BLOCKED = "blocked"


@dataclass
class CheckRecord:
    stage: str
    name: str
    status: CheckStatus
    failure_kind: Optional[FailureReason] = None
    metrics: Optional[dict[str, Any]] = None
    error: Optional[str] = None
    detail: dict[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.status in (CheckStatus.FAIL, CheckStatus.HARD_FAIL)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "name": self.name,
            "status": self.status.value,
            "failure_kind": self.failure_kind.value if self.failure_kind else None,
            "metrics": self.metrics,
            "error": self.error,
            "detail": self.detail,
        }


@dataclass
class StageSummary:
    name: str
    status: StageStatus
    records: list[CheckRecord]

    @property
    def passed(self) -> bool:
        return self.status is StageStatus.PASS

    def record(self, name: str) -> Optional[CheckRecord]:
        for rec in self.records:
            if rec.name == name:
                return rec
        return None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "records": [rec.to_json_dict() for rec in self.records],
        }


@dataclass
class VerificationReport:
    overall: str
    candidate_missing: bool
    contract: EquivalenceContract
    stages: dict[str, StageSummary]
    timings: dict[str, float]
    schema_version: str = REPORT_SCHEMA_VERSION
    engine_version: str = ENGINE_VERSION

    @property
    def passed(self) -> bool:
        return self.overall == "pass"

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "engine_version": self.engine_version,
            "overall": self.overall,
            "candidate_missing": self.candidate_missing,
            "contract": self.contract.to_json_dict(),
            "stages": {name: stage.to_json_dict() for name, stage in self.stages.items()},
            "timings": self.timings,
        }


def applicable_artifact_checks(contract: EquivalenceContract) -> frozenset[str]:
    """Artifact-bearing comparison names this contract will emit. By
    construction this must equal the union of probe expectations; a dedicated
    test holds the two views together."""
    config = contract.config
    names = {
        "lr_schedule",
        "weight_loading",
        "data_pipeline",
        "forward_logits",
        "forward_loss",
        "method_loss",
        "gradient_accumulation",
        "gradient_loss",
        "gradient_norm",
        "loss_curve",
    }
    if config.compare_hidden_states:
        names.add("forward_hidden_states")
    if config.method is Method.DPO:
        names |= {"log_probs", "ref_log_probs"}
    if config.method is Method.PPO:
        names |= {"token_logprobs", "advantages", "returns"}
    if config.method is Method.SFT and config.max_new_tokens > 0:
        names.add("generation")
    return frozenset(names)


# -- artifact pulls ---------------------------------------------------------


def _array_of(value: Any) -> Union[np.ndarray, Bottom]:
    if is_bottom(value):
        return value
    if isinstance(value, StringListArtifact):
        return Bottom(
            FailureReason.SCHEMA_MISMATCH,
            f"artifact '{value.name}' is a string list, not a tensor",
        )
    if isinstance(value, TensorArtifact):
        return value.array.astype(np.float64)
    return np.asarray(value, dtype=np.float64)


def _int_array_of(value: Any) -> Union[np.ndarray, Bottom]:
    arr = _array_of(value)
    if is_bottom(arr):
        return arr
    return np.rint(arr).astype(np.int64)


def _scalar_of(value: Any) -> Union[float, Bottom]:
    arr = _array_of(value)
    if is_bottom(arr):
        return arr
    if arr.size != 1:
        return Bottom(
            FailureReason.SCHEMA_MISMATCH, f"expected a scalar, got shape {list(arr.shape)}"
        )
    return float(arr.reshape(-1)[0])


def _string_of(value: Any) -> Union[str, Bottom]:
    if is_bottom(value):
        return value
    if isinstance(value, StringListArtifact) and value.values:
        return value.values[0]
    return Bottom(FailureReason.SCHEMA_MISMATCH, "expected a non-empty string list artifact")


@dataclass
class _BatchView:
    input_ids: Union[np.ndarray, Bottom]
    labels: Union[np.ndarray, Bottom]
    attention_mask: Union[np.ndarray, Bottom]


def _batch_view(batch_set: Union[ArtifactSet, Bottom]) -> _BatchView:
    if is_bottom(batch_set):
        return _BatchView(batch_set, batch_set, batch_set)
    return _BatchView(
        input_ids=_int_array_of(batch_set.get("batch/input_ids")),
        labels=_int_array_of(batch_set.get("batch/labels")),
        attention_mask=_int_array_of(batch_set.get("batch/attention_mask")),
    )


def _first_bottom(*values: Any) -> Optional[Bottom]:
    for value in values:
        if is_bottom(value):
            return value
    return None


# -- derivations ------------------------------------------------------------


def _schedule_from_init(
    init_set: Union[ArtifactSet, Bottom], horizon: int
) -> Union[np.ndarray, Bottom]:
    if is_bottom(init_set):
        return init_set
    base = _scalar_of(init_set.get("train_args/base_lr"))
    warmup = _scalar_of(init_set.get("train_args/warmup_steps"))
    total = _scalar_of(init_set.get("train_args/total_steps"))
    kind = _string_of(init_set.get("train_args/schedule"))
    fault = _first_bottom(base, warmup, total, kind)
    if fault is not None:
        return fault
    try:
        return lr_schedule(
            base_lr=base,
            total_steps=int(round(total)),
            kind=kind,
            warmup_steps=int(round(warmup)),
            horizon=horizon,
        )
    except (ValueError, KeyError) as exc:
        return Bottom(FailureReason.SCHEMA_MISMATCH, f"cannot derive lr schedule: {exc}")


@dataclass
class _DpoHyperparams:
    beta: float
    loss_type: DpoLossType
    label_smoothing: float
    simpo_margin: float


def _dpo_hyperparams(init_set: Union[ArtifactSet, Bottom]) -> Union[_DpoHyperparams, Bottom]:
    if is_bottom(init_set):
        return init_set
    beta = _scalar_of(init_set.get("train_args/dpo_beta"))
    loss_type = _string_of(init_set.get("train_args/dpo_loss_type"))
    smoothing = _scalar_of(init_set.get("train_args/dpo_label_smoothing"))
    margin = _scalar_of(init_set.get("train_args/dpo_simpo_margin"))
    fault = _first_bottom(beta, loss_type, smoothing, margin)
    if fault is not None:
        return fault
    try:
        return _DpoHyperparams(beta, DpoLossType(loss_type), smoothing, margin)
    except ValueError:
        return Bottom(FailureReason.SCHEMA_MISMATCH, f"unknown DPO loss type {loss_type!r}")


def detect_ppo_value_mode(
    forward_set: Union[ArtifactSet, Bottom], params_set: Union[ArtifactSet, Bottom]
) -> PpoValueMode:
    """Total derivation of where PPO values come from; MISSING is an answer,
    not an error."""
    if is_bottom(forward_set):
        return PpoValueMode.MISSING
    if isinstance(forward_set.get("values"), TensorArtifact):
        return PpoValueMode.OUTPUT_FIELD
    has_hidden = any(name.startswith("hidden_states/") for name in forward_set.names())
    has_head = not is_bottom(params_set) and isinstance(
        params_set.get("params/v_head"), TensorArtifact
    )
    if has_hidden and has_head:
        return PpoValueMode.HIDDEN_STATES_VALUE_HEAD
    return PpoValueMode.MISSING


def _last_hidden(forward_set: ArtifactSet) -> Union[np.ndarray, Bottom]:
    indices = []
    for name in forward_set.names():
        if name.startswith("hidden_states/"):
            tail = name.split("/", 1)[1]
            if tail.isdigit():
                indices.append(int(tail))
    if not indices:
        return Bottom(FailureReason.MISSING_ARTIFACT, "no hidden states in forward response")
    return _array_of(forward_set.get(f"hidden_states/{max(indices)}"))


def _ppo_values(
    forward_set: ArtifactSet,
    params_set: Union[ArtifactSet, Bottom],
    mode: Optional[PpoValueMode],
) -> Union[np.ndarray, Bottom]:
    if mode is PpoValueMode.OUTPUT_FIELD:
        return _array_of(forward_set.get("values", error=PPO_VALUES_REQUIRED))
    if mode is PpoValueMode.HIDDEN_STATES_VALUE_HEAD:
        hidden = _last_hidden(forward_set)
        if is_bottom(hidden):
            return hidden
        if is_bottom(params_set):
            return params_set
        head = _array_of(
            params_set.get("params/v_head", error="value head parameter 'params/v_head' not exported")
        )
        if is_bottom(head):
            return head
        try:
            return hidden @ head
        except ValueError as exc:
            return Bottom(FailureReason.SCHEMA_MISMATCH, f"cannot apply value head: {exc}")
    return Bottom(FailureReason.MISSING_ARTIFACT, PPO_VALUES_REQUIRED)


def _dpo_method_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    ref_logps: Union[np.ndarray, Bottom],
    hp: Union[_DpoHyperparams, Bottom],
) -> Union[float, Bottom]:
    if is_bottom(hp):
        return hp
    if hp.loss_type is DpoLossType.SIGMOID and is_bottom(ref_logps):
        return ref_logps
    policy = sequence_logprobs(logits, labels)
    counts = shifted_valid_mask(labels).sum(axis=1).astype(np.float64)
    try:
        return dpo_loss(
            DpoInputs(
                policy_logps=policy,
                ref_logps=None if is_bottom(ref_logps) else ref_logps,
                beta=hp.beta,
                loss_type=hp.loss_type,
                label_smoothing=hp.label_smoothing,
                simpo_margin=hp.simpo_margin,
                token_counts=None if hp.loss_type is DpoLossType.SIGMOID else counts,
            )
        )
    except KernelError as exc:
        return Bottom(FailureReason.SCHEMA_MISMATCH, str(exc))


@dataclass
class _SideDerived:
    """Engine-side reconstructions from one runtime's own artifacts."""

    values: dict[str, Any] = field(default_factory=dict)
    micro_invariant: Optional[str] = None
    grad_norms: dict[str, float] = field(default_factory=dict)


def _truncated(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    # Malformed ranks pass through untouched; the kernels reject them with a
    # KernelError the caller converts to a schema Bottom.
    if logits.ndim != 3 or labels.ndim != 2 or mask.ndim != 2:
        return logits, labels, mask
    t = min(logits.shape[1], labels.shape[1], mask.shape[1])
    return logits[:, :t, :], labels[:, :t], mask[:, :t]


def _split_indices(method: Method, rows: int) -> tuple[list[int], list[int]]:
    if method is Method.DPO:
        pairs = rows // 2
        left = list(range(0, pairs // 2)) + list(range(pairs, pairs + pairs // 2))
        right = list(range(pairs // 2, pairs)) + list(range(pairs + pairs // 2, rows))
        return left, right
    half = rows // 2
    return list(range(half)), list(range(half, rows))


def _derive_numeric_side(
    contract: EquivalenceContract,
    batch: _BatchView,
    init_set: Union[ArtifactSet, Bottom],
    forward_set: ArtifactSet,
    params_set: Union[ArtifactSet, Bottom],
    source_ref_logps: Union[np.ndarray, Bottom, None],
    tol: ToleranceProfile,
) -> _SideDerived:
    method = contract.method
    out = _SideDerived()
    vals = out.values
    vals["forward_logits"] = forward_set.get("logits")

    logits = _array_of(forward_set.get("logits"))
    labels, mask = batch.labels, batch.attention_mask
    inputs_fault = _first_bottom(logits, labels, mask)

    def guarded(fn):
        if inputs_fault is not None:
            return inputs_fault
        try:
            return fn()
        except KernelError as exc:
            return Bottom(FailureReason.SCHEMA_MISMATCH, str(exc))

    if method is Method.SFT:
        vals["method_loss"] = guarded(lambda: shifted_causal_ce(logits, labels))
    elif method is Method.DPO:
        hp = _dpo_hyperparams(init_set)
        ref_logits = _array_of(forward_set.get("ref_logits", error=DPO_REF_LOGPS_REQUIRED))
        vals["log_probs"] = guarded(lambda: sequence_logprobs(logits, labels))
        vals["ref_log_probs"] = (
            ref_logits
            if is_bottom(ref_logits)
            else guarded(lambda: sequence_logprobs(ref_logits, labels))
        )
        src = source_ref_logps if source_ref_logps is not None else vals["ref_log_probs"]
        vals["method_loss"] = guarded(lambda: _dpo_method_loss(logits, labels, src, hp))
    else:
        values = _ppo_values(forward_set, params_set, contract.ppo_value_mode)

        def masked_token_logprobs() -> np.ndarray:
            z, y, m = _truncated(logits, labels, mask)
            return token_logprobs(z, y) * ppo_valid_mask(y, m)

        vals["token_logprobs"] = guarded(masked_token_logprobs)
        if is_bottom(values):
            vals["method_loss"] = values
            vals["advantages"] = values
            vals["returns"] = values
        else:
            parts = guarded(lambda: ppo_method_loss(logits, values, labels, mask))
            if is_bottom(parts):
                vals["method_loss"] = parts
                vals["advantages"] = parts
                vals["returns"] = parts
            else:
                vals["method_loss"] = parts.method_loss
                vals["advantages"] = parts.advantages
                vals["returns"] = parts.returns

    if contract.grad_accum_supported:
        vals["gradient_accumulation"] = _grad_accum_vector(
            contract, batch, init_set, forward_set, params_set, source_ref_logps, out, tol
        )
    return out


def _grad_accum_vector(
    contract: EquivalenceContract,
    batch: _BatchView,
    init_set: Union[ArtifactSet, Bottom],
    forward_set: ArtifactSet,
    params_set: Union[ArtifactSet, Bottom],
    source_ref_logps: Union[np.ndarray, Bottom, None],
    derived: _SideDerived,
    tol: ToleranceProfile,
) -> Union[np.ndarray, Bottom]:
    """Two-point view of micro-batch averaging: the full-batch loss next to
    the mean of the two half-batch losses, all engine-derived."""
    method = contract.method
    full = derived.values.get("method_loss")
    if is_bottom(full) or full is None:
        return full if is_bottom(full) else Bottom(
            FailureReason.MISSING_ARTIFACT, "no full-batch loss to split"
        )
    logits = _array_of(forward_set.get("logits"))
    labels, mask = batch.labels, batch.attention_mask
    fault = _first_bottom(logits, labels, mask)
    if fault is not None:
        return fault
    rows = labels.shape[0]
    left_idx, right_idx = _split_indices(method, rows)

    def half_loss(idx: list[int]) -> Union[float, Bottom]:
        z, y, m = logits[idx], labels[idx], mask[idx]
        try:
            if method is Method.SFT:
                return shifted_causal_ce(z, y)
            if method is Method.DPO:
                hp = _dpo_hyperparams(init_set)
                src = source_ref_logps
                if is_bottom(src) or src is None:
                    return src if is_bottom(src) else Bottom(
                        FailureReason.MISSING_ARTIFACT, DPO_REF_LOGPS_REQUIRED
                    )
                return _dpo_method_loss(z, y, src[idx], hp)
            values = _ppo_values(forward_set, params_set, contract.ppo_value_mode)
            if is_bottom(values):
                return values
            zt, vt, yt, mt = z, values[idx], y, m
            return ppo_method_loss(zt, vt, yt, mt).method_loss
        except KernelError as exc:
            return Bottom(FailureReason.SCHEMA_MISMATCH, str(exc))

    left = half_loss(left_idx)
    right = half_loss(right_idx)
    fault = _first_bottom(left, right)
    if fault is not None:
        return fault
    derived.micro_invariant = micro_batch_invariant(full, left, right, tol).status.value
    return np.asarray([full, (left + right) / 2.0], dtype=np.float64)


def _grad_norm_value(gradient_set: ArtifactSet, derived: _SideDerived) -> Union[float, Bottom]:
    names = sorted(gradient_set.with_prefix("grads/"))
    if not names:
        return Bottom(FailureReason.MISSING_ARTIFACT, "no gradients in gradient response")
    arrays = []
    for name in names:
        arr = _array_of(gradient_set.get(name))
        if is_bottom(arr):
            return arr
        derived.grad_norms[name] = float(np.sqrt((arr.astype(np.float64) ** 2).sum()))
        arrays.append(arr)
    return global_grad_norm(arrays)


# -- record assembly --------------------------------------------------------


def _verdict_record(
    stage: str,
    name: str,
    ref_value: Any,
    cand_value: Any,
    tol: ToleranceProfile,
    logits: bool = False,
    detail: Optional[dict[str, Any]] = None,
) -> CheckRecord:
    compare = compare_logits if logits else compare_arrays
    verdict = compare(ref_value, cand_value, tol)
    return _record_from_verdict(stage, name, verdict, ref_value, cand_value, detail)


def _record_from_verdict(
    stage: str,
    name: str,
    verdict: CompareVerdict,
    ref_value: Any,
    cand_value: Any,
    detail: Optional[dict[str, Any]] = None,
) -> CheckRecord:
    status = {
        VerdictStatus.PASS: CheckStatus.PASS,
        VerdictStatus.FAIL: CheckStatus.FAIL,
        VerdictStatus.HARD_FAIL: CheckStatus.HARD_FAIL,
    }[verdict.status]
    kind: Optional[FailureReason] = None
    if status is CheckStatus.HARD_FAIL:
        if is_bottom(cand_value):
            kind = cand_value.reason
        elif is_bottom(ref_value):
            kind = ref_value.reason
        elif verdict.metrics is not None and not verdict.metrics.shape_match:
            kind = FailureReason.SCHEMA_MISMATCH
        else:
            kind = FailureReason.NONFINITE
    return CheckRecord(
        stage=stage,
        name=name,
        status=status,
        failure_kind=kind,
        metrics=verdict.metrics.to_json_dict() if verdict.metrics else None,
        error=verdict.reason or None,
        detail=detail or {},
    )


def _fail(
    stage: str,
    name: str,
    error: str,
    kind: Optional[FailureReason] = None,
    hard: bool = False,
    detail: Optional[dict[str, Any]] = None,
) -> CheckRecord:
    return CheckRecord(
        stage=stage,
        name=name,
        status=CheckStatus.HARD_FAIL if hard else CheckStatus.FAIL,
        failure_kind=kind,
        error=error,
        detail=detail or {},
    )


def _ok(stage: str, name: str, detail: Optional[dict[str, Any]] = None) -> CheckRecord:
    return CheckRecord(stage=stage, name=name, status=CheckStatus.PASS, detail=detail or {})


def _not_supported(stage: str, name: str, reason: str) -> CheckRecord:
    return CheckRecord(
        stage=stage, name=name, status=CheckStatus.NOT_SUPPORTED, error=reason
    )


def _summarize(name: str, records: Sequence[CheckRecord]) -> StageSummary:
    records = list(records)
    if any(rec.status is CheckStatus.BLOCKED for rec in records):
        status = StageStatus.BLOCKED
    elif any(rec.failed for rec in records):
        status = StageStatus.FAIL
    else:
        status = StageStatus.PASS
    return StageSummary(name=name, status=status, records=records)


def _gated(stage: str, predecessor: str) -> StageSummary:
    record = CheckRecord(
        stage=stage,
        name="stage_gate",
        status=CheckStatus.BLOCKED,
        error=f"blocked: {predecessor} stage did not pass",
    )
    return StageSummary(name=stage, status=StageStatus.BLOCKED, records=[record])


def _probe(contract: EquivalenceContract, kind: ProbeKind) -> ProbeSpec:
    for probe in contract.probes:
        if probe.kind is kind:
            return probe
    raise KeyError(kind)


def _replay_probes(contract: EquivalenceContract) -> list[ProbeSpec]:
    return [p for p in contract.probes if p.kind is ProbeKind.REPLAY_STEP]


# -- preflight ---------------------------------------------------------------


@dataclass
class _PreflightData:
    contract: EquivalenceContract
    value_mode: Optional[PpoValueMode] = None
    ref_init: Union[ArtifactSet, Bottom, None] = None
    ref_params: Union[ArtifactSet, Bottom, None] = None


def run_preflight(
    ref: RuntimeHandle, contract: EquivalenceContract
) -> tuple[StageSummary, _PreflightData]:
    """Probe the reference alone and decide whether a comparison is even
    well-posed. Every record here concerns the reference or the derivation,
    never the candidate."""
    stage = "preflight"
    config = contract.config
    data = _PreflightData(contract=contract)

    try:
        ref.spawn()
    except UnresolvableRuntime as exc:
        error = f"reference runtime unresolvable: {exc}"
        records = [
            _fail(stage, name, error, kind=FailureReason.INIT_ERROR)
            for name in PREFLIGHT_CHECKS
        ]
        return _summarize(stage, records), data

    init_set = ref.run_probe(_probe(contract, ProbeKind.INIT).request(config))
    params_set = ref.run_probe(_probe(contract, ProbeKind.EXPORT_PARAMS).request(config))
    batch_set = ref.run_probe(_probe(contract, ProbeKind.COLLATE_BATCH).request(config))
    forward_set = ref.run_probe(_probe(contract, ProbeKind.FORWARD).request(config))
    gradient_set = ref.run_probe(_probe(contract, ProbeKind.GRADIENT).request(config))
    generate_set: Union[ArtifactSet, Bottom, None] = None
    wants_generation = config.method is Method.SFT and config.max_new_tokens > 0
    ref_can_generate = "generate" in ref.capabilities
    if wants_generation and ref_can_generate:
        generate_set = ref.run_probe(_probe(contract, ProbeKind.GENERATE).request(config))

    data.ref_init = init_set
    data.ref_params = params_set

    records: list[CheckRecord] = []

    def probe_fail(name: str, bottom: Bottom) -> CheckRecord:
        return _fail(stage, name, f"[reference] {bottom.error}", kind=bottom.reason)

    # params_nonempty
    if is_bottom(params_set):
        records.append(probe_fail("params_nonempty", params_set))
    else:
        params = params_set.with_prefix("params/")
        if params:
            records.append(_ok(stage, "params_nonempty", {"count": len(params)}))
        else:
            records.append(
                _fail(
                    stage,
                    "params_nonempty",
                    "reference exported no parameters",
                    kind=FailureReason.MISSING_ARTIFACT,
                )
            )

    # batch_nonempty
    batch = _batch_view(batch_set)
    if is_bottom(batch_set):
        records.append(probe_fail("batch_nonempty", batch_set))
    else:
        fault = _first_bottom(batch.input_ids, batch.labels, batch.attention_mask)
        if fault is not None:
            records.append(
                _fail(stage, "batch_nonempty", fault.error, kind=fault.reason)
            )
        elif batch.input_ids.ndim != 2 or batch.input_ids.size == 0:
            records.append(
                _fail(
                    stage,
                    "batch_nonempty",
                    f"collated input_ids shape {list(np.shape(batch.input_ids))} is unusable",
                    kind=FailureReason.SCHEMA_MISMATCH,
                )
            )
        else:
            rows, positions = batch.input_ids.shape
            records.append(_ok(stage, "batch_nonempty", {"rows": rows, "positions": positions}))

    # forward_finite
    if is_bottom(forward_set):
        records.append(probe_fail("forward_finite", forward_set))
    else:
        fault = _first_bottom(
            forward_set.get("logits"),
            *(v for k, v in forward_set.values.items() if k != "logits"),
        )
        if fault is not None:
            records.append(_fail(stage, "forward_finite", fault.error, kind=fault.reason))
        else:
            records.append(_ok(stage, "forward_finite"))

    # contract_derivable
    if config.method is Method.PPO:
        if is_bottom(forward_set):
            records.append(probe_fail("contract_derivable", forward_set))
        else:
            mode = detect_ppo_value_mode(forward_set, params_set)
            data.value_mode = mode
            data.contract = contract.with_value_mode(mode)
            records.append(
                _ok(stage, "contract_derivable", {"ppo_value_mode": mode.value})
            )
    else:
        records.append(_ok(stage, "contract_derivable", {"ppo_value_mode": None}))

    # grads_finite
    if is_bottom(gradient_set):
        records.append(probe_fail("grads_finite", gradient_set))
    else:
        fault = _first_bottom(gradient_set.get("loss"), *gradient_set.values.values())
        grads = gradient_set.with_prefix("grads/")
        if fault is not None:
            records.append(_fail(stage, "grads_finite", fault.error, kind=fault.reason))
        elif not grads:
            records.append(
                _fail(
                    stage,
                    "grads_finite",
                    "gradient response carries no grads/* artifacts",
                    kind=FailureReason.MISSING_ARTIFACT,
                )
            )
        else:
            records.append(_ok(stage, "grads_finite", {"count": len(grads)}))

    # lr_finite
    horizon = max(SCHEDULE_HORIZON, config.replay_horizon)
    schedule = _schedule_from_init(init_set, horizon)
    if is_bottom(schedule):
        records.append(_fail(stage, "lr_finite", schedule.error, kind=schedule.reason))
    else:
        records.append(
            _ok(stage, "lr_finite", {"learning_rates": [float(x) for x in schedule]})
        )

    # method_loss_finite
    resolved = data.contract
    if is_bottom(forward_set):
        records.append(probe_fail("method_loss_finite", forward_set))
    else:
        derived = _derive_numeric_side(
            resolved, batch, init_set, forward_set, params_set, None, resolved.tolerance
        )
        loss = derived.values.get("method_loss")
        if is_bottom(loss):
            records.append(
                _fail(stage, "method_loss_finite", loss.error, kind=loss.reason)
            )
        elif loss is None or not np.isfinite(loss):
            records.append(
                _fail(
                    stage,
                    "method_loss_finite",
                    f"reference method loss is not finite: {loss}",
                    kind=FailureReason.NONFINITE,
                )
            )
        else:
            records.append(_ok(stage, "method_loss_finite", {"method_loss": float(loss)}))

    # generation_supported
    if not wants_generation:
        reason = (
            "generation comparison applies to supervised fine-tuning runs only"
            if config.method is not Method.SFT
            else "generation disabled (max_new_tokens=0)"
        )
        records.append(_not_supported(stage, "generation_supported", reason))
    elif not ref_can_generate:
        records.append(
            _not_supported(
                stage,
                "generation_supported",
                "reference runtime does not declare the generate capability",
            )
        )
    elif is_bottom(generate_set):
        records.append(probe_fail("generation_supported", generate_set))
    else:
        ids = generate_set.get("generated_ids")
        if is_bottom(ids):
            records.append(
                _fail(stage, "generation_supported", ids.error, kind=ids.reason)
            )
        else:
            records.append(_ok(stage, "generation_supported"))

    # ref_model_available
    if config.method is not Method.DPO:
        records.append(
            _not_supported(
                stage,
                "ref_model_available",
                "frozen reference models are part of preference training only",
            )
        )
    elif is_bottom(forward_set):
        records.append(probe_fail("ref_model_available", forward_set))
    else:
        ref_logits = forward_set.get("ref_logits", error=DPO_REF_LOGPS_REQUIRED)
        if is_bottom(ref_logits):
            records.append(
                _fail(stage, "ref_model_available", ref_logits.error, kind=ref_logits.reason)
            )
        else:
            records.append(_ok(stage, "ref_model_available"))

    return _summarize(stage, records), data


# -- spec stage ---------------------------------------------------------------


@dataclass
class _SpecData:
    ref_init: Union[ArtifactSet, Bottom, None] = None
    ref_params: Union[ArtifactSet, Bottom, None] = None
    ref_batch: Union[ArtifactSet, Bottom, None] = None
    cand_init: Union[ArtifactSet, Bottom, None] = None
    cand_params: Union[ArtifactSet, Bottom, None] = None
    cand_batch: Union[ArtifactSet, Bottom, None] = None


def run_spec(
    ref: RuntimeHandle,
    cand: RuntimeHandle,
    contract: EquivalenceContract,
    pre: _PreflightData,
) -> tuple[StageSummary, _SpecData, bool]:
    stage = "spec"
    config = contract.config
    tol = contract.tolerance
    records: list[CheckRecord] = []
    data = _SpecData()
    candidate_missing = False

    init_req = _probe(contract, ProbeKind.INIT).request(config)
    export_req = _probe(contract, ProbeKind.EXPORT_PARAMS).request(config)
    collate_req = _probe(contract, ProbeKind.COLLATE_BATCH).request(config)

    ref.reinitialize()
    data.ref_init = ref.run_probe(init_req)
    data.ref_params = ref.run_probe(export_req)
    data.ref_batch = ref.run_probe(collate_req)

    ref_fault = _first_bottom(data.ref_init, data.ref_params, data.ref_batch)
    if ref_fault is not None:
        records.append(
            _fail(
                stage,
                "reference_reinit",
                f"[reference] {ref_fault.error}",
                kind=ref_fault.reason,
            )
        )
        return _summarize(stage, records), data, candidate_missing

    differing = _reinit_differences(pre, data)
    if differing:
        records.append(
            _fail(
                stage,
                "reference_reinit",
                "reference reinitialization is not deterministic",
                detail={"differing": differing},
            )
        )
    else:
        records.append(_ok(stage, "reference_reinit"))

    try:
        spawn_fault = cand.spawn()
    except UnresolvableRuntime as exc:
        candidate_missing = True
        records.append(
            _fail(stage, "candidate_init", str(exc), kind=FailureReason.INIT_ERROR)
        )
        return _summarize(stage, records), data, candidate_missing

    if spawn_fault is not None:
        records.append(
            _fail(stage, "candidate_init", spawn_fault.error, kind=spawn_fault.reason)
        )
        return _summarize(stage, records), data, candidate_missing

    data.cand_init = cand.run_probe(init_req)
    if is_bottom(data.cand_init):
        records.append(
            _fail(
                stage,
                "candidate_init",
                data.cand_init.error,
                kind=data.cand_init.reason,
            )
        )
        return _summarize(stage, records), data, candidate_missing
    records.append(
        _ok(
            stage,
            "candidate_init",
            {"capabilities": list(cand.capabilities)},
        )
    )

    declared = cand.declared_method
    if declared != config.method.value:
        records.append(
            _fail(
                stage,
                "runtime_contract",
                f"candidate declares method {declared!r}, run is configured for "
                f"{config.method.value!r}",
                kind=FailureReason.SCHEMA_MISMATCH,
            )
        )
    else:
        records.append(
            _ok(stage, "runtime_contract", {"declared_method": declared})
        )

    data.cand_params = cand.run_probe(export_req)
    data.cand_batch = cand.run_probe(collate_req)
    cand_fault = _first_bottom(data.cand_params, data.cand_batch)

    if not is_bottom(data.cand_params):
        records.append(_weight_loading_record(stage, data.ref_params, data.cand_params, tol))
    if not is_bottom(data.cand_batch):
        records.append(_data_pipeline_record(stage, data.ref_batch, data.cand_batch, tol))

    if cand_fault is not None:
        records.append(
            _fail(
                stage,
                "spec_runtime",
                f"[candidate] {cand_fault.error}",
                kind=cand_fault.reason,
                hard=True,
            )
        )
    else:
        records.append(_ok(stage, "spec_runtime"))
    return _summarize(stage, records), data, candidate_missing


def _reinit_differences(pre: _PreflightData, data: _SpecData) -> list[str]:
    differing: list[str] = []
    for before, after in ((pre.ref_init, data.ref_init), (pre.ref_params, data.ref_params)):
        if is_bottom(before) or before is None or is_bottom(after):
            differing.append("(preflight artifacts unavailable)")
            return differing
        names = sorted(set(before.values) | set(after.values))
        for name in names:
            if before.values.get(name) != after.values.get(name):
                differing.append(name)
    return differing


def _weight_loading_record(
    stage: str,
    ref_params: ArtifactSet,
    cand_params: ArtifactSet,
    tol: ToleranceProfile,
) -> CheckRecord:
    name = "weight_loading"
    ref_names = set(ref_params.with_prefix("params/"))
    cand_names = set(cand_params.with_prefix("params/"))
    missing = sorted(ref_names - cand_names)
    extra = sorted(cand_names - ref_names)
    if missing or extra:
        bits = []
        if missing:
            bits.append(f"missing from candidate: {missing}")
        if extra:
            bits.append(f"unexpected in candidate: {extra}")
        return _fail(
            stage,
            name,
            "parameter trees disagree; " + "; ".join(bits),
            kind=FailureReason.SCHEMA_MISMATCH,
            hard=True,
            detail={"missing": missing, "extra": extra},
        )
    worst: Optional[CheckRecord] = None
    for pname in sorted(ref_names):
        rec = _verdict_record(
            stage, name, ref_params.get(pname), cand_params.get(pname), tol
        )
        if rec.status is not CheckStatus.PASS:
            rec.detail["parameter"] = pname
            return rec
        if worst is None or (
            rec.metrics
            and worst.metrics
            and rec.metrics["max_abs_err"] > worst.metrics["max_abs_err"]
        ):
            worst = rec
            worst.detail["parameter"] = pname
    return worst if worst is not None else _ok(stage, name, {"count": 0})


def _data_pipeline_record(
    stage: str,
    ref_batch: ArtifactSet,
    cand_batch: ArtifactSet,
    tol: ToleranceProfile,
) -> CheckRecord:
    name = "data_pipeline"
    ref_names = set(ref_batch.with_prefix("batch/"))
    cand_names = set(cand_batch.with_prefix("batch/"))
    missing = sorted(ref_names - cand_names)
    extra = sorted(cand_names - ref_names)
    if missing or extra:
        bits = []
        if missing:
            bits.append(f"missing from candidate: {missing}")
        if extra:
            bits.append(f"unexpected in candidate: {extra}")
        return _fail(
            stage,
            name,
            "collated batches disagree on keys; " + "; ".join(bits),
            kind=FailureReason.SCHEMA_MISMATCH,
            hard=True,
            detail={"missing": missing, "extra": extra},
        )
    for bname in sorted(ref_names):
        ref_art = ref_batch.get(bname)
        cand_art = cand_batch.get(bname)
        if isinstance(ref_art, TensorArtifact) and isinstance(cand_art, TensorArtifact):
            if ref_art.dtype != cand_art.dtype:
                return _fail(
                    stage,
                    name,
                    f"batch artifact '{bname}' declares dtype "
                    f"{cand_art.dtype.value}, reference uses {ref_art.dtype.value}",
                    kind=FailureReason.SCHEMA_MISMATCH,
                    hard=True,
                    detail={"artifact": bname},
                )
        rec = _verdict_record(stage, name, ref_art, cand_art, tol)
        if rec.status is not CheckStatus.PASS:
            rec.detail["artifact"] = bname
            return rec
    return _ok(stage, name, {"keys": sorted(ref_names)})


# -- numeric stage ------------------------------------------------------------


@dataclass
class _NumericData:
    ref_forward: Union[ArtifactSet, Bottom, None] = None
    ref_gradient: Union[ArtifactSet, Bottom, None] = None
    cand_forward: Union[ArtifactSet, Bottom, None] = None
    cand_gradient: Union[ArtifactSet, Bottom, None] = None
    ref_schedule: Optional[np.ndarray] = None


_FORWARD_DEPENDENT = frozenset(
    {
        "forward_logits",
        "forward_hidden_states",
        "forward_loss",
        "method_loss",
        "log_probs",
        "ref_log_probs",
        "token_logprobs",
        "advantages",
        "returns",
        "gradient_accumulation",
    }
)
_GRADIENT_DEPENDENT = frozenset({"gradient_loss", "gradient_norm"})


def run_numeric(
    ref: RuntimeHandle,
    cand: RuntimeHandle,
    contract: EquivalenceContract,
    spec_data: _SpecData,
) -> tuple[StageSummary, _NumericData]:
    stage = "numeric"
    config = contract.config
    tol = contract.tolerance
    data = _NumericData()

    forward_req = _probe(contract, ProbeKind.FORWARD).request(config)
    gradient_req = _probe(contract, ProbeKind.GRADIENT).request(config)
    data.ref_forward = ref.run_probe(forward_req)
    data.ref_gradient = ref.run_probe(gradient_req)
    data.cand_forward = cand.run_probe(forward_req)
    data.cand_gradient = cand.run_probe(gradient_req)

    runtime_fault: Optional[tuple[str, Bottom]] = None
    for side, value in (
        ("reference", data.ref_forward),
        ("reference", data.ref_gradient),
        ("candidate", data.cand_forward),
        ("candidate", data.cand_gradient),
    ):
        if is_bottom(value):
            runtime_fault = (side, value)
            break

    skip: set[str] = set()
    if is_bottom(data.ref_forward) or is_bottom(data.cand_forward):
        skip |= _FORWARD_DEPENDENT
    if is_bottom(data.ref_gradient) or is_bottom(data.cand_gradient):
        skip |= _GRADIENT_DEPENDENT

    applicable = applicable_artifact_checks(contract)
    ref_batch = _batch_view(spec_data.ref_batch)
    cand_batch = _batch_view(spec_data.cand_batch)

    ref_derived = cand_derived = None
    if not (_FORWARD_DEPENDENT & skip):
        source_ref_logps: Union[np.ndarray, Bottom, None] = None
        if config.method is Method.DPO:
            ref_logits = _array_of(
                data.ref_forward.get("ref_logits", error=DPO_REF_LOGPS_REQUIRED)
            )
            if is_bottom(ref_logits) or is_bottom(ref_batch.labels):
                source_ref_logps = _first_bottom(ref_logits, ref_batch.labels)
            else:
                source_ref_logps = sequence_logprobs(ref_logits, ref_batch.labels)
        ref_derived = _derive_numeric_side(
            contract,
            ref_batch,
            spec_data.ref_init,
            data.ref_forward,
            spec_data.ref_params,
            source_ref_logps,
            tol,
        )
        cand_derived = _derive_numeric_side(
            contract,
            cand_batch,
            spec_data.cand_init,
            data.cand_forward,
            spec_data.cand_params,
            source_ref_logps,
            tol,
        )

    horizon = max(SCHEDULE_HORIZON, config.replay_horizon)
    ref_schedule = _schedule_from_init(spec_data.ref_init, horizon)
    cand_schedule = _schedule_from_init(spec_data.cand_init, horizon)
    if not is_bottom(ref_schedule):
        data.ref_schedule = ref_schedule

    records: list[CheckRecord] = []
    for name in NUMERIC_CHECKS:
        if name in ("stage_gate", "numeric_runtime"):
            continue
        if name not in applicable or name in skip:
            continue
        records.append(
            _numeric_record(
                stage,
                name,
                contract,
                data,
                ref_derived,
                cand_derived,
                ref_schedule,
                cand_schedule,
                tol,
            )
        )

    if runtime_fault is not None:
        side, bottom = runtime_fault
        records.append(
            _fail(
                stage,
                "numeric_runtime",
                f"[{side}] {bottom.error}",
                kind=bottom.reason,
                hard=True,
            )
        )
    else:
        records.append(_ok(stage, "numeric_runtime"))
    return _summarize(stage, records), data


def _numeric_record(
    stage: str,
    name: str,
    contract: EquivalenceContract,
    data: _NumericData,
    ref_derived: Optional[_SideDerived],
    cand_derived: Optional[_SideDerived],
    ref_schedule: Any,
    cand_schedule: Any,
    tol: ToleranceProfile,
) -> CheckRecord:
    if name == "lr_schedule":
        detail = {}
        if not is_bottom(ref_schedule):
            detail["reference"] = [float(x) for x in ref_schedule[:SCHEDULE_HORIZON]]
        if not is_bottom(cand_schedule):
            detail["candidate"] = [float(x) for x in cand_schedule[:SCHEDULE_HORIZON]]
        ref_val = ref_schedule if is_bottom(ref_schedule) else ref_schedule[:SCHEDULE_HORIZON]
        cand_val = (
            cand_schedule if is_bottom(cand_schedule) else cand_schedule[:SCHEDULE_HORIZON]
        )
        return _verdict_record(stage, name, ref_val, cand_val, tol, detail=detail)

    if name == "forward_hidden_states":
        return _hidden_states_record(stage, data.ref_forward, data.cand_forward, tol)

    if name == "forward_loss":
        ref_has = "loss" in data.ref_forward.values
        cand_has = "loss" in data.cand_forward.values
        if not ref_has and not cand_has:
            return _not_supported(stage, name, "neither runtime reports a forward loss")
        if ref_has != cand_has:
            side = "reference" if ref_has else "candidate"
            return _not_supported(
                stage, name, f"only the {side} runtime reports a forward loss"
            )
        return _verdict_record(
            stage,
            name,
            _scalar_of(data.ref_forward.get("loss")),
            _scalar_of(data.cand_forward.get("loss")),
            tol,
        )

    if name == "gradient_loss":
        return _verdict_record(
            stage,
            name,
            _scalar_of(data.ref_gradient.get("loss")),
            _scalar_of(data.cand_gradient.get("loss")),
            tol,
        )

    if name == "gradient_norm":
        ref_side = _SideDerived()
        cand_side = _SideDerived()
        ref_norm = _grad_norm_value(data.ref_gradient, ref_side)
        cand_norm = _grad_norm_value(data.cand_gradient, cand_side)
        return _verdict_record(
            stage,
            name,
            ref_norm,
            cand_norm,
            tol,
            detail={
                "per_param": {
                    "reference": ref_side.grad_norms,
                    "candidate": cand_side.grad_norms,
                }
            },
        )

    if name == "gradient_accumulation":
        if not contract.grad_accum_supported:
            noun = "preference pairs" if contract.method is Method.DPO else "rows"
            return _not_supported(
                stage,
                name,
                f"batch_size {contract.config.batch_size} cannot split {noun} "
                "into two micro-batches",
            )
        detail = {}
        if cand_derived is not None and cand_derived.micro_invariant is not None:
            detail["micro_batch_invariant"] = cand_derived.micro_invariant
        return _verdict_record(
            stage,
            name,
            ref_derived.values.get(name),
            cand_derived.values.get(name),
            tol,
            detail=detail,
        )

    if name == "forward_logits":
        return _verdict_record(
            stage,
            name,
            ref_derived.values.get(name),
            cand_derived.values.get(name),
            tol,
            logits=True,
        )

    # engine-derived scalar or vector comparisons
    return _verdict_record(
        stage,
        name,
        ref_derived.values.get(name),
        cand_derived.values.get(name),
        tol,
    )


def _hidden_states_record(
    stage: str,
    ref_forward: ArtifactSet,
    cand_forward: ArtifactSet,
    tol: ToleranceProfile,
) -> CheckRecord:
    name = "forward_hidden_states"

    def layers(s: ArtifactSet) -> list[str]:
        out = [n for n in s.names() if n.startswith("hidden_states/")]
        return sorted(out, key=lambda n: int(n.split("/", 1)[1]) if n.split("/", 1)[1].isdigit() else 0)

    ref_layers = layers(ref_forward)
    cand_layers = layers(cand_forward)
    if not ref_layers and not cand_layers:
        return _not_supported(stage, name, "neither runtime reports hidden states")
    if len(ref_layers) != len(cand_layers):
        return _fail(
            stage,
            name,
            f"hidden state layer counts disagree: reference {len(ref_layers)}, "
            f"candidate {len(cand_layers)}",
            kind=FailureReason.SCHEMA_MISMATCH,
            hard=True,
            detail={"reference_layers": ref_layers, "candidate_layers": cand_layers},
        )
    worst: Optional[CheckRecord] = None
    for ref_name, cand_name in zip(ref_layers, cand_layers):
        rec = _verdict_record(
            stage, name, ref_forward.get(ref_name), cand_forward.get(cand_name), tol
        )
        rec.detail["layer"] = ref_name
        if rec.status is not CheckStatus.PASS:
            return rec
        if worst is None or (
            rec.metrics
            and worst.metrics
            and rec.metrics["max_abs_err"] > worst.metrics["max_abs_err"]
        ):
            worst = rec
    return worst if worst is not None else _ok(stage, name)


# -- behavioral stage ---------------------------------------------------------


def run_behavioral(
    ref: RuntimeHandle,
    cand: RuntimeHandle,
    contract: EquivalenceContract,
    numeric_data: _NumericData,
) -> StageSummary:
    stage = "behavioral"
    config = contract.config
    tol = contract.tolerance
    records: list[CheckRecord] = []
    horizon = config.replay_horizon

    if numeric_data.ref_schedule is None:
        records.append(
            _fail(
                stage,
                "loss_curve",
                "no learning-rate schedule available to drive replay",
                kind=FailureReason.SCHEMA_MISMATCH,
                hard=True,
            )
        )
        return _summarize(stage, records)

    lrs = [float(x) for x in numeric_data.ref_schedule[:horizon]]
    replay_probes = _replay_probes(contract)

    def run_side(handle: RuntimeHandle) -> list[Union[ArtifactSet, Bottom]]:
        out = []
        for step, probe in enumerate(replay_probes):
            out.append(handle.run_probe(probe.request(config, lr=lrs[step])))
        return out

    ref_steps = run_side(ref)
    cand_steps = run_side(cand)

    runtime_fault: Optional[tuple[str, Bottom]] = None
    for side, steps in (("reference", ref_steps), ("candidate", cand_steps)):
        bottom = _first_bottom(*steps)
        if bottom is not None:
            runtime_fault = (side, bottom)
            break

    wants_generation = config.method is Method.SFT and config.max_new_tokens > 0
    generation_possible = wants_generation and runtime_fault is None

    if runtime_fault is None:
        records.append(
            _loss_curve_record(stage, contract, lrs, ref_steps, cand_steps, numeric_data, tol)
        )

    if generation_possible:
        rec, gen_fault = _generation_record(stage, ref, cand, contract, tol)
        if gen_fault is not None:
            runtime_fault = gen_fault
        elif rec is not None:
            records.append(rec)

    if runtime_fault is not None:
        side, bottom = runtime_fault
        records.append(
            _fail(
                stage,
                "behavior_runtime",
                f"[{side}] {bottom.error}",
                kind=bottom.reason,
                hard=True,
            )
        )
    else:
        records.append(_ok(stage, "behavior_runtime"))
    return _summarize(stage, records)


def _loss_curve_record(
    stage: str,
    contract: EquivalenceContract,
    lrs: list[float],
    ref_steps: list[Union[ArtifactSet, Bottom]],
    cand_steps: list[Union[ArtifactSet, Bottom]],
    numeric_data: _NumericData,
    tol: ToleranceProfile,
) -> CheckRecord:
    name = "loss_curve"

    def side_values(steps: list[Union[ArtifactSet, Bottom]], key: str):
        out = []
        for step_set in steps:
            value = _scalar_of(step_set.get(key)) if not is_bottom(step_set) else step_set
            if is_bottom(value):
                return value
            out.append(value)
        return out

    ref_losses = side_values(ref_steps, "loss")
    cand_losses = side_values(cand_steps, "loss")

    def trajectory(steps):
        out = []
        for i, step_set in enumerate(steps):
            entry: dict[str, Any] = {"step": i, "lr": lrs[i]}
            loss = _scalar_of(step_set.get("loss")) if not is_bottom(step_set) else step_set
            norm = (
                _scalar_of(step_set.get("grad_norm")) if not is_bottom(step_set) else step_set
            )
            entry["loss"] = None if is_bottom(loss) else loss
            entry["grad_norm"] = None if is_bottom(norm) else norm
            if is_bottom(loss):
                entry["error"] = loss.error
            out.append(entry)
        return out

    detail: dict[str, Any] = {
        "reference": trajectory(ref_steps),
        "candidate": trajectory(cand_steps),
    }

    # First replayed step recomputes the same loss the gradient probe saw;
    # record whether the runtimes agree with themselves bit for bit.
    def step0_match(steps, gradient_set):
        if is_bottom(gradient_set) or gradient_set is None or not steps:
            return None
        if is_bottom(steps[0]):
            return None
        replay0 = _scalar_of(steps[0].get("loss"))
        grad_loss = _scalar_of(gradient_set.get("loss"))
        if is_bottom(replay0) or is_bottom(grad_loss):
            return None
        return replay0 == grad_loss

    detail["step0_matches_gradient_loss"] = {
        "reference": step0_match(ref_steps, numeric_data.ref_gradient),
        "candidate": step0_match(cand_steps, numeric_data.cand_gradient),
    }

    ref_value = ref_losses if is_bottom(ref_losses) else np.asarray(ref_losses)
    cand_value = cand_losses if is_bottom(cand_losses) else np.asarray(cand_losses)
    return _verdict_record(stage, name, ref_value, cand_value, tol, detail=detail)


def _generation_record(
    stage: str,
    ref: RuntimeHandle,
    cand: RuntimeHandle,
    contract: EquivalenceContract,
    tol: ToleranceProfile,
) -> tuple[Optional[CheckRecord], Optional[tuple[str, Bottom]]]:
    name = "generation"
    ref_can = "generate" in ref.capabilities
    cand_can = "generate" in cand.capabilities
    if not ref_can:
        return (
            _ok(
                stage,
                name,
                {
                    "reason": "reference runtime does not expose generation; "
                    "nothing to hold the candidate to"
                },
            ),
            None,
        )
    if not cand_can:
        return (
            _fail(
                stage,
                name,
                "candidate runtime does not expose generation but the reference does",
            ),
            None,
        )
    request = _probe(contract, ProbeKind.GENERATE).request(contract.config)
    ref_gen = ref.run_probe(request)
    if is_bottom(ref_gen):
        return None, ("reference", ref_gen)
    cand_gen = cand.run_probe(request)
    if is_bottom(cand_gen):
        return None, ("candidate", cand_gen)
    return (
        _verdict_record(
            stage,
            name,
            ref_gen.get("generated_ids"),
            cand_gen.get("generated_ids"),
            tol,
        ),
        None,
    )


# -- orchestration ------------------------------------------------------------


def verify(
    config: BoundedConfig,
    reference: Mapping[str, Any],
    candidate: Mapping[str, Any],
    frame_cap: int = DEFAULT_FRAME_CAP,
) -> VerificationReport:
    """Run the full pipeline and assemble a report. Total: every failure mode
    of either runtime ends in a report, not an exception."""
    start = time.perf_counter()
    timings: dict[str, float] = {}
    contract = build_contract(config)
    ref = RuntimeHandle(reference, "reference", config.probe_timeout, frame_cap)
    cand = RuntimeHandle(candidate, "candidate", config.probe_timeout, frame_cap)
    candidate_missing = False
    stages: dict[str, StageSummary] = {}

    try:
        t0 = time.perf_counter()
        pre_summary, pre_data = run_preflight(ref, contract)
        timings["preflight"] = time.perf_counter() - t0
        stages["preflight"] = pre_summary
        contract = pre_data.contract

        if pre_summary.passed:
            t0 = time.perf_counter()
            spec_summary, spec_data, candidate_missing = run_spec(
                ref, cand, contract, pre_data
            )
            timings["spec"] = time.perf_counter() - t0
        else:
            spec_summary = _gated("spec", "preflight")
            spec_data = _SpecData()
        stages["spec"] = spec_summary

        if spec_summary.passed:
            t0 = time.perf_counter()
            numeric_summary, numeric_data = run_numeric(ref, cand, contract, spec_data)
            timings["numeric"] = time.perf_counter() - t0
        else:
            numeric_summary = _gated("numeric", "spec")
            numeric_data = _NumericData()
        stages["numeric"] = numeric_summary

        if numeric_summary.passed:
            t0 = time.perf_counter()
            behavioral_summary = run_behavioral(ref, cand, contract, numeric_data)
            timings["behavioral"] = time.perf_counter() - t0
        else:
            behavioral_summary = _gated("behavioral", "numeric")
        stages["behavioral"] = behavioral_summary
    finally:
        shutdown_req = {"op": "shutdown"}
        for handle in (ref, cand):
            try:
                handle.run_probe(shutdown_req)
            except Exception:  # noqa: BLE001 - teardown must not mask the report
                log.exception("shutdown probe raised for %s runtime", handle.role)
            handle.close()

    overall = (
        "pass"
        if all(stages[s].passed for s in ("spec", "numeric", "behavioral"))
        else "fail"
    )
    timings["total"] = time.perf_counter() - start
    return VerificationReport(
        overall=overall,
        candidate_missing=candidate_missing,
        contract=contract,
        stages=stages,
        timings=timings,
    )


__all__ = [
    "BEHAVIORAL_CHECKS",
    "CHECK_REGISTRY",
    "CheckRecord",
    "CheckStatus",
    "NUMERIC_CHECKS",
    "PREFLIGHT_CHECKS",
    "REPORT_SCHEMA_VERSION",
    "SPEC_CHECKS",
    "StageStatus",
    "StageSummary",
    "VerificationReport",
    "applicable_artifact_checks",
    "detect_ppo_value_mode",
    "run_behavioral",
    "run_numeric",
    "run_preflight",
    "run_spec",
    "verify",
]
