"""Bounded equivalence contracts.

A contract pins down everything one verification run is allowed to observe:
the run configuration, the ordered probe list, the artifact names each probe
is expected to support, and the tolerance profile used by every comparison.
Contracts are frozen; nothing mutates them once a run has started.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional


class ConfigError(ValueError):
    """Raised when a run configuration or contract request is unusable."""


class Method(str, enum.Enum):
    SFT = "sft"
    DPO = "dpo"
    PPO = "ppo"


class PrecisionProfile(str, enum.Enum):
    FP16_COMPARE = "fp16_compare"
    BF16_COMPARE = "bf16_compare"


class PpoValueMode(str, enum.Enum):
    OUTPUT_FIELD = "output_field"
    HIDDEN_STATES_VALUE_HEAD = "hidden_states_value_head"
    MISSING = "missing"


class ProbeKind(str, enum.Enum):
    INIT = "init"
    EXPORT_PARAMS = "export_params"
    COLLATE_BATCH = "collate_batch"
    FORWARD = "forward"
    GRADIENT = "gradient"
    REPLAY_STEP = "replay_step"
    GENERATE = "generate"
    SHUTDOWN = "shutdown"


@dataclass(frozen=True)
class ToleranceProfile:
    """Comparison thresholds; pass predicates are <= for errors, >= for cosine."""

    max_abs: float
    max_rel: float
    cos_floor: float
    kl_ceiling: float

    def to_json_dict(self) -> dict[str, float]:
        return {
            "max_abs": self.max_abs,
            "max_rel": self.max_rel,
            "cos_floor": self.cos_floor,
            "kl_ceiling": self.kl_ceiling,
        }


FP16_COMPARE = ToleranceProfile(max_abs=2e-2, max_rel=2e-2, cos_floor=0.995, kl_ceiling=2e-2)
BF16_COMPARE = ToleranceProfile(max_abs=4e-2, max_rel=4e-2, cos_floor=0.99, kl_ceiling=4e-2)

_PROFILES: dict[PrecisionProfile, ToleranceProfile] = {
    PrecisionProfile.FP16_COMPARE: FP16_COMPARE,
    PrecisionProfile.BF16_COMPARE: BF16_COMPARE,
}

DEFAULT_PROBE_TIMEOUT = 120.0


def tolerance_for(profile: PrecisionProfile) -> ToleranceProfile:
    return _PROFILES[profile]


@dataclass(frozen=True)
class BoundedConfig:
    """Reported evaluation profile by default: one example, batch 1, two replay
    steps, eight generated tokens, bf16 comparison thresholds."""

    method: Method
    seed: int = 42
    num_examples: int = 1
    batch_size: int = 1
    replay_horizon: int = 2
    max_new_tokens: int = 8
    compare_hidden_states: bool = False
    precision_profile: PrecisionProfile = PrecisionProfile.BF16_COMPARE
    probe_timeout: float = DEFAULT_PROBE_TIMEOUT

    def __post_init__(self) -> None:
        if not isinstance(self.method, Method):
            object.__setattr__(self, "method", Method(self.method))
        if not isinstance(self.precision_profile, PrecisionProfile):
            object.__setattr__(self, "precision_profile", PrecisionProfile(self.precision_profile))
        _require(self.seed >= 0, "seed must be a non-negative integer")
        _require(self.num_examples >= 1, "num_examples must be >= 1")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.replay_horizon >= 1, "replay_horizon must be >= 1")
        _require(self.max_new_tokens >= 0, "max_new_tokens must be >= 0")
        _require(
            math.isfinite(self.probe_timeout) and self.probe_timeout > 0,
            "probe_timeout must be a positive finite number of seconds",
        )

    @property
    def tolerance(self) -> ToleranceProfile:
        return tolerance_for(self.precision_profile)

    @property
    def batch_rows(self) -> int:
        """Row count of the collated batch; DPO packs chosen then rejected."""
        return 2 * self.batch_size if self.method is Method.DPO else self.batch_size

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "seed": self.seed,
            "num_examples": self.num_examples,
            "batch_size": self.batch_size,
            "replay_horizon": self.replay_horizon,
            "max_new_tokens": self.max_new_tokens,
            "compare_hidden_states": self.compare_hidden_states,
            "precision_profile": self.precision_profile.value,
            "probe_timeout": self.probe_timeout,
        }


def config_from_dict(raw: Mapping[str, Any]) -> BoundedConfig:
    """Build a config from parsed JSON, rejecting unknown keys."""
    known = {
        "method", "seed", "num_examples", "batch_size", "replay_horizon",
        "max_new_tokens", "compare_hidden_states", "precision_profile", "probe_timeout",
    }
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    if "method" not in raw:
        raise ConfigError("config requires a 'method' field")
    try:
        return BoundedConfig(**dict(raw))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class ForwardFlags:
    use_cache: bool = False
    output_hidden_states: bool = False
    drop_labels: bool = False

    def to_json_dict(self) -> dict[str, bool]:
        return {
            "use_cache": self.use_cache,
            "output_hidden_states": self.output_hidden_states,
            "drop_labels": self.drop_labels,
        }


@dataclass(frozen=True)
class ProbeSpec:
    """One probe in a contract: a wire request plus the comparison names its
    response is expected to serve."""

    kind: ProbeKind
    expects: frozenset[str] = frozenset()
    flags: Optional[ForwardFlags] = None
    step: Optional[int] = None
    max_new_tokens: Optional[int] = None

    def request(self, config: BoundedConfig, lr: Optional[float] = None) -> dict[str, Any]:
        if self.kind is ProbeKind.INIT:
            return {"op": "init", "config": config.to_json_dict()}
        if self.kind is ProbeKind.FORWARD:
            flags = self.flags or ForwardFlags()
            return {"op": "forward", "flags": flags.to_json_dict()}
        if self.kind is ProbeKind.REPLAY_STEP:
            if lr is None:
                raise ConfigError("replay_step request requires a learning rate")
            return {"op": "replay_step", "step": self.step or 0, "lr": lr}
        if self.kind is ProbeKind.GENERATE:
            return {"op": "generate", "max_new_tokens": self.max_new_tokens or 0}
        return {"op": self.kind.value}

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value, "expects": sorted(self.expects)}
        if self.flags is not None:
            out["flags"] = self.flags.to_json_dict()
        if self.step is not None:
            out["step"] = self.step
        if self.max_new_tokens is not None:
            out["max_new_tokens"] = self.max_new_tokens
        return out


@dataclass(frozen=True)
class EquivalenceContract:
    """Frozen observation plan for one verification run."""

    config: BoundedConfig
    probes: tuple[ProbeSpec, ...]
    tolerance: ToleranceProfile
    ppo_value_mode: Optional[PpoValueMode] = None

    @property
    def method(self) -> Method:
        return self.config.method

    @property
    def grad_accum_supported(self) -> bool:
        """Micro-batch averaging needs two halves; DPO additionally needs the
        chosen/rejected pairing to survive the split."""
        if self.config.method is Method.DPO:
            return self.config.batch_size >= 4
        return self.config.batch_size >= 2

    def expected_artifact_names(self) -> frozenset[str]:
        names: set[str] = set()
        for probe in self.probes:
            names |= probe.expects
        return frozenset(names)

    def with_value_mode(self, mode: PpoValueMode) -> "EquivalenceContract":
        if self.config.method is not Method.PPO:
            return self
        return build_contract(self.config, ppo_value_mode=mode)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_json_dict(),
            "tolerance": self.tolerance.to_json_dict(),
            "ppo_value_mode": self.ppo_value_mode.value if self.ppo_value_mode else None,
            "probes": [probe.to_json_dict() for probe in self.probes],
        }


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _forward_expects(config: BoundedConfig) -> frozenset[str]:
    names = {"forward_logits", "forward_loss", "method_loss", "gradient_accumulation"}
    if config.compare_hidden_states:
        names.add("forward_hidden_states")
    if config.method is Method.DPO:
        names |= {"log_probs", "ref_log_probs"}
    if config.method is Method.PPO:
        names |= {"token_logprobs", "advantages", "returns"}
    return frozenset(names)


def _forward_flags(config: BoundedConfig, ppo_value_mode: Optional[PpoValueMode]) -> ForwardFlags:
    if config.method is Method.PPO:
        # Before the value mode is known the forward probe asks for hidden
        # states so the derivation can see what the runtime offers.
        want_hidden = (
            config.compare_hidden_states
            or ppo_value_mode is None
            or ppo_value_mode is PpoValueMode.HIDDEN_STATES_VALUE_HEAD
        )
        return ForwardFlags(use_cache=False, output_hidden_states=want_hidden, drop_labels=True)
    return ForwardFlags(
        use_cache=False,
        output_hidden_states=config.compare_hidden_states,
        drop_labels=False,
    )


def build_contract(
    config: BoundedConfig, ppo_value_mode: Optional[PpoValueMode] = None
) -> EquivalenceContract:
    """Derive the probe plan for a config.

    Probe order is fixed: init, export_params, collate_batch, forward,
    gradient, one replay_step per horizon step, generate (SFT only, when
    enabled), shutdown.
    """
    if ppo_value_mode is not None and config.method is not Method.PPO:
        raise ConfigError("ppo_value_mode only applies to PPO contracts")
    probes: list[ProbeSpec] = [
        ProbeSpec(ProbeKind.INIT, expects=frozenset({"lr_schedule"})),
        ProbeSpec(ProbeKind.EXPORT_PARAMS, expects=frozenset({"weight_loading"})),
        ProbeSpec(ProbeKind.COLLATE_BATCH, expects=frozenset({"data_pipeline"})),
        ProbeSpec(
            ProbeKind.FORWARD,
            expects=_forward_expects(config),
            flags=_forward_flags(config, ppo_value_mode),
        ),
        ProbeSpec(ProbeKind.GRADIENT, expects=frozenset({"gradient_loss", "gradient_norm"})),
    ]
    for step in range(config.replay_horizon):
        probes.append(
            ProbeSpec(ProbeKind.REPLAY_STEP, expects=frozenset({"loss_curve"}), step=step)
        )
    if config.method is Method.SFT and config.max_new_tokens > 0:
        probes.append(
            ProbeSpec(
                ProbeKind.GENERATE,
                expects=frozenset({"generation"}),
                max_new_tokens=config.max_new_tokens,
            )
        )
    probes.append(ProbeSpec(ProbeKind.SHUTDOWN))
    return EquivalenceContract(
        config=config,
        probes=tuple(probes),
        tolerance=config.tolerance,
        ppo_value_mode=ppo_value_mode,
    )


__all__ = [
    "BF16_COMPARE",
    "BoundedConfig",
    "ConfigError",
    "DEFAULT_PROBE_TIMEOUT",
    "EquivalenceContract",
    "FP16_COMPARE",
    "ForwardFlags",
    "Method",
    "PpoValueMode",
    "PrecisionProfile",
    "ProbeKind",
    "ProbeSpec",
    "ToleranceProfile",
    "build_contract",
    "config_from_dict",
    "tolerance_for",
]
