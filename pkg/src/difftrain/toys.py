"""Seeded toy runtimes and fault injectors.

Each toy is a tiny bigram language model (vocab 11, width 4, six positions)
whose parameters and data come from a linear-congruential generator, so two
toys built from the same seed agree bitwise. The model is linear end to end,
which keeps the analytic gradients short enough to check against finite
differences.

Toys speak the probe vocabulary directly: ``handle(request)`` returns named
artifacts or raises ToyFault. The same object backs the in-process runner and
the stdio server.
"""
from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from . import kernels
from .codec import DtypeTag, FailureReason, StringListArtifact, TensorArtifact
from .contract import BoundedConfig, ConfigError, Method, config_from_dict

TOY_VOCAB = 11
TOY_DIM = 4
TOY_SEQ = 6

_LCG_A = 1664525
_LCG_C = 1013904223
_LCG_M = 2 ** 32
_SEED_MIX = 2654435761

# Large steps on purpose: a skipped optimizer update has to move the loss far
# enough past the comparison thresholds to be unmistakable.
TRAIN_ARGS = {
    Method.SFT: {"base_lr": 4.0, "warmup_steps": 2, "total_steps": 10, "schedule": "linear"},
    Method.DPO: {"base_lr": 40.0, "warmup_steps": 2, "total_steps": 10, "schedule": "linear"},
    Method.PPO: {"base_lr": 0.7, "warmup_steps": 2, "total_steps": 10, "schedule": "linear"},
}
DPO_BETA = 0.1
DPO_LABEL_SMOOTHING = 0.0
DPO_SIMPO_MARGIN = 0.0


class ToyFault(Exception):
    """Structured runtime failure: a reason plus the verbatim error string."""

    def __init__(self, reason: FailureReason, message: str):
        super().__init__(message)
        self.reason = reason
        self.message = message


class Lcg:
    """Numerical-recipes LCG; the whole toy world is derived from it."""

    def __init__(self, state: int):
        self.state = state % _LCG_M

    def next_u32(self) -> int:
        self.state = (_LCG_A * self.state + _LCG_C) % _LCG_M
        return self.state

    def uniform(self) -> float:
        return self.next_u32() / _LCG_M

    def signed_uniform(self, scale: float) -> float:
        return (2.0 * self.uniform() - 1.0) * scale


def param_stream(seed: int) -> Lcg:
    return Lcg((seed * _SEED_MIX + 1) % _LCG_M)

def data_stream(seed: int) -> Lcg:
    return Lcg((seed * _SEED_MIX + 2) % _LCG_M)


@dataclass
class ToyBatch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    position_ids: np.ndarray


def make_batch(seed: int, rows: int, seq_len: int = TOY_SEQ) -> ToyBatch:
    """Deterministic batch: random tokens, full attention except the final
    position of odd rows, and exactly one ignored label per row placed so that
    every row keeps the same number of supervised positions."""
    rng = data_stream(seed)
    input_ids = np.zeros((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        for t in range(seq_len):
            input_ids[b, t] = rng.next_u32() % TOY_VOCAB
    attention_mask = np.ones((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        if b % 2 == 1:
            attention_mask[b, seq_len - 1] = 0
    labels = np.zeros((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        ign = 1 + rng.next_u32() % (seq_len - 1)
        for t in range(seq_len):
            labels[b, t] = rng.next_u32() % TOY_VOCAB
        labels[b, ign] = kernels.IGNORE_INDEX
    position_ids = np.tile(np.arange(seq_len, dtype=np.int64), (rows, 1))
    return ToyBatch(input_ids, attention_mask, labels, position_ids)


class ToyModel:
    """logits[b,t] = embed[input_ids[b,t]] @ out; values[b,t] = x @ v_head."""

    def __init__(self, seed: int):
        rng = param_stream(seed)
        self.embed = np.array(
            [[rng.signed_uniform(1.0) for _ in range(TOY_DIM)] for _ in range(TOY_VOCAB)]
        )
        self.out = np.array(
            [[rng.signed_uniform(0.5) for _ in range(TOY_VOCAB)] for _ in range(TOY_DIM)]
        )
        self.v_head = np.array([rng.signed_uniform(0.5) for _ in range(TOY_DIM)])

    def params(self) -> dict[str, np.ndarray]:
        return {"embed": self.embed, "out": self.out, "v_head": self.v_head}

    def hidden(self, input_ids: np.ndarray) -> np.ndarray:
        return self.embed[input_ids]

    def logits(self, input_ids: np.ndarray) -> np.ndarray:
        return self.hidden(input_ids) @ self.out

    def values(self, input_ids: np.ndarray) -> np.ndarray:
        return self.hidden(input_ids) @ self.v_head

    def apply_grads(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            getattr(self, name)[...] -= lr * grad

    def _backprop(
        self,
        input_ids: np.ndarray,
        dz: np.ndarray,
        dx_extra: Optional[np.ndarray] = None,
    ) -> dict[str, np.ndarray]:
        x = self.hidden(input_ids)
        d_out = np.einsum("btd,btv->dv", x, dz)
        dx = np.einsum("btv,dv->btd", dz, self.out)
        if dx_extra is not None:
            dx = dx + dx_extra
        d_embed = np.zeros_like(self.embed)
        np.add.at(d_embed, input_ids, dx)
        return {"embed": d_embed, "out": d_out}

    def sft_loss_and_grads(self, batch: ToyBatch) -> tuple[float, dict[str, np.ndarray]]:
        z = self.logits(batch.input_ids)
        valid = kernels.shifted_valid_mask(batch.labels)
        count = int(valid.sum())
        if count == 0:
            raise ToyFault(FailureReason.RUNTIME_ERROR, "no supervised tokens")
        loss = kernels.shifted_causal_ce(z, batch.labels)
        probs = np.exp(kernels.log_softmax(z))
        dz = np.zeros_like(z)
        b_idx, t_idx = np.nonzero(valid)
        targets = batch.labels[b_idx, t_idx + 1]
        dz[b_idx, t_idx] = probs[b_idx, t_idx] / count
        dz[b_idx, t_idx, targets] -= 1.0 / count
        return loss, self._backprop(batch.input_ids, dz)

    def dpo_loss_and_grads(
        self, batch: ToyBatch, ref_model: "ToyModel", beta: float, eps: float
    ) -> tuple[float, dict[str, np.ndarray]]:
        z = self.logits(batch.input_ids)
        g = kernels.sequence_logprobs(z, batch.labels)
        ref_g = kernels.sequence_logprobs(ref_model.logits(batch.input_ids), batch.labels)
        loss = kernels.dpo_loss(
            kernels.DpoInputs(
                policy_logps=g, ref_logps=ref_g, beta=beta, label_smoothing=eps
            )
        )
        half = g.size // 2
        h = (g[:half] - g[half:]) - (ref_g[:half] - ref_g[half:])
        sig = 1.0 / (1.0 + np.exp(-beta * h))
        dh = beta * (eps * sig - (1.0 - eps) * (1.0 - sig)) / half
        dg = np.concatenate([dh, -dh])
        probs = np.exp(kernels.log_softmax(z))
        valid = kernels.shifted_valid_mask(batch.labels)
        dz = np.zeros_like(z)
        b_idx, t_idx = np.nonzero(valid)
        targets = batch.labels[b_idx, t_idx + 1]
        # d(sum of target logprobs)/dz = onehot - softmax at supervised slots.
        dz[b_idx, t_idx] = -probs[b_idx, t_idx] * dg[b_idx, None]
        dz[b_idx, t_idx, targets] += dg[b_idx]
        return float(loss), self._backprop(batch.input_ids, dz)

    def ppo_loss_and_grads(self, batch: ToyBatch) -> tuple[float, dict[str, np.ndarray]]:
        z = self.logits(batch.input_ids)
        v = self.values(batch.input_ids)
        parts = kernels.ppo_method_loss(z, v, batch.labels, batch.attention_mask)
        valid = parts.valid_mask
        count = int(valid.sum())
        dtlp = np.where(valid, -parts.advantages / count, 0.0)
        probs = np.exp(kernels.log_softmax(z))
        dz = np.zeros_like(z)
        b_idx, t_idx = np.nonzero(valid)
        targets = batch.labels[b_idx, t_idx + 1]
        dz[b_idx, t_idx] = -probs[b_idx, t_idx] * dtlp[b_idx, t_idx, None]
        dz[b_idx, t_idx, targets] += dtlp[b_idx, t_idx]
        dv = np.where(valid, 2.0 * (v - parts.returns) / count, 0.0)
        dx_extra = dv[:, :, None] * self.v_head[None, None, :]
        x = self.hidden(batch.input_ids)
        grads = self._backprop(batch.input_ids, dz, dx_extra=dx_extra)
        grads["v_head"] = np.einsum("btd,bt->d", x, dv)
        return parts.method_loss, grads

    def generate_greedy(self, input_ids: np.ndarray, max_new_tokens: int) -> np.ndarray:
        rows = input_ids.shape[0]
        out = np.zeros((rows, max_new_tokens), dtype=np.int64)
        for b in range(rows):
            cur = int(input_ids[b, -1])
            for i in range(max_new_tokens):
                cur = int(np.argmax(self.embed[cur] @ self.out))
                out[b, i] = cur
        return out


def _tensor(name: str, arr: np.ndarray, dtype: DtypeTag) -> TensorArtifact:
    return TensorArtifact(name=name, shape=tuple(np.asarray(arr).shape), dtype=dtype, data=np.asarray(arr))


def _scalar(name: str, value: float, dtype: DtypeTag = DtypeTag.F32) -> TensorArtifact:
    return TensorArtifact(name=name, shape=(), dtype=dtype, data=np.asarray([value]))


class ToyRuntime:
    """Probe-serving toy. One instance is one runtime lifecycle."""

    def __init__(
        self,
        method: Method,
        seed_override: Optional[int] = None,
        value_mode: str = "output",
        generate_capability: Optional[bool] = None,
    ):
        self.method = Method(method)
        self.seed_override = seed_override
        self.value_mode = value_mode
        if generate_capability is None:
            generate_capability = self.method is Method.SFT
        self.generate_capability = generate_capability
        self.model: Optional[ToyModel] = None
        self.ref_model: Optional[ToyModel] = None
        self.batch: Optional[ToyBatch] = None
        self.config: Optional[BoundedConfig] = None
        self.cancel_event: Optional[threading.Event] = None

    def handshake(self) -> dict[str, Any]:
        caps = []
        if self.generate_capability:
            caps.append("generate")
        if self.method is Method.DPO:
            caps.append("ref_model")
        if self.method is Method.PPO:
            caps.append("values" if self.value_mode == "output" else "hidden_states")
        return {"protocol": 1, "method": self.method.value, "capabilities": caps}

    # -- probe handlers -----------------------------------------------------

    def handle(self, request: dict[str, Any]) -> dict[str, Any]:
        op = request.get("op")
        handlers: dict[str, Callable[[dict[str, Any]], dict[str, Any]]] = {
            "init": self._init,
            "export_params": self._export_params,
            "collate_batch": self._collate_batch,
            "forward": self._forward,
            "gradient": self._gradient,
            "replay_step": self._replay_step,
            "generate": self._generate,
            "shutdown": self._shutdown,
        }
        if op not in handlers:
            raise ToyFault(FailureReason.PROTOCOL_ERROR, f"unknown op {op!r}")
        if op not in ("init", "shutdown") and self.model is None:
            raise ToyFault(FailureReason.RUNTIME_ERROR, "runtime not initialized")
        return handlers[op](request)

    def _init(self, request: dict[str, Any]) -> dict[str, Any]:
        raw = request.get("config")
        if not isinstance(raw, dict):
            raise ToyFault(FailureReason.INIT_ERROR, "init request carried no config")
        try:
            config = config_from_dict(raw)
        except ConfigError as exc:
            raise ToyFault(FailureReason.INIT_ERROR, f"bad config: {exc}") from exc
        if config.method is not self.method:
            raise ToyFault(
                FailureReason.INIT_ERROR,
                f"runtime implements {self.method.value}, config asked for {config.method.value}",
            )
        seed = self.seed_override if self.seed_override is not None else config.seed
        self.config = config
        self.model = ToyModel(seed)
        if self.method is Method.DPO:
            self.ref_model = ToyModel(seed + 1)
        self.batch = make_batch(seed, config.batch_rows)
        args = TRAIN_ARGS[self.method]
        out = {
            "train_args/base_lr": _scalar("train_args/base_lr", args["base_lr"]),
            "train_args/warmup_steps": _scalar(
                "train_args/warmup_steps", args["warmup_steps"], DtypeTag.I64
            ),
            "train_args/total_steps": _scalar(
                "train_args/total_steps", args["total_steps"], DtypeTag.I64
            ),
            "train_args/schedule": StringListArtifact(
                "train_args/schedule", (args["schedule"],)
            ),
        }
        if self.method is Method.DPO:
            out["train_args/dpo_beta"] = _scalar("train_args/dpo_beta", DPO_BETA)
            out["train_args/dpo_loss_type"] = StringListArtifact(
                "train_args/dpo_loss_type", ("sigmoid",)
            )
            out["train_args/dpo_label_smoothing"] = _scalar(
                "train_args/dpo_label_smoothing", DPO_LABEL_SMOOTHING
            )
            out["train_args/dpo_simpo_margin"] = _scalar(
                "train_args/dpo_simpo_margin", DPO_SIMPO_MARGIN
            )
        return out

    def _export_params(self, request: dict[str, Any]) -> dict[str, Any]:
        out = {}
        params = dict(self.model.params())
        if self.method is not Method.PPO:
            params.pop("v_head")
        for name, arr in params.items():
            out[f"params/{name}"] = _tensor(f"params/{name}", arr, DtypeTag.F32)
        return out

    def _collate_batch(self, request: dict[str, Any]) -> dict[str, Any]:
        b = self.batch
        return {
            "batch/input_ids": _tensor("batch/input_ids", b.input_ids, DtypeTag.I64),
            "batch/attention_mask": _tensor(
                "batch/attention_mask", b.attention_mask, DtypeTag.I64
            ),
            "batch/labels": _tensor("batch/labels", b.labels, DtypeTag.I64),
            "batch/position_ids": _tensor("batch/position_ids", b.position_ids, DtypeTag.I64),
        }

    def _forward(self, request: dict[str, Any]) -> dict[str, Any]:
        flags = request.get("flags") or {}
        drop_labels = bool(flags.get("drop_labels"))
        want_hidden = bool(flags.get("output_hidden_states"))
        z = self.model.logits(self.batch.input_ids)
        out = {"logits": _tensor("logits", z, DtypeTag.F32)}
        if not drop_labels:
            loss = kernels.shifted_causal_ce(z, self.batch.labels)
            out["loss"] = _scalar("loss", loss)
        if self.method is Method.DPO and self.ref_model is not None:
            ref_z = self.ref_model.logits(self.batch.input_ids)
            out["ref_logits"] = _tensor("ref_logits", ref_z, DtypeTag.F32)
        if self.method is Method.PPO and self.value_mode == "output":
            out["values"] = _tensor(
                "values", self.model.values(self.batch.input_ids), DtypeTag.F32
            )
        if want_hidden:
            x = self.model.hidden(self.batch.input_ids)
            out["hidden_states/0"] = _tensor("hidden_states/0", x, DtypeTag.F32)
            out["hidden_states/1"] = _tensor("hidden_states/1", x, DtypeTag.F32)
        return out

    def _method_loss_and_grads(self) -> tuple[float, dict[str, np.ndarray]]:
        if self.method is Method.SFT:
            return self.model.sft_loss_and_grads(self.batch)
        if self.method is Method.DPO:
            return self.model.dpo_loss_and_grads(
                self.batch, self.ref_model, DPO_BETA, DPO_LABEL_SMOOTHING
            )
        return self.model.ppo_loss_and_grads(self.batch)

    def _gradient(self, request: dict[str, Any]) -> dict[str, Any]:
        loss, grads = self._method_loss_and_grads()
        out = {"loss": _scalar("loss", loss)}
        if self.method is not Method.PPO:
            grads.pop("v_head", None)
        for name, grad in grads.items():
            out[f"grads/{name}"] = _tensor(f"grads/{name}", grad, DtypeTag.F32)
        return out

    def replay(self, lr: float, apply_update: bool = True) -> dict[str, Any]:
        loss, grads = self._method_loss_and_grads()
        norm = kernels.global_grad_norm(grads.values())
        if apply_update:
            self.model.apply_grads(grads, lr)
        return {
            "loss": _scalar("loss", loss),
            "grad_norm": _scalar("grad_norm", norm),
        }

    def _replay_step(self, request: dict[str, Any]) -> dict[str, Any]:
        lr = request.get("lr")
        if not isinstance(lr, (int, float)):
            raise ToyFault(FailureReason.PROTOCOL_ERROR, "replay_step requires a numeric lr")
        return self.replay(float(lr))

    def _generate(self, request: dict[str, Any]) -> dict[str, Any]:
        if not self.generate_capability:
            raise ToyFault(FailureReason.RUNTIME_ERROR, "generation not supported")
        n = int(request.get("max_new_tokens", 0))
        ids = self.model.generate_greedy(self.batch.input_ids, n)
        return {"generated_ids": _tensor("generated_ids", ids, DtypeTag.I64)}

    def _shutdown(self, request: dict[str, Any]) -> dict[str, Any]:
        return {}


class FaultId(str, enum.Enum):
    INIT_MODULE_MISSING = "INIT_MODULE_MISSING"
    PARAM_EXTRA_KEYS = "PARAM_EXTRA_KEYS"
    PARAM_PREFIXED_KEYS = "PARAM_PREFIXED_KEYS"
    BATCH_DROP_KEY = "BATCH_DROP_KEY"
    BATCH_DTYPE_DRIFT = "BATCH_DTYPE_DRIFT"
    FORWARD_RETURNS_METHOD_LOSS = "FORWARD_RETURNS_METHOD_LOSS"
    LOGITS_NOISE = "LOGITS_NOISE"
    MISSING_VALUES = "MISSING_VALUES"
    MISSING_REF_LOGPS = "MISSING_REF_LOGPS"
    SHAPE_COLLAPSE = "SHAPE_COLLAPSE"
    GRAD_SIGN_FLIP = "GRAD_SIGN_FLIP"
    LR_SCHEDULE_OFF_BY_ONE = "LR_SCHEDULE_OFF_BY_ONE"
    SKIP_PARAM_UPDATE = "SKIP_PARAM_UPDATE"
    GENERATION_DIVERGE = "GENERATION_DIVERGE"
    NONFINITE_LOSS = "NONFINITE_LOSS"
    HANG_ON_FORWARD = "HANG_ON_FORWARD"
    CRASH_ON_GRADIENT = "CRASH_ON_GRADIENT"
    ARTIFACT_NEVER_PRODUCED = "ARTIFACT_NEVER_PRODUCED"
    DEVICE_MISMATCH_ERROR = "DEVICE_MISMATCH_ERROR"
    DTYPE_UNSUPPORTED_ERROR = "DTYPE_UNSUPPORTED_ERROR"


# Methods each fault applies to; the faulted behavior must be reachable.
FAULT_METHODS: dict[FaultId, tuple[Method, ...]] = {
    FaultId.INIT_MODULE_MISSING: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.PARAM_EXTRA_KEYS: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.PARAM_PREFIXED_KEYS: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.BATCH_DROP_KEY: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.BATCH_DTYPE_DRIFT: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.FORWARD_RETURNS_METHOD_LOSS: (Method.DPO,),
    FaultId.LOGITS_NOISE: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.MISSING_VALUES: (Method.PPO,),
    FaultId.MISSING_REF_LOGPS: (Method.DPO,),
    FaultId.SHAPE_COLLAPSE: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.GRAD_SIGN_FLIP: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.LR_SCHEDULE_OFF_BY_ONE: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.SKIP_PARAM_UPDATE: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.GENERATION_DIVERGE: (Method.SFT,),
    FaultId.NONFINITE_LOSS: (Method.SFT, Method.DPO),
    FaultId.HANG_ON_FORWARD: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.CRASH_ON_GRADIENT: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.ARTIFACT_NEVER_PRODUCED: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.DEVICE_MISMATCH_ERROR: (Method.SFT, Method.DPO, Method.PPO),
    FaultId.DTYPE_UNSUPPORTED_ERROR: (Method.SFT, Method.DPO, Method.PPO),
}

_HANG_CEILING_S = 3600.0


class FaultInjector:
    """Wraps a healthy toy and perturbs exactly one behavior. Probes the fault
    does not touch pass through byte-identically."""

    def __init__(self, toy: ToyRuntime, fault: FaultId):
        if fault is FaultId.ARTIFACT_NEVER_PRODUCED:
            raise ConfigError(
                "ARTIFACT_NEVER_PRODUCED is a launch-descriptor fault, not a runtime fault"
            )
        if toy.method not in FAULT_METHODS[fault]:
            raise ConfigError(
                f"fault {fault.value} does not apply to method {toy.method.value}"
            )
        self.toy = toy
        self.fault = fault
        self.method = toy.method

    @property
    def cancel_event(self) -> Optional[threading.Event]:
        return self.toy.cancel_event

    @cancel_event.setter
    def cancel_event(self, event: Optional[threading.Event]) -> None:
        self.toy.cancel_event = event

    def handshake(self) -> dict[str, Any]:
        return self.toy.handshake()

    def handle(self, request: dict[str, Any]) -> dict[str, Any]:
        op = request.get("op")
        fault = self.fault
        if op == "init":
            if fault is FaultId.INIT_MODULE_MISSING:
                raise ToyFault(FailureReason.INIT_ERROR, "No module named '_jax_sft_shared'")
            out = self.toy.handle(request)
            if fault is FaultId.LR_SCHEDULE_OFF_BY_ONE:
                warm = out["train_args/warmup_steps"]
                bumped = float(warm.data[0]) + 1
                out["train_args/warmup_steps"] = _scalar(
                    "train_args/warmup_steps", bumped, DtypeTag.I64
                )
            return out
        if op == "export_params":
            out = self.toy.handle(request)
            if fault is FaultId.PARAM_EXTRA_KEYS:
                out["params/v_head.lora_A"] = _tensor(
                    "params/v_head.lora_A", np.zeros((TOY_DIM, 2)), DtypeTag.F32
                )
                out["params/v_head.lora_B"] = _tensor(
                    "params/v_head.lora_B", np.zeros((2,)), DtypeTag.F32
                )
            elif fault is FaultId.PARAM_PREFIXED_KEYS:
                out = {
                    name.replace("params/", "params/pt_model.", 1): value
                    for name, value in out.items()
                }
            return out
        if op == "collate_batch":
            out = self.toy.handle(request)
            if fault is FaultId.BATCH_DROP_KEY:
                out.pop("batch/position_ids", None)
            elif fault is FaultId.BATCH_DTYPE_DRIFT:
                mask = out["batch/attention_mask"]
                out["batch/attention_mask"] = TensorArtifact(
                    name=mask.name, shape=mask.shape, dtype=DtypeTag.F32, data=mask.data
                )
            return out
        if op == "forward":
            if fault is FaultId.HANG_ON_FORWARD:
                self._hang()
            if fault is FaultId.DEVICE_MISMATCH_ERROR:
                raise ToyFault(
                    FailureReason.RUNTIME_ERROR,
                    "Can't export tensors on a different CUDA device index. "
                    "Expected: 1. Current device: 0.",
                )
            if fault is FaultId.DTYPE_UNSUPPORTED_ERROR:
                raise ToyFault(FailureReason.RUNTIME_ERROR, "Got unsupported ScalarType BFloat16")
            out = self.toy.handle(request)
            if fault is FaultId.LOGITS_NOISE:
                out["logits"] = self._perturb_logits(out["logits"])
            elif fault is FaultId.SHAPE_COLLAPSE:
                z = out["logits"]
                flat = (z.shape[0] * z.shape[1], z.shape[2])
                out["logits"] = TensorArtifact(
                    name=z.name, shape=flat, dtype=z.dtype, data=z.data
                )
            elif fault is FaultId.MISSING_VALUES:
                out.pop("values", None)
            elif fault is FaultId.MISSING_REF_LOGPS:
                out.pop("ref_logits", None)
            elif fault is FaultId.NONFINITE_LOSS and "loss" in out:
                out["loss"] = _scalar("loss", float("nan"))
            elif fault is FaultId.FORWARD_RETURNS_METHOD_LOSS and "loss" in out:
                method_loss, _ = self.toy._method_loss_and_grads()
                out["loss"] = _scalar("loss", method_loss)
            return out
        if op == "gradient":
            if fault is FaultId.CRASH_ON_GRADIENT:
                raise ToyFault(
                    FailureReason.RUNTIME_ERROR, "gradient computation crashed (injected)"
                )
            out = self.toy.handle(request)
            if fault is FaultId.GRAD_SIGN_FLIP:
                flipped = {}
                for name, value in out.items():
                    flipped[name] = TensorArtifact(
                        name=value.name,
                        shape=value.shape,
                        dtype=value.dtype,
                        data=-value.data,
                    )
                out = flipped
            return out
        if op == "replay_step":
            if fault is FaultId.SKIP_PARAM_UPDATE:
                lr = float(request.get("lr", 0.0))
                return self.toy.replay(lr, apply_update=False)
            return self.toy.handle(request)
        if op == "generate":
            out = self.toy.handle(request)
            if fault is FaultId.GENERATION_DIVERGE:
                ids = out["generated_ids"]
                data = ids.data.copy()
                if data.size:
                    data[-1] = float((int(data[-1]) + 1) % TOY_VOCAB)
                out["generated_ids"] = TensorArtifact(
                    name=ids.name, shape=ids.shape, dtype=ids.dtype, data=data
                )
            return out
        return self.toy.handle(request)

    def _perturb_logits(self, z: TensorArtifact) -> TensorArtifact:
        signs = np.where(np.arange(z.data.size) % 2 == 0, 1.0, -1.0)
        return TensorArtifact(
            name=z.name, shape=z.shape, dtype=z.dtype, data=z.data + 0.25 * signs.astype(np.float32)
        )

    def _hang(self) -> None:
        deadline = time.monotonic() + _HANG_CEILING_S
        while time.monotonic() < deadline:
            event = self.toy.cancel_event
            if event is not None:
                if event.wait(0.05):
                    return
            else:
                time.sleep(0.05)


def make_toy(
    method: Method,
    seed: Optional[int] = None,
    value_mode: str = "output",
    generate_capability: Optional[bool] = None,
) -> ToyRuntime:
    return ToyRuntime(
        Method(method),
        seed_override=seed,
        value_mode=value_mode,
        generate_capability=generate_capability,
    )


def inject(toy: ToyRuntime, fault: FaultId) -> FaultInjector:
    return FaultInjector(toy, FaultId(fault))


TOY_REGISTRY: dict[str, Callable[..., Any]] = {
    "sft": lambda seed=None: make_toy(Method.SFT, seed),
    "dpo": lambda seed=None: make_toy(Method.DPO, seed),
    "ppo": lambda seed=None: make_toy(Method.PPO, seed),
    "ppo_hidden": lambda seed=None: make_toy(Method.PPO, seed, value_mode="hidden"),
    "sft_nogen": lambda seed=None: make_toy(Method.SFT, seed, generate_capability=False),
}


def build_from_descriptor(descriptor: dict[str, Any]) -> Any:
    """Instantiate the toy named by an in-process launch descriptor."""
    name = descriptor.get("toy")
    if name not in TOY_REGISTRY:
        raise KeyError(name)
    toy = TOY_REGISTRY[name](seed=descriptor.get("seed"))
    fault = descriptor.get("fault")
    if fault:
        return inject(toy, FaultId(fault))
    return toy


__all__ = [
    "DPO_BETA",
    "FAULT_METHODS",
    "FaultId",
    "FaultInjector",
    "Lcg",
    "TOY_DIM",
    "TOY_REGISTRY",
    "TOY_SEQ",
    "TOY_VOCAB",
    "TRAIN_ARGS",
    "ToyBatch",
    "ToyFault",
    "ToyModel",
    "ToyRuntime",
    "build_from_descriptor",
    "inject",
    "make_batch",
    "make_toy",
]
