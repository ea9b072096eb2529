"""Method-specific math.

Everything the verifier derives from raw runtime outputs lives here: the
shifted causal cross-entropy, sequence log-probabilities, preference losses,
synthetic PPO rewards, generalized advantage estimation, learning-rate
schedules, and the micro-batch averaging invariant. All functions compute in
float64 and are deterministic given their inputs.

Label convention everywhere: logits at position t score the token at t+1, and
a label of -100 marks a position as unsupervised.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .compare import CompareVerdict, compare_arrays
from .contract import ConfigError, ToleranceProfile

log = logging.getLogger(__name__)

IGNORE_INDEX = -100
PPO_GAMMA = 1.0
PPO_LAMBDA = 0.95
ORPO_PROB_CLAMP = 1e-8


class KernelError(ValueError):
    """A derivation is impossible on these inputs (e.g. nothing to supervise)."""


class DpoLossType(str, enum.Enum):
    SIGMOID = "sigmoid"
    ORPO = "orpo"
    SIMPO = "simpo"


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


def _as2d(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise KernelError(f"{name} must be 2-dimensional, got shape {list(arr.shape)}")
    return arr


def _as3d(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise KernelError(f"{name} must be 3-dimensional, got shape {list(arr.shape)}")
    return arr


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def shifted_valid_mask(labels: np.ndarray) -> np.ndarray:
    """Boolean [B, T]: position t is supervised iff labels[b, t+1] != -100."""
    labels = _as2d("labels", labels).astype(np.int64)
    valid = np.zeros(labels.shape, dtype=bool)
    if labels.shape[1] >= 2:
        valid[:, :-1] = labels[:, 1:] != IGNORE_INDEX
    return valid


def token_logprobs(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-position log-probability of the shifted target, zero where
    unsupervised."""
    logits = _as3d("logits", logits)
    labels = _as2d("labels", labels).astype(np.int64)
    if logits.shape[:2] != labels.shape:
        raise KernelError(
            f"logits leading shape {list(logits.shape[:2])} does not match labels "
            f"shape {list(labels.shape)}"
        )
    ls = log_softmax(logits)
    valid = shifted_valid_mask(labels)
    out = np.zeros(labels.shape, dtype=np.float64)
    b_idx, t_idx = np.nonzero(valid)
    out[b_idx, t_idx] = ls[b_idx, t_idx, labels[b_idx, t_idx + 1]]
    return out


def shifted_causal_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of shifted targets over supervised
    positions. Raises KernelError when nothing is supervised."""
    tlp = token_logprobs(logits, labels)
    valid = shifted_valid_mask(labels)
    count = int(valid.sum())
    if count == 0:
        raise KernelError("no supervised tokens")
    return float(-tlp[valid].sum() / count)


def sequence_logprobs(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row sum of supervised token log-probabilities; a row with nothing
    supervised contributes 0."""
    return token_logprobs(logits, labels).sum(axis=1)


@dataclass(frozen=True)
class DpoInputs:
    """Preference-loss inputs. Rows are ordered chosen-first: the first B/2
    entries are chosen completions paired with the last B/2 rejected ones."""

    policy_logps: np.ndarray
    ref_logps: Optional[np.ndarray] = None
    beta: float = 0.1
    loss_type: DpoLossType = DpoLossType.SIGMOID
    label_smoothing: float = 0.0
    simpo_margin: float = 0.0
    token_counts: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        policy = np.asarray(self.policy_logps, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "policy_logps", policy)
        if self.ref_logps is not None:
            ref = np.asarray(self.ref_logps, dtype=np.float64).reshape(-1)
            if ref.shape != policy.shape:
                raise KernelError(
                    f"ref_logps shape {list(ref.shape)} does not match policy_logps "
                    f"shape {list(policy.shape)}"
                )
            object.__setattr__(self, "ref_logps", ref)
        if self.token_counts is not None:
            counts = np.asarray(self.token_counts, dtype=np.float64).reshape(-1)
            if counts.shape != policy.shape:
                raise KernelError("token_counts must align with policy_logps")
            object.__setattr__(self, "token_counts", counts)
        if policy.size == 0 or policy.size % 2 != 0:
            raise KernelError(f"preference batch must pair rows evenly, got {policy.size}")
        if not (isinstance(self.loss_type, DpoLossType)):
            object.__setattr__(self, "loss_type", DpoLossType(self.loss_type))
        if self.beta <= 0:
            raise KernelError("beta must be positive")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise KernelError("label_smoothing must lie in [0, 0.5)")


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable -softplus(-x).
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _length_normalized(inputs: DpoInputs) -> np.ndarray:
    g = inputs.policy_logps
    if inputs.token_counts is None:
        return g
    return g / np.maximum(inputs.token_counts, 1.0)


def dpo_loss(inputs: DpoInputs) -> float:
    """Mean preference loss over chosen/rejected pairs.

    sigmoid: -(1-e)*logsig(beta*h) - e*logsig(-beta*h) with
             h = (logp_c - logp_r) - (ref_c - ref_r); requires ref_logps.
    orpo:    -logsig(log odds_c - log odds_r) on length-normalized logps,
             odds = p/(1-p) with p clamped away from {0, 1}.
    simpo:   -logsig(beta*(g_c - g_r) - margin) on length-normalized logps.
    """
    half = inputs.policy_logps.size // 2
    if inputs.loss_type is DpoLossType.SIGMOID:
        if inputs.ref_logps is None:
            raise KernelError("ref log-probs required for sigmoid DPO loss")
        chosen, rejected = inputs.policy_logps[:half], inputs.policy_logps[half:]
        ref_c, ref_r = inputs.ref_logps[:half], inputs.ref_logps[half:]
        h = (chosen - rejected) - (ref_c - ref_r)
        eps = inputs.label_smoothing
        losses = -(1.0 - eps) * _log_sigmoid(inputs.beta * h) - eps * _log_sigmoid(
            -inputs.beta * h
        )
        return float(losses.mean())
    normalized = _length_normalized(inputs)
    g_c, g_r = normalized[:half], normalized[half:]
    if inputs.loss_type is DpoLossType.ORPO:
        p = np.clip(np.exp(np.stack([g_c, g_r])), ORPO_PROB_CLAMP, 1.0 - ORPO_PROB_CLAMP)
        log_odds = np.log(p) - np.log1p(-p)
        losses = -_log_sigmoid(log_odds[0] - log_odds[1])
        return float(losses.mean())
    if inputs.loss_type is DpoLossType.SIMPO:
        losses = -_log_sigmoid(inputs.beta * (g_c - g_r) - inputs.simpo_margin)
        return float(losses.mean())
    raise KernelError(f"unknown preference loss type {inputs.loss_type!r}")


def ppo_valid_mask(labels: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    """Supervised positions under the attention mask: attended at t and a
    non-ignored label at t+1."""
    mask = _as2d("attention_mask", attention_mask)
    valid = shifted_valid_mask(labels)
    if mask.shape != valid.shape:
        raise KernelError(
            f"attention_mask shape {list(mask.shape)} does not match labels shape "
            f"{list(valid.shape)}"
        )
    return valid & (mask.astype(np.int64) == 1)


def ppo_synthetic_rewards(labels: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    """Deterministic per-token rewards from the shifted labels.

    r[b,t] = mask[b,t] * ((labels[b,t+1] mod 7) - 3) / 3 at positions with a
    real next label, else 0. Keeps both runtimes on identical reward inputs
    without shipping a reward model.
    """
    labels = _as2d("labels", labels).astype(np.int64)
    mask = _as2d("attention_mask", attention_mask).astype(np.int64)
    if mask.shape != labels.shape:
        raise KernelError("attention_mask and labels must share a shape")
    rewards = np.zeros(labels.shape, dtype=np.float64)
    T = labels.shape[1]
    if T >= 2:
        nxt = labels[:, 1:]
        ok = nxt != IGNORE_INDEX
        vals = np.where(ok, ((np.where(ok, nxt, 0) % 7) - 3) / 3.0, 0.0)
        rewards[:, : T - 1] = vals * mask[:, : T - 1]
    return rewards


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    mask: np.ndarray,
    gamma: float = PPO_GAMMA,
    lam: float = PPO_LAMBDA,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation by reverse scan per row.

    delta_t = r_t + gamma * v_{t+1} * m_{t+1} - v_t
    A_t     = delta_t + gamma * lam * m_{t+1} * A_{t+1}
    with value and advantage bootstrapped to 0 past the last position.
    Masked positions carry advantage 0 and contribute no value to returns,
    so returns = advantages + values * mask.
    """
    rewards = _as2d("rewards", np.asarray(rewards, dtype=np.float64))
    values = _as2d("values", np.asarray(values, dtype=np.float64))
    mask = _as2d("mask", np.asarray(mask, dtype=np.float64))
    if not (rewards.shape == values.shape == mask.shape):
        raise KernelError("rewards, values, and mask must share a shape")
    B, T = rewards.shape
    adv = np.zeros((B, T), dtype=np.float64)
    carry = np.zeros(B, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        next_value = values[:, t + 1] if t + 1 < T else np.zeros(B)
        next_mask = mask[:, t + 1] if t + 1 < T else np.zeros(B)
        delta = rewards[:, t] + gamma * next_value * next_mask - values[:, t]
        carry = delta + gamma * lam * next_mask * carry
        adv[:, t] = carry
    adv = adv * mask
    returns = adv + values * mask
    return adv, returns


def time_axis_normalize(
    logits: np.ndarray,
    values: np.ndarray,
    labels: np.ndarray,
    attention_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Truncate every input to the shortest time axis, keeping leading
    positions. Batch axes must already agree; there is no safe way to align
    those."""
    logits = _as3d("logits", logits)
    values = _as2d("values", values)
    labels = _as2d("labels", labels)
    mask = _as2d("attention_mask", attention_mask)
    target_b = labels.shape[0]
    for arr in (logits, values, mask):
        if arr.shape[0] != target_b:
            raise KernelError(
                f"Expected input batch_size ({arr.shape[0]}) to match target "
                f"batch_size ({target_b})."
            )
    t_min = min(logits.shape[1], values.shape[1], labels.shape[1], mask.shape[1])
    return (
        logits[:, :t_min, :],
        values[:, :t_min],
        labels[:, :t_min],
        mask[:, :t_min],
    )


@dataclass(frozen=True)
class PpoLossParts:
    policy_loss: float
    value_loss: float
    method_loss: float
    token_logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    valid_mask: np.ndarray


def ppo_method_loss(
    logits: np.ndarray,
    values: np.ndarray,
    labels: np.ndarray,
    attention_mask: np.ndarray,
) -> PpoLossParts:
    """Synthetic PPO objective over one probed batch.

    policy = -mean over valid positions of token_logprob * advantage, with
    advantages held constant; value = mean squared error of values against
    returns. Advantages come from gae() on the synthetic rewards.
    """
    logits, values, labels, mask = time_axis_normalize(logits, values, labels, attention_mask)
    valid = ppo_valid_mask(labels, mask)
    count = int(valid.sum())
    if count == 0:
        raise KernelError("no supervised tokens")
    tlp = token_logprobs(logits, labels) * valid
    rewards = ppo_synthetic_rewards(labels, mask)
    adv, returns = gae(rewards, values, valid.astype(np.float64))
    policy = float(-(tlp * adv)[valid].sum() / count)
    value = float(((values - returns) ** 2)[valid].sum() / count)
    return PpoLossParts(
        policy_loss=policy,
        value_loss=value,
        method_loss=policy + value,
        token_logprobs=tlp,
        advantages=adv,
        returns=returns,
        valid_mask=valid,
    )


def lr_schedule(
    base_lr: float,
    total_steps: int,
    kind: ScheduleKind,
    warmup_steps: Optional[int] = None,
    warmup_ratio: Optional[float] = None,
    horizon: int = 8,
) -> np.ndarray:
    """First ``horizon`` learning rates of a warmup-then-decay schedule.

    Warmup step t < w ramps linearly to base_lr as base_lr * (t+1) / w; after
    warmup, linear decays as (total-t)/(total-w) and cosine follows the half
    cosine from base_lr to 0 over the remaining steps.
    """
    if not isinstance(kind, ScheduleKind):
        kind = ScheduleKind(kind)
    if not (math.isfinite(base_lr) and base_lr > 0):
        raise ConfigError(f"base learning rate must be positive and finite, got {base_lr}")
    if total_steps < horizon:
        raise ConfigError(f"total_steps must be >= {horizon}, got {total_steps}")
    if warmup_steps is None:
        if warmup_ratio is None:
            raise ConfigError("schedule requires warmup_steps or warmup_ratio")
        if not (0.0 < warmup_ratio < 1.0):
            raise ConfigError(f"warmup_ratio must lie in (0, 1), got {warmup_ratio}")
        warmup_steps = math.ceil(warmup_ratio * total_steps)
    if warmup_steps < 1:
        raise ConfigError("warmup must cover at least one step")
    if warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup_steps {warmup_steps} must be smaller than total_steps {total_steps}"
        )
    out = np.zeros(horizon, dtype=np.float64)
    for t in range(horizon):
        if t < warmup_steps:
            out[t] = base_lr * (t + 1) / warmup_steps
        elif kind is ScheduleKind.LINEAR:
            out[t] = base_lr * (total_steps - t) / (total_steps - warmup_steps)
        else:
            out[t] = base_lr * 0.5 * (
                1.0 + math.cos(math.pi * (t - warmup_steps) / (total_steps - warmup_steps))
            )
    return out


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    """Flat L2 norm over every gradient tensor; empty input is 0 with a
    warning since it usually means nothing is trainable."""
    total = 0.0
    seen = False
    for g in grads:
        arr = np.asarray(g, dtype=np.float64)
        if arr.size:
            seen = True
            total += float((arr * arr).sum())
    if not seen:
        log.warning("global_grad_norm over an empty gradient set")
        return 0.0
    return math.sqrt(total)


def micro_batch_invariant(
    loss_full: float,
    loss_left: float,
    loss_right: float,
    tol: ToleranceProfile,
) -> CompareVerdict:
    """Full-batch loss against the average of the two micro-batch losses,
    compared as length-1 arrays."""
    return compare_arrays(
        np.asarray([loss_full], dtype=np.float64),
        np.asarray([(loss_left + loss_right) / 2.0], dtype=np.float64),
        tol,
    )


__all__ = [
    "DpoInputs",
    "DpoLossType",
    "IGNORE_INDEX",
    "KernelError",
    "PPO_GAMMA",
    "PPO_LAMBDA",
    "PpoLossParts",
    "ScheduleKind",
    "dpo_loss",
    "gae",
    "global_grad_norm",
    "log_softmax",
    "lr_schedule",
    "micro_batch_invariant",
    "ppo_method_loss",
    "ppo_synthetic_rewards",
    "ppo_valid_mask",
    "sequence_logprobs",
    "shifted_causal_ce",
    "shifted_valid_mask",
    "time_axis_normalize",
    "token_logprobs",
]
