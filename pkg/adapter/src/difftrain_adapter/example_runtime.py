"""Self-contained SFT runtime served over the adapter SDK.

This is the external half of the cross-implementation parity fixture: a tiny
embedding/unembedding language model whose every number is derived from one
linear congruential generator. The verification engine hosts an in-process
runtime built from the same recipe, and this module re-implements that recipe
from scratch rather than importing it, so agreement between the two processes
is evidence that both the wire protocol and the arithmetic conventions hold.
Divergence between them is a test signal.

Draw order is part of the contract: embedding rows first, then the
unembedding matrix; batches draw each row's ignored-label position before
that row's labels. All arithmetic runs in float64 and is narrowed to f32 only
at the encoding boundary, which the engine does too, so healthy transcripts
match bitwise.
"""
from __future__ import annotations

import argparse
import math
import sys
from typing import Any, Mapping, Optional

import numpy as np

from .sdk import AdapterCallbacks, AdapterError, serve

VOCAB = 11
DIM = 4
SEQ_LEN = 6
IGNORE_INDEX = -100

_LCG_A = 1664525
_LCG_C = 1013904223
_LCG_M = 2 ** 32
_SEED_MIX = 2654435761

TRAIN_ARGS: dict[str, Any] = {
    "train_args/base_lr": 4.0,
    "train_args/warmup_steps": 2,
    "train_args/total_steps": 10,
    "train_args/schedule": ["linear"],
}


class Lcg:
    def __init__(self, state: int):
        self.state = state % _LCG_M

    def next_u32(self) -> int:
        self.state = (_LCG_A * self.state + _LCG_C) % _LCG_M
        return self.state

    def signed_uniform(self, scale: float) -> float:
        return (2.0 * (self.next_u32() / _LCG_M) - 1.0) * scale


def _param_stream(seed: int) -> Lcg:
    return Lcg((seed * _SEED_MIX + 1) % _LCG_M)


def _data_stream(seed: int) -> Lcg:
    return Lcg((seed * _SEED_MIX + 2) % _LCG_M)


def make_batch(seed: int, rows: int, seq_len: int = SEQ_LEN) -> dict[str, np.ndarray]:
    """Deterministic batch: random tokens, full attention except the final
    position of odd rows, and exactly one ignored label per row."""
    rng = _data_stream(seed)
    input_ids = np.zeros((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        for t in range(seq_len):
            input_ids[b, t] = rng.next_u32() % VOCAB
    attention_mask = np.ones((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        if b % 2 == 1:
            attention_mask[b, seq_len - 1] = 0
    labels = np.zeros((rows, seq_len), dtype=np.int64)
    for b in range(rows):
        ignored = 1 + rng.next_u32() % (seq_len - 1)
        for t in range(seq_len):
            labels[b, t] = rng.next_u32() % VOCAB
        labels[b, ignored] = IGNORE_INDEX
    position_ids = np.tile(np.arange(seq_len, dtype=np.int64), (rows, 1))
    return {
        "input_ids": input_ids,
        "attention_mask": attention_mask,
        "labels": labels,
        "position_ids": position_ids,
    }


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _shifted_valid_mask(labels: np.ndarray) -> np.ndarray:
    """Position t is supervised iff labels[b, t+1] is not the ignore index."""
    valid = np.zeros(labels.shape, dtype=bool)
    if labels.shape[1] >= 2:
        valid[:, :-1] = labels[:, 1:] != IGNORE_INDEX
    return valid


class SftModel:
    """logits[b, t] = embed[input_ids[b, t]] @ out, trained by full-batch
    gradient descent on the shifted cross-entropy."""

    def __init__(self, seed: int):
        rng = _param_stream(seed)
        self.embed = np.array(
            [[rng.signed_uniform(1.0) for _ in range(DIM)] for _ in range(VOCAB)]
        )
        self.out = np.array(
            [[rng.signed_uniform(0.5) for _ in range(VOCAB)] for _ in range(DIM)]
        )

    def hidden(self, input_ids: np.ndarray) -> np.ndarray:
        return self.embed[input_ids]

    def logits(self, input_ids: np.ndarray) -> np.ndarray:
        return self.hidden(input_ids) @ self.out

    def loss_and_grads(
        self, input_ids: np.ndarray, labels: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        z = self.logits(input_ids)
        ls = _log_softmax(z)
        valid = _shifted_valid_mask(labels)
        count = int(valid.sum())
        if count == 0:
            raise AdapterError("runtime_error", "no supervised tokens")
        b_idx, t_idx = np.nonzero(valid)
        targets = labels[b_idx, t_idx + 1]
        tlp = np.zeros(labels.shape, dtype=np.float64)
        tlp[b_idx, t_idx] = ls[b_idx, t_idx, targets]
        loss = float(-tlp[valid].sum() / count)
        probs = np.exp(ls)
        dz = np.zeros_like(z)
        dz[b_idx, t_idx] = probs[b_idx, t_idx] / count
        dz[b_idx, t_idx, targets] -= 1.0 / count
        x = self.hidden(input_ids)
        d_out = np.einsum("btd,btv->dv", x, dz)
        dx = np.einsum("btv,dv->btd", dz, self.out)
        d_embed = np.zeros_like(self.embed)
        np.add.at(d_embed, input_ids, dx)
        return loss, {"embed": d_embed, "out": d_out}

    def grad_norm(self, grads: Mapping[str, np.ndarray]) -> float:
        total = 0.0
        for grad in grads.values():
            total += float((grad * grad).sum())
        return math.sqrt(total)

    def apply_grads(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            getattr(self, name)[...] -= lr * grad

    def generate_greedy(self, input_ids: np.ndarray, max_new_tokens: int) -> np.ndarray:
        rows = input_ids.shape[0]
        out = np.zeros((rows, max_new_tokens), dtype=np.int64)
        for b in range(rows):
            cur = int(input_ids[b, -1])
            for i in range(max_new_tokens):
                cur = int(np.argmax(self.embed[cur] @ self.out))
                out[b, i] = cur
        return out


class ExampleExternalRuntime:
    """Probe lifecycle around one SftModel and one collated batch."""

    def __init__(self, seed_override: Optional[int] = None):
        self.seed_override = seed_override
        self.model: Optional[SftModel] = None
        self.batch: Optional[dict[str, np.ndarray]] = None

    def init(self, config: Any) -> Mapping[str, Any]:
        if not isinstance(config, dict):
            raise AdapterError("init_error", "init request carried no config")
        method = config.get("method")
        if method != "sft":
            raise AdapterError(
                "init_error", f"runtime implements sft, config asked for {method}"
            )
        seed = (
            self.seed_override
            if self.seed_override is not None
            else int(config.get("seed", 42))
        )
        self.model = SftModel(seed)
        self.batch = make_batch(seed, int(config.get("batch_size", 1)))
        return dict(TRAIN_ARGS)

    def _require_model(self) -> SftModel:
        if self.model is None:
            raise AdapterError("runtime_error", "runtime not initialized")
        return self.model

    def export_params(self) -> Mapping[str, Any]:
        model = self._require_model()
        return {"params/embed": model.embed, "params/out": model.out}

    def collate_batch(self) -> Mapping[str, Any]:
        self._require_model()
        return {f"batch/{name}": arr for name, arr in self.batch.items()}

    def forward(self, flags: Mapping[str, Any]) -> Mapping[str, Any]:
        model = self._require_model()
        ids = self.batch["input_ids"]
        out: dict[str, Any] = {"logits": model.logits(ids)}
        if not flags.get("drop_labels"):
            loss, _ = model.loss_and_grads(ids, self.batch["labels"])
            out["loss"] = loss
        if flags.get("output_hidden_states"):
            x = model.hidden(ids)
            out["hidden_states/0"] = x
            out["hidden_states/1"] = x
        return out

    def gradient(self) -> Mapping[str, Any]:
        model = self._require_model()
        loss, grads = model.loss_and_grads(
            self.batch["input_ids"], self.batch["labels"]
        )
        out: dict[str, Any] = {"loss": loss}
        for name, grad in grads.items():
            out[f"grads/{name}"] = grad
        return out

    def replay_step(self, step: Any, lr: float) -> Mapping[str, Any]:
        model = self._require_model()
        loss, grads = model.loss_and_grads(
            self.batch["input_ids"], self.batch["labels"]
        )
        norm = model.grad_norm(grads)
        model.apply_grads(grads, lr)
        return {"loss": loss, "grad_norm": norm}

    def generate(self, max_new_tokens: int) -> Mapping[str, Any]:
        model = self._require_model()
        return {
            "generated_ids": model.generate_greedy(
                self.batch["input_ids"], max_new_tokens
            )
        }


def build_callbacks(seed_override: Optional[int] = None) -> AdapterCallbacks:
    runtime = ExampleExternalRuntime(seed_override)
    return AdapterCallbacks(
        method="sft",
        capabilities=("generate",),
        init=runtime.init,
        export_params=runtime.export_params,
        collate_batch=runtime.collate_batch,
        forward=runtime.forward,
        gradient=runtime.gradient,
        replay_step=runtime.replay_step,
        generate=runtime.generate,
    )


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="difftrain-example-runtime",
        description="Serve the example SFT runtime on standard streams.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="override the seed carried by the init config",
    )
    args = parser.parse_args(argv)
    return serve(build_callbacks(args.seed))


if __name__ == "__main__":
    sys.exit(main())
