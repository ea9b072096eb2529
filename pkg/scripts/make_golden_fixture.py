#!/usr/bin/env python3
"""Regenerate tests/data/golden.bin, the frozen wire-format fixture.

Deliberately hand-rolls the framing with struct/json/base64 and imports
nothing from the package, so the fixture pins the protocol itself: 4-byte
big-endian length, canonical JSON (sorted keys, compact separators), tensors
as base64 little-endian f32. If this file and the codec ever disagree, the
codec drifted.
"""
import base64
import json
import struct
import sys
from pathlib import Path


def frame(payload: dict) -> bytes:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def tensor(shape, dtype, values) -> dict:
    return {
        "shape": list(shape),
        "dtype": dtype,
        "data": base64.b64encode(struct.pack(f"<{len(values)}f", *values)).decode("ascii"),
    }


# Every numeric below is exactly representable in 32-bit floats.
FRAMES = [
    {"capabilities": ["generate"], "method": "sft", "protocol": 1},
    {
        "op": "init",
        "config": {
            "method": "sft",
            "seed": 42,
            "num_examples": 1,
            "batch_size": 1,
            "replay_horizon": 2,
            "max_new_tokens": 8,
            "compare_hidden_states": False,
            "precision_profile": "bf16_compare",
            "probe_timeout": 120.0,
        },
    },
    {"op": "export_params"},
    {"op": "collate_batch"},
    {
        "op": "forward",
        "flags": {"use_cache": False, "output_hidden_states": False, "drop_labels": False},
    },
    {"op": "gradient"},
    {"op": "replay_step", "step": 0, "lr": 0.001},
    {"op": "generate", "max_new_tokens": 8},
    {
        "ok": True,
        "artifacts": {
            "params/w": tensor([2, 3], "f32", [0.0, 0.5, -1.5, 3.25, -0.125, 2.0]),
            "train_args/base_lr": tensor([], "f32", [4.0]),
            "hidden_states/0": tensor([1, 2], "f16", [1.0, -2.5]),
            "values": tensor([1], "bf16", [0.15625]),
            "batch/input_ids": tensor([1, 5], "i64", [3.0, 1.0, 4.0, 1.0, 5.0]),
            "batch/attention_mask": tensor([1, 5], "bool", [1.0, 0.0, 1.0, 1.0, 1.0]),
            "generated_text": {"strings": ["hello", "wörld"]},
            "empty": tensor([0], "f32", []),
        },
    },
    {"ok": False, "kind": "runtime_error", "error": "boom"},
    {"op": "shutdown"},
]


def emit() -> bytes:
    return b"".join(frame(p) for p in FRAMES)


def main() -> int:
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden.bin"
    blob = emit()
    if out.exists() and out.read_bytes() == blob:
        print(f"unchanged: {out} ({len(blob)} bytes)")
        return 0
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    print(f"wrote {out} ({len(blob)} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
