"""Frozen wire-format fixture emitter.

The engine's decoder tests pin their expectations to the exact bytes this
module produces: one handshake, a full probe script, a response frame that
exercises every artifact form, an error response, and a shutdown. Tensors are
hand-packed with struct rather than routed through the SDK so the fixture
pins the byte format itself. Every numeric below is exactly representable in
32-bit floats.
"""
from __future__ import annotations

import argparse
import base64
import struct
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .protocol import encode_frame


def _tensor(shape: Sequence[int], dtype: str, values: Sequence[float]) -> dict[str, Any]:
    return {
        "shape": list(shape),
        "dtype": dtype,
        "data": base64.b64encode(
            struct.pack(f"<{len(values)}f", *values)
        ).decode("ascii"),
    }


FRAMES: list[dict[str, Any]] = [
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
            "params/w": _tensor([2, 3], "f32", [0.0, 0.5, -1.5, 3.25, -0.125, 2.0]),
            "train_args/base_lr": _tensor([], "f32", [4.0]),
            "hidden_states/0": _tensor([1, 2], "f16", [1.0, -2.5]),
            "values": _tensor([1], "bf16", [0.15625]),
            "batch/input_ids": _tensor([1, 5], "i64", [3.0, 1.0, 4.0, 1.0, 5.0]),
            "batch/attention_mask": _tensor([1, 5], "bool", [1.0, 0.0, 1.0, 1.0, 1.0]),
            "generated_text": {"strings": ["hello", "wörld"]},
            "empty": _tensor([0], "f32", []),
        },
    },
    {"ok": False, "kind": "runtime_error", "error": "boom"},
    {"op": "shutdown"},
]


def golden_fixture_bytes() -> bytes:
    return b"".join(encode_frame(payload) for payload in FRAMES)


def golden_fixture_emit(path: Any) -> int:
    """Write the fixture to ``path``; returns the byte count."""
    blob = golden_fixture_bytes()
    Path(path).write_bytes(blob)
    return len(blob)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="difftrain-golden-fixture",
        description="Write the canonical protocol fixture frames to a file.",
    )
    parser.add_argument("out", help="destination path")
    args = parser.parse_args(argv)
    try:
        count = golden_fixture_emit(args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out} ({count} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
