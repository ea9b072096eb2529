"""Callback-driven protocol server for external training runtimes.

A runtime author fills in :class:`AdapterCallbacks` with plain functions that
speak numpy, and :func:`serve` owns the wire: it sends the handshake, decodes
requests, converts returned values into 32-bit float tensor payloads, and
turns exceptions into error responses without touching the message text,
because downstream failure classification keys on exact substrings of it.

Two hard rules hold at the encoding boundary. Every tensor is normalized to
f32 before it is framed, so the wire never carries half-precision payloads,
and every tensor is checked for finiteness, so a NaN produced by a broken
runtime surfaces as a structured ``nonfinite`` error instead of a poisoned
artifact.
"""
from __future__ import annotations

import base64
import numbers
import sys
from dataclasses import dataclass
from typing import Any, BinaryIO, Callable, Mapping, Optional, Sequence

import numpy as np

from .protocol import (
    DEFAULT_FRAME_CAP,
    PROTOCOL_VERSION,
    ProtocolError,
    encode_frame,
    read_frame,
)

DTYPE_TAGS = ("f32", "f16", "bf16", "i64", "bool")


class AdapterError(Exception):
    """Failure with an explicit wire kind; the message crosses unmodified."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.message = message


@dataclass(frozen=True)
class Tensor:
    """Value with an explicit provenance tag, for dtypes numpy cannot express
    (bf16) or when inference from the array dtype would mislabel the origin."""

    data: Any
    dtype: str = "f32"

    def __post_init__(self) -> None:
        if self.dtype not in DTYPE_TAGS:
            raise AdapterError("protocol_error", f"unknown dtype tag {self.dtype!r}")


def _infer_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float16:
        return "f16"
    if arr.dtype == np.bool_:
        return "bool"
    if np.issubdtype(arr.dtype, np.integer):
        return "i64"
    if np.issubdtype(arr.dtype, np.floating):
        return "f32"
    raise AdapterError(
        "protocol_error", f"cannot infer a dtype tag from array dtype {arr.dtype}"
    )


def _as_f32(name: str, arr: np.ndarray, tag: str) -> np.ndarray:
    if tag == "bool":
        arr = arr.astype(bool)
    elif tag == "i64":
        arr = arr.astype(np.int64)
    data = arr.astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise AdapterError(
            "nonfinite", f"artifact '{name}' contains non-finite values"
        )
    return data


def _tensor_payload(name: str, arr: np.ndarray, tag: str) -> dict[str, Any]:
    data = _as_f32(name, arr, tag)
    return {
        "shape": [int(d) for d in arr.shape],
        "dtype": tag,
        "data": base64.b64encode(
            data.reshape(-1).astype("<f4").tobytes()
        ).decode("ascii"),
    }


def encode_artifact(name: str, value: Any) -> dict[str, Any]:
    """One artifact to wire form. Accepts ndarrays, python scalars, nested
    number lists, string sequences, and explicitly tagged Tensors; the result
    always carries f32 bytes."""
    if isinstance(value, Tensor):
        return _tensor_payload(name, np.asarray(value.data), value.dtype)
    if isinstance(value, str):
        raise AdapterError(
            "protocol_error",
            f"artifact '{name}': a bare string is ambiguous, pass a list of strings",
        )
    if isinstance(value, np.ndarray):
        return _tensor_payload(name, value, _infer_tag(value))
    if isinstance(value, (bool, np.bool_)):
        return _tensor_payload(name, np.asarray(value), "bool")
    if isinstance(value, numbers.Integral):
        return _tensor_payload(name, np.asarray(value), "i64")
    if isinstance(value, numbers.Real):
        return _tensor_payload(name, np.asarray(value), "f32")
    if isinstance(value, Sequence):
        if all(isinstance(v, str) for v in value):
            return {"strings": list(value)}
        arr = np.asarray(value)
        return _tensor_payload(name, arr, _infer_tag(arr))
    raise AdapterError(
        "protocol_error",
        f"artifact '{name}': unsupported value type {type(value).__name__}",
    )


@dataclass
class AdapterCallbacks:
    """The callable surface a runtime exposes to the probe loop.

    Every callback returns a mapping of artifact name to value. Capabilities
    are declared, not discovered: the handshake advertises exactly this tuple,
    and the engine holds the runtime to it.
    """

    method: str
    capabilities: tuple[str, ...] = ()
    init: Optional[Callable[[Any], Mapping[str, Any]]] = None
    export_params: Optional[Callable[[], Mapping[str, Any]]] = None
    collate_batch: Optional[Callable[[], Mapping[str, Any]]] = None
    forward: Optional[Callable[[Mapping[str, Any]], Mapping[str, Any]]] = None
    gradient: Optional[Callable[[], Mapping[str, Any]]] = None
    replay_step: Optional[Callable[[Any, float], Mapping[str, Any]]] = None
    generate: Optional[Callable[[int], Mapping[str, Any]]] = None

    def handshake(self) -> dict[str, Any]:
        return {
            "protocol": PROTOCOL_VERSION,
            "method": self.method,
            "capabilities": list(self.capabilities),
        }


def _call(fn: Optional[Callable[..., Any]], op: str, *args: Any) -> Mapping[str, Any]:
    if fn is None:
        raise AdapterError("runtime_error", f"no callback registered for op {op!r}")
    out = fn(*args)
    if not isinstance(out, Mapping):
        raise AdapterError(
            "runtime_error",
            f"callback for {op!r} returned {type(out).__name__}, expected a mapping",
        )
    return out


def _dispatch(callbacks: AdapterCallbacks, request: Mapping[str, Any]) -> Mapping[str, Any]:
    op = request.get("op")
    if op == "shutdown":
        return {}
    if op == "init":
        return _call(callbacks.init, op, request.get("config"))
    if op == "export_params":
        return _call(callbacks.export_params, op)
    if op == "collate_batch":
        return _call(callbacks.collate_batch, op)
    if op == "forward":
        return _call(callbacks.forward, op, request.get("flags") or {})
    if op == "gradient":
        return _call(callbacks.gradient, op)
    if op == "replay_step":
        lr = request.get("lr")
        if isinstance(lr, bool) or not isinstance(lr, (int, float)):
            raise AdapterError("protocol_error", "replay_step requires a numeric lr")
        return _call(callbacks.replay_step, op, request.get("step"), float(lr))
    if op == "generate":
        return _call(callbacks.generate, op, int(request.get("max_new_tokens", 0)))
    raise AdapterError("protocol_error", f"unknown op {op!r}")


def _encode_response(artifacts: Mapping[str, Any]) -> dict[str, Any]:
    encoded: dict[str, Any] = {}
    for name, value in artifacts.items():
        if not isinstance(name, str):
            raise AdapterError(
                "protocol_error", f"artifact names must be strings, got {name!r}"
            )
        encoded[name] = encode_artifact(name, value)
    return {"ok": True, "artifacts": encoded}


def serve(
    callbacks: AdapterCallbacks,
    stdin: Optional[BinaryIO] = None,
    stdout: Optional[BinaryIO] = None,
    frame_cap: int = DEFAULT_FRAME_CAP,
) -> int:
    """Handshake, then answer probes until shutdown or EOF.

    Returns a process exit code: 0 after a clean shutdown or a clean EOF, 1
    when the transport fails (truncated or oversized frame, closed pipe). A
    failing callback never ends the loop; it becomes an error response and
    the next request is served.
    """
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer

    def send(payload: dict[str, Any]) -> None:
        stdout.write(encode_frame(payload, frame_cap=frame_cap))
        stdout.flush()

    try:
        send(callbacks.handshake())
        while True:
            request = read_frame(stdin, frame_cap)
            if request is None:
                return 0
            try:
                payload = _encode_response(_dispatch(callbacks, request))
            except AdapterError as err:
                payload = {"ok": False, "kind": err.kind, "error": err.message}
            except Exception as exc:  # noqa: BLE001 - message must cross verbatim
                payload = {
                    "ok": False,
                    "kind": "runtime_error",
                    "error": f"{type(exc).__name__}: {exc}",
                }
            send(payload)
            if request.get("op") == "shutdown" and payload["ok"]:
                return 0
    except (OSError, ProtocolError):
        return 1


__all__ = [
    "AdapterCallbacks",
    "AdapterError",
    "DTYPE_TAGS",
    "Tensor",
    "encode_artifact",
    "serve",
]
