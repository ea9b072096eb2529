"""Length-prefixed stdio server wrapping a toy runtime.

This is the external-process face of the toys: the same probe handlers, but
reached over the wire protocol instead of a function call. A crash index can
be armed to kill the process right before answering the n-th request, which
gives the engine's totality tests a runtime that dies at every possible point.
"""
from __future__ import annotations

import io
import os
import struct
import sys
from typing import Any, BinaryIO, Optional

from .codec import (
    DEFAULT_FRAME_CAP,
    ProtocolError,
    decode_message,
    encode_message,
)
from .toys import ToyFault

_HEADER = struct.Struct(">I")


def _read_exact(stream: BinaryIO, n: int) -> Optional[bytes]:
    chunks = bytearray()
    while len(chunks) < n:
        got = stream.read(n - len(chunks))
        if not got:
            return None
        chunks.extend(got)
    return bytes(chunks)


def read_frame(stream: BinaryIO, frame_cap: int = DEFAULT_FRAME_CAP) -> Optional[dict[str, Any]]:
    """One request frame, or None on clean EOF."""
    header = _read_exact(stream, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > frame_cap:
        raise ProtocolError(
            f"declared frame length {length} exceeds cap {frame_cap}", frame_cap_breach=True
        )
    body = _read_exact(stream, length)
    if body is None:
        raise ProtocolError(f"truncated frame body: expected {length} bytes")
    payload, _ = decode_message(header + body, frame_cap=frame_cap)
    return payload


def serve(
    toy: Any,
    stdin: Optional[BinaryIO] = None,
    stdout: Optional[BinaryIO] = None,
    frame_cap: int = DEFAULT_FRAME_CAP,
    crash_at_probe: Optional[int] = None,
) -> int:
    """Serve probes until shutdown or EOF; returns a process exit code.

    crash_at_probe=n kills the process (no response, no cleanup) upon receipt
    of the n-th request, counting from 0 after the handshake.
    """
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer

    def send(payload: dict[str, Any]) -> None:
        stdout.write(encode_message(payload, frame_cap=frame_cap))
        stdout.flush()

    send(toy.handshake())
    index = 0
    while True:
        try:
            request = read_frame(stdin, frame_cap)
        except ProtocolError:
            return 1
        if request is None:
            return 0
        if crash_at_probe is not None and index == crash_at_probe:
            # Simulated hard crash: no response, no goodbye.
            os._exit(17)
        index += 1
        op = request.get("op")
        try:
            artifacts = toy.handle(request)
        except ToyFault as fault:
            send({"ok": False, "kind": fault.reason.value, "error": str(fault)})
            continue
        except Exception as exc:  # noqa: BLE001 - verbatim message must cross the wire
            send({"ok": False, "kind": "runtime_error", "error": f"{type(exc).__name__}: {exc}"})
            continue
        send({"ok": True, "artifacts": dict(artifacts)})
        if op == "shutdown":
            return 0


def serve_buffer(toy: Any, frames: bytes) -> bytes:
    """In-memory variant for tests: feed encoded request frames, collect the
    byte stream the server would write."""
    out = io.BytesIO()
    serve(toy, stdin=io.BytesIO(frames), stdout=out)
    return out.getvalue()


__all__ = ["read_frame", "serve", "serve_buffer"]
