"""Framing layer of the verification wire protocol, adapter side.

A frame is a 4-byte big-endian unsigned length followed by that many bytes of
canonical UTF-8 JSON: sorted keys, compact separators, no NaN. This module is
a from-scratch implementation that imports nothing from the engine; the two
codecs are kept in agreement by transcript and golden-fixture tests, and any
divergence between them is a finding, not an inconvenience.
"""
from __future__ import annotations

import json
import struct
from typing import Any, BinaryIO, Iterator, Optional

PROTOCOL_VERSION = 1
DEFAULT_FRAME_CAP = 256 * 1024 * 1024

_HEADER = struct.Struct(">I")


class ProtocolError(Exception):
    """Malformed, truncated, or oversized frame."""


def canonical_body(payload: dict[str, Any]) -> bytes:
    return json.dumps(
        payload, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")


def encode_frame(payload: dict[str, Any], frame_cap: int = DEFAULT_FRAME_CAP) -> bytes:
    body = canonical_body(payload)
    if len(body) > frame_cap:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds cap {frame_cap}")
    return _HEADER.pack(len(body)) + body


def decode_frame(
    buf: bytes, frame_cap: int = DEFAULT_FRAME_CAP
) -> tuple[dict[str, Any], int]:
    """Decode one frame from the head of ``buf``; returns (payload, consumed)."""
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"short frame header: {len(buf)} of {_HEADER.size} bytes")
    (length,) = _HEADER.unpack_from(buf)
    if length > frame_cap:
        raise ProtocolError(f"declared frame length {length} exceeds cap {frame_cap}")
    end = _HEADER.size + length
    if len(buf) < end:
        raise ProtocolError(
            f"truncated frame body: have {len(buf) - _HEADER.size} of {length} bytes"
        )
    try:
        payload = json.loads(buf[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"invalid frame body: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolError("frame payload must be a JSON object")
    return payload, end


def iter_frames(
    buf: bytes, frame_cap: int = DEFAULT_FRAME_CAP
) -> Iterator[dict[str, Any]]:
    """Every frame in a byte string, in order; raises on trailing garbage."""
    offset = 0
    while offset < len(buf):
        payload, consumed = decode_frame(buf[offset:], frame_cap)
        offset += consumed
        yield payload


def _read_exact(stream: BinaryIO, n: int) -> Optional[bytes]:
    chunks = bytearray()
    while len(chunks) < n:
        got = stream.read(n - len(chunks))
        if not got:
            return None
        chunks.extend(got)
    return bytes(chunks)


def read_frame(
    stream: BinaryIO, frame_cap: int = DEFAULT_FRAME_CAP
) -> Optional[dict[str, Any]]:
    """One frame from a blocking byte stream, or None on clean EOF.

    EOF in the middle of a frame is not clean and raises.
    """
    header = _read_exact(stream, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > frame_cap:
        raise ProtocolError(f"declared frame length {length} exceeds cap {frame_cap}")
    body = _read_exact(stream, length)
    if body is None:
        raise ProtocolError(f"truncated frame body: expected {length} bytes")
    payload, _ = decode_frame(header + body, frame_cap=frame_cap)
    return payload


__all__ = [
    "DEFAULT_FRAME_CAP",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "canonical_body",
    "decode_frame",
    "encode_frame",
    "iter_frames",
    "read_frame",
]
