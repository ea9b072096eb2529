"""Wire protocol and artifact model.

Frames are a 4-byte big-endian unsigned length followed by that many bytes of
UTF-8 JSON with canonical (sorted) key order. Tensor payloads are base64 of
little-endian 32-bit floats regardless of the declared origin dtype; the tag
records provenance only. Every observable value is either Ok (a tensor or a
string list) or Bottom, a failure symbol carrying a reason and the verbatim
error string.
"""
from __future__ import annotations

import base64
import binascii
import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

import numpy as np

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_FRAME_CAP = 256 * 1024 * 1024
_HEADER = struct.Struct(">I")

# Largest magnitude an i64-tagged value can have and still round-trip through
# the 32-bit float wire format exactly.
_I64_EXACT_BOUND = 2 ** 24


class FailureReason(str, enum.Enum):
    INIT_ERROR = "init_error"
    TIMEOUT = "timeout"
    NONFINITE = "nonfinite"
    SCHEMA_MISMATCH = "schema_mismatch"
    MISSING_ARTIFACT = "missing_artifact"
    RUNTIME_ERROR = "runtime_error"
    OOM_LIKE = "oom_like"
    PROTOCOL_ERROR = "protocol_error"


class DtypeTag(str, enum.Enum):
    F32 = "f32"
    F16 = "f16"
    BF16 = "bf16"
    I64 = "i64"
    BOOL = "bool"


class ProtocolError(Exception):
    """Malformed frame or payload; offset points at the failing byte/field."""

    def __init__(self, message: str, offset: int = 0, frame_cap_breach: bool = False):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset
        self.frame_cap_breach = frame_cap_breach


@dataclass(frozen=True)
class Bottom:
    """Failure symbol: comparing anything against Bottom is a hard failure."""

    reason: FailureReason
    error: str

    def __bool__(self) -> bool:
        return False


@dataclass(eq=False)
class TensorArtifact:
    """Named tensor with f32-normalized data and a declared origin dtype."""

    name: str
    shape: tuple[int, ...]
    dtype: DtypeTag
    data: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        arr = np.asarray(self.data)
        if arr.dtype != np.float32:
            arr = _to_f32(self.name, arr, self.dtype)
        self.data = arr.reshape(-1)
        expected = _numel(self.shape)
        if self.data.size != expected:
            raise ValueError(
                f"artifact '{self.name}': data length {self.data.size} does not "
                f"match shape {list(self.shape)} (expected {expected})"
            )

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Bottom):
            return False
        if not isinstance(other, TensorArtifact):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "shape": list(self.shape),
            "dtype": self.dtype.value,
            "data": base64.b64encode(self.data.astype("<f4").tobytes()).decode("ascii"),
        }


@dataclass(frozen=True)
class StringListArtifact:
    name: str
    values: tuple[str, ...]

    def to_json_dict(self) -> dict[str, Any]:
        return {"strings": list(self.values)}


ArtifactValue = Union[TensorArtifact, StringListArtifact, Bottom]


def is_bottom(value: object) -> bool:
    return isinstance(value, Bottom)


@dataclass
class ArtifactSet:
    """Artifacts returned by one probe, keyed by name.

    Lookups never raise: a missing name comes back as Bottom so downstream
    comparisons degrade to hard failures instead of exceptions.
    """

    probe_op: str
    values: dict[str, ArtifactValue] = field(default_factory=dict)

    def get(self, name: str, error: Optional[str] = None) -> ArtifactValue:
        if name in self.values:
            return self.values[name]
        return Bottom(
            FailureReason.MISSING_ARTIFACT,
            error or f"missing artifact '{name}' in {self.probe_op} response",
        )

    def names(self) -> list[str]:
        return sorted(self.values)

    def with_prefix(self, prefix: str) -> dict[str, ArtifactValue]:
        return {k: v for k, v in self.values.items() if k.startswith(prefix)}


def _numel(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        if d < 0:
            raise ValueError(f"negative dimension {d} in shape {list(shape)}")
        n *= d
    return n


def _to_f32(name: str, arr: np.ndarray, dtype: DtypeTag) -> np.ndarray:
    if dtype is DtypeTag.BOOL:
        return arr.astype(bool).astype(np.float32)
    if dtype is DtypeTag.I64:
        ints = arr.astype(np.int64)
        if ints.size and np.abs(ints).max() > _I64_EXACT_BOUND:
            log.warning(
                "artifact '%s': i64 values exceed the exact f32 range and were rounded", name
            )
        return ints.astype(np.float32)
    return arr.astype(np.float32)


def normalize_to_f32(artifact: TensorArtifact) -> TensorArtifact:
    """Idempotent: construction already stores 32-bit float semantics."""
    return artifact


def _check_finite_scalars(payload: Any, path: str = "$") -> None:
    if isinstance(payload, float):
        if not math.isfinite(payload):
            raise ProtocolError(f"non-finite number at {path} rejected at encode time")
    elif isinstance(payload, dict):
        for key, value in payload.items():
            _check_finite_scalars(value, f"{path}.{key}")
    elif isinstance(payload, (list, tuple)):
        for i, value in enumerate(payload):
            _check_finite_scalars(value, f"{path}[{i}]")


def _jsonify(payload: Any) -> Any:
    if isinstance(payload, (TensorArtifact, StringListArtifact)):
        return payload.to_json_dict()
    if isinstance(payload, dict):
        return {k: _jsonify(v) for k, v in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_jsonify(v) for v in payload]
    if isinstance(payload, enum.Enum):
        return payload.value
    if isinstance(payload, (np.integer,)):
        return int(payload)
    if isinstance(payload, (np.floating,)):
        return float(payload)
    if isinstance(payload, np.bool_):
        return bool(payload)
    return payload


def encode_message(payload: dict[str, Any], frame_cap: int = DEFAULT_FRAME_CAP) -> bytes:
    """Serialize one frame. Non-finite scalars outside tensor data are refused;
    tensor data may legitimately carry NaN/Inf and is scanned downstream."""
    body_obj = _jsonify(payload)
    _check_finite_scalars(body_obj)
    body = json.dumps(body_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > frame_cap:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds cap {frame_cap}", frame_cap_breach=True)
    return _HEADER.pack(len(body)) + body


def decode_message(buf: bytes, frame_cap: int = DEFAULT_FRAME_CAP) -> tuple[dict[str, Any], int]:
    """Decode one frame from the head of ``buf``.

    Returns (payload, bytes consumed). Raises ProtocolError on a short header,
    truncated body, cap breach, bad JSON, or a payload that is not an object.
    """
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"short frame header: {len(buf)} of 4 bytes", offset=len(buf))
    (length,) = _HEADER.unpack_from(buf)
    if length > frame_cap:
        raise ProtocolError(
            f"declared frame length {length} exceeds cap {frame_cap}",
            offset=0,
            frame_cap_breach=True,
        )
    end = _HEADER.size + length
    if len(buf) < end:
        raise ProtocolError(
            f"truncated frame body: have {len(buf) - _HEADER.size} of {length} bytes",
            offset=len(buf),
        )
    try:
        payload = json.loads(buf[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = _HEADER.size + getattr(exc, "pos", 0)
        raise ProtocolError(f"invalid frame body: {exc}", offset=offset) from exc
    if not isinstance(payload, dict):
        raise ProtocolError("frame payload must be a JSON object", offset=_HEADER.size)
    return payload, end


def decode_artifact(name: str, raw: Any) -> ArtifactValue:
    """Decode one artifact entry from a response payload."""
    if not isinstance(raw, dict):
        raise ProtocolError(f"artifact '{name}' must be an object")
    if "strings" in raw:
        values = raw["strings"]
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise ProtocolError(f"artifact '{name}': strings must be a list of strings")
        return StringListArtifact(name=name, values=tuple(values))
    for key in ("shape", "dtype", "data"):
        if key not in raw:
            raise ProtocolError(f"artifact '{name}' missing '{key}'")
    try:
        dtype = DtypeTag(raw["dtype"])
    except ValueError:
        raise ProtocolError(f"artifact '{name}': unknown dtype tag {raw['dtype']!r}") from None
    shape = raw["shape"]
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise ProtocolError(f"artifact '{name}': shape must be a list of non-negative ints")
    try:
        blob = base64.b64decode(raw["data"], validate=True)
    except (binascii.Error, TypeError) as exc:
        raise ProtocolError(f"artifact '{name}': bad base64 data: {exc}") from exc
    expected = _numel(tuple(shape)) * 4
    if len(blob) != expected:
        raise ProtocolError(
            f"artifact '{name}': data length {len(blob)} does not match shape "
            f"{shape} (expected {expected} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return TensorArtifact(name=name, shape=tuple(shape), dtype=dtype, data=data)


def decode_response_artifacts(payload: dict[str, Any], probe_op: str) -> ArtifactSet:
    raw = payload.get("artifacts", {})
    if not isinstance(raw, dict):
        raise ProtocolError("response artifacts must be an object")
    out = ArtifactSet(probe_op=probe_op)
    for name in sorted(raw):
        out.values[name] = decode_artifact(name, raw[name])
    return out


class FrameDecoder:
    """Incremental frame reader; chunk boundaries never change the output."""

    def __init__(self, frame_cap: int = DEFAULT_FRAME_CAP):
        self._buf = bytearray()
        self._cap = frame_cap

    def feed(self, chunk: bytes) -> Iterator[dict[str, Any]]:
        self._buf.extend(chunk)
        while True:
            if len(self._buf) < _HEADER.size:
                return
            (length,) = _HEADER.unpack_from(self._buf)
            if length > self._cap:
                raise ProtocolError(
                    f"declared frame length {length} exceeds cap {self._cap}",
                    frame_cap_breach=True,
                )
            end = _HEADER.size + length
            if len(self._buf) < end:
                return
            payload, consumed = decode_message(bytes(self._buf[:end]), frame_cap=self._cap)
            del self._buf[:consumed]
            yield payload

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def scalar(name: str, value: float, dtype: DtypeTag = DtypeTag.F32) -> TensorArtifact:
    return TensorArtifact(name=name, shape=(), dtype=dtype, data=np.asarray([value], dtype=np.float64))


__all__ = [
    "ArtifactSet",
    "ArtifactValue",
    "Bottom",
    "DEFAULT_FRAME_CAP",
    "DtypeTag",
    "FailureReason",
    "FrameDecoder",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "StringListArtifact",
    "TensorArtifact",
    "decode_artifact",
    "decode_message",
    "decode_response_artifacts",
    "encode_message",
    "is_bottom",
    "normalize_to_f32",
    "scalar",
]
