"""Adapter-side implementation of the difftrain wire protocol.

The package has two halves: an SDK (:class:`AdapterCallbacks` plus
:func:`serve`) that lets any runtime answer verification probes over standard
streams, and an example SFT runtime that proves the cross-process boundary
end to end. Nothing here imports from the engine.
"""
from .example_runtime import ExampleExternalRuntime, build_callbacks
from .golden import golden_fixture_bytes, golden_fixture_emit
from .protocol import (
    DEFAULT_FRAME_CAP,
    PROTOCOL_VERSION,
    ProtocolError,
    decode_frame,
    encode_frame,
    iter_frames,
    read_frame,
)
from .sdk import AdapterCallbacks, AdapterError, Tensor, encode_artifact, serve

__version__ = "0.1.0"

__all__ = [
    "AdapterCallbacks",
    "AdapterError",
    "DEFAULT_FRAME_CAP",
    "ExampleExternalRuntime",
    "PROTOCOL_VERSION",
    "ProtocolError",
    "Tensor",
    "build_callbacks",
    "decode_frame",
    "encode_artifact",
    "encode_frame",
    "golden_fixture_bytes",
    "golden_fixture_emit",
    "iter_frames",
    "read_frame",
    "serve",
]
