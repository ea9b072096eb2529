"""Runtime lifecycles: launching, probing, timing out, tearing down.

Two transports sit behind one handle. In-process toys run each probe on a
worker thread so a hang can be abandoned; external runtimes speak the framed
stdio protocol from a child process. Either way the first whole-probe failure
poisons the handle and every later probe replays that failure without touching
the runtime again.
"""
from __future__ import annotations

import collections
import logging
import os
import selectors
import shutil
import subprocess
import threading
import time
from typing import Any, Mapping, Optional, Union

import numpy as np

from .codec import (
    DEFAULT_FRAME_CAP,
    PROTOCOL_VERSION,
    ArtifactSet,
    Bottom,
    FailureReason,
    FrameDecoder,
    ProtocolError,
    TensorArtifact,
    decode_response_artifacts,
    encode_message,
)
from .contract import DEFAULT_PROBE_TIMEOUT, ConfigError
from .toys import FaultId, ToyFault, build_from_descriptor

log = logging.getLogger(__name__)

TERMINATE_GRACE_S = 5.0
_POLL_S = 0.05
_STDERR_TAIL = 50
_READ_CHUNK = 65536


class UnresolvableRuntime(Exception):
    """The launch descriptor points at nothing that can run."""


class _TransportFailure(Exception):
    def __init__(self, bottom: Bottom):
        super().__init__(bottom.error)
        self.bottom = bottom


def normalize_descriptor(raw: Any) -> dict[str, Any]:
    """Validate a launch descriptor: either {"toy": name, seed?, fault?} for a
    registered in-process toy or {"cmd": argv, cwd?, env?} for an external
    runtime. A malformed descriptor is a configuration error; a well-formed
    descriptor naming something that does not exist surfaces later, at spawn,
    as an unresolvable runtime."""
    if not isinstance(raw, Mapping):
        raise ConfigError(f"launch descriptor must be an object, got {type(raw).__name__}")
    if "toy" in raw:
        extra = set(raw) - {"toy", "seed", "fault"}
        if extra:
            raise ConfigError(f"unknown toy descriptor keys: {sorted(extra)}")
        name = raw["toy"]
        if not isinstance(name, str) or not name:
            raise ConfigError("toy descriptor requires a non-empty string name")
        seed = raw.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ConfigError("toy seed must be an integer")
        fault = raw.get("fault")
        if fault is not None:
            try:
                fault = FaultId(fault).value
            except ValueError:
                raise ConfigError(f"unknown fault id {fault!r}") from None
        return {"kind": "toy", "toy": name, "seed": seed, "fault": fault}
    if "cmd" in raw:
        extra = set(raw) - {"cmd", "cwd", "env"}
        if extra:
            raise ConfigError(f"unknown cmd descriptor keys: {sorted(extra)}")
        cmd = raw["cmd"]
        if (
            not isinstance(cmd, (list, tuple))
            or not cmd
            or not all(isinstance(part, str) for part in cmd)
        ):
            raise ConfigError("cmd descriptor requires a non-empty list of strings")
        cwd = raw.get("cwd")
        if cwd is not None and not isinstance(cwd, str):
            raise ConfigError("cmd cwd must be a string path")
        env = raw.get("env")
        if env is not None and (
            not isinstance(env, Mapping)
            or not all(isinstance(k, str) and isinstance(v, str) for k, v in env.items())
        ):
            raise ConfigError("cmd env must map strings to strings")
        return {"kind": "cmd", "cmd": list(cmd), "cwd": cwd, "env": dict(env) if env else None}
    raise ConfigError("launch descriptor requires a 'toy' or 'cmd' key")


class _ToyTransport:
    def __init__(self, descriptor: dict[str, Any]):
        try:
            self.toy = build_from_descriptor(descriptor)
        except KeyError:
            raise UnresolvableRuntime(
                f"no runtime registered under toy name {descriptor['toy']!r}"
            ) from None

    def handshake(self, deadline: float) -> dict[str, Any]:
        return self.toy.handshake()

    def request(self, payload: dict[str, Any], deadline: float) -> ArtifactSet:
        op = str(payload.get("op", "?"))
        timeout = max(deadline - time.monotonic(), 0.0)
        box: dict[str, Any] = {}
        cancel = threading.Event()
        self.toy.cancel_event = cancel

        def work() -> None:
            try:
                box["artifacts"] = self.toy.handle(payload)
            except ToyFault as fault:
                box["bottom"] = Bottom(fault.reason, fault.message)
            except Exception as exc:  # noqa: BLE001 - runtime faults become Bottom
                box["bottom"] = Bottom(
                    FailureReason.RUNTIME_ERROR, f"{type(exc).__name__}: {exc}"
                )

        worker = threading.Thread(target=work, name=f"toy-{op}", daemon=True)
        worker.start()
        worker.join(timeout)
        if worker.is_alive():
            cancel.set()
            raise _TransportFailure(
                Bottom(FailureReason.TIMEOUT, f"no response to '{op}' within {timeout:.1f}s")
            )
        if "bottom" in box:
            raise _TransportFailure(box["bottom"])
        return ArtifactSet(probe_op=op, values=dict(box["artifacts"]))

    def close(self) -> None:
        pass


class _ProcessTransport:
    def __init__(self, descriptor: dict[str, Any], frame_cap: int):
        cmd = descriptor["cmd"]
        if shutil.which(cmd[0]) is None and not os.path.exists(cmd[0]):
            raise UnresolvableRuntime(f"runtime executable {cmd[0]!r} not found")
        env = descriptor.get("env")
        try:
            self.proc = subprocess.Popen(
                cmd,
                cwd=descriptor.get("cwd"),
                env={**os.environ, **env} if env else None,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                bufsize=0,
            )
        except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
            raise UnresolvableRuntime(f"cannot launch {cmd[0]!r}: {exc}") from exc
        self.frame_cap = frame_cap
        self.decoder = FrameDecoder(frame_cap)
        self.frames: collections.deque[dict[str, Any]] = collections.deque()
        self.stderr_tail: collections.deque[str] = collections.deque(maxlen=_STDERR_TAIL)
        self._stderr_thread = threading.Thread(
            target=self._drain_stderr, name="runtime-stderr", daemon=True
        )
        self._stderr_thread.start()
        self.selector = selectors.DefaultSelector()
        self.selector.register(self.proc.stdout, selectors.EVENT_READ)

    def _drain_stderr(self) -> None:
        stream = self.proc.stderr
        for line in iter(stream.readline, b""):
            self.stderr_tail.append(line.decode("utf-8", errors="replace").rstrip("\n"))

    def _tail(self) -> str:
        if not self.stderr_tail:
            return ""
        return " | stderr: " + " / ".join(list(self.stderr_tail)[-5:])

    def _read_frame(
        self, deadline: float, op: str, exit_reason: FailureReason
    ) -> dict[str, Any]:
        timeout = max(deadline - time.monotonic(), 0.0)
        while True:
            if self.frames:
                return self.frames.popleft()
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self._kill_ladder()
                raise _TransportFailure(
                    Bottom(
                        FailureReason.TIMEOUT,
                        f"no response to '{op}' within {timeout:.1f}s",
                    )
                )
            if not self.selector.select(min(remaining, _POLL_S)):
                continue
            chunk = os.read(self.proc.stdout.fileno(), _READ_CHUNK)
            if chunk == b"":
                rc = self.proc.wait()
                raise _TransportFailure(
                    Bottom(
                        exit_reason,
                        f"runtime exited with code {rc} during '{op}'{self._tail()}",
                    )
                )
            try:
                for frame in self.decoder.feed(chunk):
                    self.frames.append(frame)
            except ProtocolError as err:
                self._kill_ladder()
                reason = (
                    FailureReason.OOM_LIKE
                    if err.frame_cap_breach
                    else FailureReason.PROTOCOL_ERROR
                )
                raise _TransportFailure(Bottom(reason, str(err))) from err

    def handshake(self, deadline: float) -> dict[str, Any]:
        return self._read_frame(deadline, "handshake", FailureReason.INIT_ERROR)

    def request(self, payload: dict[str, Any], deadline: float) -> ArtifactSet:
        op = str(payload.get("op", "?"))
        try:
            buf = encode_message(payload, self.frame_cap)
        except ProtocolError as err:
            reason = (
                FailureReason.OOM_LIKE if err.frame_cap_breach else FailureReason.PROTOCOL_ERROR
            )
            raise _TransportFailure(Bottom(reason, str(err))) from err
        try:
            self.proc.stdin.write(buf)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            rc = self.proc.poll()
            raise _TransportFailure(
                Bottom(
                    FailureReason.RUNTIME_ERROR,
                    f"runtime exited (code {rc}) while receiving '{op}'{self._tail()}",
                )
            ) from None
        response = self._read_frame(deadline, op, FailureReason.RUNTIME_ERROR)
        if response.get("ok") is True:
            try:
                return decode_response_artifacts(response, op)
            except ProtocolError as err:
                raise _TransportFailure(
                    Bottom(FailureReason.PROTOCOL_ERROR, str(err))
                ) from err
        if response.get("ok") is False:
            try:
                reason = FailureReason(response.get("kind"))
            except ValueError:
                reason = FailureReason.RUNTIME_ERROR
            error = str(response.get("error", "runtime reported an unspecified failure"))
            raise _TransportFailure(Bottom(reason, error))
        raise _TransportFailure(
            Bottom(FailureReason.PROTOCOL_ERROR, f"response to '{op}' carries no 'ok' field")
        )

    def _kill_ladder(self) -> None:
        if self.proc.poll() is not None:
            return
        self.proc.terminate()
        try:
            self.proc.wait(timeout=TERMINATE_GRACE_S)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()

    def close(self) -> None:
        try:
            if self.proc.stdin and not self.proc.stdin.closed:
                self.proc.stdin.close()
        except OSError:
            pass
        if self.proc.poll() is None:
            try:
                self.proc.wait(timeout=0.5)
            except subprocess.TimeoutExpired:
                self._kill_ladder()
        self.selector.close()
        for stream in (self.proc.stdout, self.proc.stderr):
            try:
                if stream and not stream.closed:
                    stream.close()
            except OSError:
                pass


_Transport = Union[_ToyTransport, _ProcessTransport]


def _scan_nonfinite(artifacts: ArtifactSet) -> ArtifactSet:
    for name, value in list(artifacts.values.items()):
        if isinstance(value, TensorArtifact) and not np.isfinite(value.data).all():
            artifacts.values[name] = Bottom(
                FailureReason.NONFINITE, f"non-finite values in artifact '{name}'"
            )
    return artifacts


class RuntimeHandle:
    """One runtime lifecycle bound to a launch descriptor."""

    def __init__(
        self,
        descriptor: Mapping[str, Any],
        role: str,
        probe_timeout: float = DEFAULT_PROBE_TIMEOUT,
        frame_cap: int = DEFAULT_FRAME_CAP,
    ):
        self.descriptor = normalize_descriptor(descriptor)
        self.role = role
        self.probe_timeout = float(probe_timeout)
        self.frame_cap = int(frame_cap)
        self.poison: Optional[Bottom] = None
        self.handshake: Optional[dict[str, Any]] = None
        self._transport: Optional[_Transport] = None

    @property
    def capabilities(self) -> tuple[str, ...]:
        if not self.handshake:
            return ()
        caps = self.handshake.get("capabilities")
        if isinstance(caps, (list, tuple)):
            return tuple(str(c) for c in caps)
        return ()

    @property
    def declared_method(self) -> Optional[str]:
        if not self.handshake:
            return None
        method = self.handshake.get("method")
        return str(method) if method is not None else None

    def spawn(self) -> Optional[Bottom]:
        """Launch the runtime and read its capability declaration.

        Returns None on success and the poisoning Bottom otherwise. Raises
        UnresolvableRuntime when the descriptor names nothing launchable."""
        if self.descriptor["kind"] == "toy":
            self._transport = _ToyTransport(self.descriptor)
        else:
            self._transport = _ProcessTransport(self.descriptor, self.frame_cap)
        deadline = time.monotonic() + self.probe_timeout
        try:
            declared = self._transport.handshake(deadline)
        except _TransportFailure as fail:
            self.poison = fail.bottom
            log.warning("%s runtime failed during handshake: %s", self.role, fail.bottom.error)
            return self.poison
        version = declared.get("protocol")
        if version != PROTOCOL_VERSION:
            self.poison = Bottom(
                FailureReason.PROTOCOL_ERROR,
                f"unsupported protocol version {version!r} (engine speaks {PROTOCOL_VERSION})",
            )
            return self.poison
        self.handshake = declared
        log.info(
            "%s runtime up: method=%s capabilities=%s",
            self.role,
            declared.get("method"),
            list(self.capabilities),
        )
        return None

    def run_probe(self, request: dict[str, Any]) -> Union[ArtifactSet, Bottom]:
        op = str(request.get("op", "?"))
        if self.poison is not None:
            return self.poison
        if self._transport is None:
            return Bottom(FailureReason.RUNTIME_ERROR, "runtime was never spawned")
        deadline = time.monotonic() + self.probe_timeout
        try:
            artifacts = self._transport.request(request, deadline)
        except _TransportFailure as fail:
            self.poison = fail.bottom
            log.warning(
                "%s runtime probe '%s' failed (%s): %s",
                self.role,
                op,
                fail.bottom.reason.value,
                fail.bottom.error,
            )
            return fail.bottom
        return _scan_nonfinite(artifacts)

    def reinitialize(self) -> Optional[Bottom]:
        """Tear the runtime down and relaunch it from the same descriptor."""
        self.close()
        self.poison = None
        self.handshake = None
        try:
            return self.spawn()
        except UnresolvableRuntime as exc:
            self.poison = Bottom(FailureReason.INIT_ERROR, str(exc))
            return self.poison

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
            self._transport = None


__all__ = [
    "RuntimeHandle",
    "TERMINATE_GRACE_S",
    "UnresolvableRuntime",
    "normalize_descriptor",
]
