"""Wire-protocol client: any external process can serve eps-predictions.

Framing is newline-delimited JSON, one object per line, UTF-8, no pretty
printing. One request per evaluation; the server performs guidance
combination and returns the single combined estimate:

    request  {"id":N,"x_t":[...],"t":F,"cond":{"kind":"unconditional|image|image_text",
              "source_ref":S,"text_ref":T,"omega_s":F,"omega_y":F}}
    response {"id":N,"eps":[...]}  or  {"id":N,"error":"msg"}

One connection per endpoint; a reader thread demultiplexes responses by id,
so callers may issue up to ``max_batch`` concurrent requests, each blocking
only on its own response. stdio transport talks to a child process (requests
on its stdin, responses on its stdout, logs on stderr); tcp connects to a
listening server.
"""
from __future__ import annotations

import json
import socket
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .errors import BridgeProtocolError, BridgeServerError, BridgeTimeout
from .oracle import Condition, GuidanceParams


@dataclass(frozen=True)
class StdioTransport:
    argv: tuple

    def __post_init__(self):
        argv = tuple(str(a) for a in self.argv)
        object.__setattr__(self, "argv", argv)
        if not argv:
            raise ValueError("stdio transport needs a command line")


@dataclass(frozen=True)
class TcpTransport:
    host: str
    port: int

    def __post_init__(self):
        if not (0 < self.port < 65536):
            raise ValueError(f"port must lie in (0, 65536), got {self.port}")


@dataclass(frozen=True)
class BridgeEndpoint:
    transport: StdioTransport | TcpTransport
    timeout_ms: int = 10_000
    max_batch: int = 8

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError(f"timeout_ms must be > 0, got {self.timeout_ms}")
        if self.max_batch < 1:
            raise ValueError(f"max_batch must be >= 1, got {self.max_batch}")


class _Pending:
    __slots__ = ("event", "eps", "error")

    def __init__(self):
        self.event = threading.Event()
        self.eps = None
        self.error = None


class BridgeClient:
    """Blocking eps client over one connection, usable as the oracle callable."""

    def __init__(self, endpoint: BridgeEndpoint):
        self.endpoint = endpoint
        self._proc = None
        self._sock = None
        self._wfile = None
        self._rfile = None
        self._reader = None
        self._lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._abandoned: set[int] = set()
        self._next_id = 0
        self._slots = threading.Semaphore(endpoint.max_batch)
        self._dead: str | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "BridgeClient":
        t = self.endpoint.transport
        if isinstance(t, StdioTransport):
            self._proc = subprocess.Popen(
                list(t.argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
            self._wfile = self._proc.stdin
            self._rfile = self._proc.stdout
        else:
            self._sock = socket.create_connection((t.host, t.port))
            self._wfile = self._sock.makefile("w", encoding="utf-8", newline="\n")
            self._rfile = self._sock.makefile("r", encoding="utf-8")
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        return self

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
        if self._reader is not None:
            self._reader.join(timeout=5)
            self._reader = None

    def __enter__(self) -> "BridgeClient":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    # -- wire ---------------------------------------------------------------

    def _read_loop(self) -> None:
        try:
            for line in self._rfile:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                    rid = msg["id"]
                except (json.JSONDecodeError, TypeError, KeyError):
                    self._fail_all(f"unparseable response line: {line[:200]!r}")
                    return
                with self._lock:
                    pending = self._pending.pop(rid, None)
                    if pending is None:
                        if rid in self._abandoned:
                            self._abandoned.discard(rid)
                            continue
                        self._fail_all_locked(f"response id {rid!r} matches no pending request")
                        return
                if "error" in msg:
                    pending.error = BridgeServerError(str(msg["error"]))
                elif "eps" not in msg:
                    pending.error = BridgeProtocolError(f"response {rid} carries neither eps nor error")
                else:
                    pending.eps = msg["eps"]
                pending.event.set()
        except (OSError, ValueError):
            pass
        self._fail_all("connection closed")

    def _fail_all(self, reason: str) -> None:
        with self._lock:
            self._fail_all_locked(reason)

    def _fail_all_locked(self, reason: str) -> None:
        self._dead = reason
        for pending in self._pending.values():
            pending.error = BridgeProtocolError(reason)
            pending.event.set()
        self._pending.clear()

    def remote_eps(
        self,
        x_t: np.ndarray,
        t: float,
        cond: Condition,
        guidance: GuidanceParams,
    ) -> np.ndarray:
        """One round-trip: serialize, correlate by id, block for the answer."""
        x_t = np.asarray(x_t, dtype=float)
        if x_t.ndim != 1:
            raise ValueError(f"x_t must be a vector, got shape {x_t.shape}")
        self._slots.acquire()
        try:
            pending = _Pending()
            with self._lock:
                if self._dead is not None:
                    raise BridgeProtocolError(self._dead)
                rid = self._next_id
                self._next_id += 1
                self._pending[rid] = pending
            request = {
                "id": rid,
                "x_t": x_t.tolist(),
                "t": float(t),
                "cond": {
                    "kind": cond.kind,
                    "source_ref": cond.source_ref,
                    "text_ref": cond.text_ref,
                    "omega_s": float(guidance.omega_s),
                    "omega_y": float(guidance.omega_y),
                },
            }
            try:
                with self._lock:
                    self._wfile.write(json.dumps(request, separators=(",", ":")) + "\n")
                    self._wfile.flush()
            except (OSError, ValueError) as e:
                with self._lock:
                    self._pending.pop(rid, None)
                raise BridgeProtocolError(f"cannot send request {rid}: {e}") from None
            if not pending.event.wait(self.endpoint.timeout_ms / 1000.0):
                with self._lock:
                    if self._pending.pop(rid, None) is not None:
                        self._abandoned.add(rid)
                raise BridgeTimeout(
                    f"request {rid} timed out after {self.endpoint.timeout_ms} ms (retryable)"
                )
            if pending.error is not None:
                raise pending.error
            eps = np.asarray(pending.eps, dtype=float)
            if eps.shape != x_t.shape:
                raise BridgeProtocolError(
                    f"response {rid}: eps has {eps.shape[0] if eps.ndim == 1 else '?'} entries,"
                    f" request had {x_t.shape[0]}"
                )
            return eps
        finally:
            self._slots.release()

    # the oracle-callable interface used by the distillation loops
    def eps(self, x_t, t, cond, guidance):
        return self.remote_eps(x_t, t, cond, guidance)

    __call__ = eps


def remote_eps(
    endpoint: BridgeEndpoint,
    x_t: np.ndarray,
    t: float,
    cond: Condition,
    guidance: GuidanceParams,
) -> np.ndarray:
    """One-shot convenience: open a connection, make one query, close."""
    with BridgeClient(endpoint) as client:
        return client.remote_eps(x_t, t, cond, guidance)
