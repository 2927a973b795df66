"""Code-execution backends for multi-round episodes.

An executor turns a code snippet into (output text, status). Production use
pools out-of-process interpreter workers that speak line-delimited JSON over
stdin/stdout; tests and dry runs use an in-process callable. Pool leases are
exclusive: one task holds one worker at a time.
"""

from __future__ import annotations

import json
import subprocess
import sys
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from queue import Queue
from typing import Callable, Iterator, Sequence

from .core import STATUS_ERROR, STATUS_OK, STATUS_TIMEOUT

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class ExecOutcome:
    output: str
    status: str
    duration_ms: float = 0.0


class ExecutorFailure(RuntimeError):
    """The executor itself failed (dead worker, protocol violation)."""


class CallableExecutor:
    """Wraps a function(code) -> ExecOutcome | str; str means status ok."""

    def __init__(self, fn: Callable[[str], "ExecOutcome | str"]):
        self._fn = fn

    def run(self, code: str, timeout_ms: int = 10_000, max_output_bytes: int = 65_536) -> ExecOutcome:
        out = self._fn(code)
        if isinstance(out, str):
            return ExecOutcome(out, STATUS_OK)
        return out

    def close(self) -> None:
        pass


class WorkerProcessExecutor:
    """Client for one interpreter worker subprocess.

    Protocol: the worker announces {"ready":true,"protocol":1} on startup,
    then answers each request line with exactly one response line, in order.
    """

    def __init__(self, argv: Sequence[str], startup_timeout_s: float = 10.0):
        self._proc = subprocess.Popen(
            list(argv),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
        )
        self._lock = threading.Lock()
        self._next_id = 0
        ready_line = self._readline(startup_timeout_s)
        try:
            ready = json.loads(ready_line)
        except json.JSONDecodeError as exc:
            raise ExecutorFailure(f"bad worker handshake: {ready_line!r}") from exc
        if not ready.get("ready") or ready.get("protocol") != PROTOCOL_VERSION:
            raise ExecutorFailure(f"unsupported worker handshake: {ready}")

    def _readline(self, timeout_s: float) -> str:
        # the worker responds promptly or enforces its own timeouts, so a
        # watchdog thread is enough to avoid hanging on a dead process
        result: dict[str, str] = {}

        def read() -> None:
            assert self._proc.stdout is not None
            result["line"] = self._proc.stdout.readline()

        t = threading.Thread(target=read, daemon=True)
        t.start()
        t.join(timeout_s)
        if "line" not in result or not result["line"]:
            self._proc.kill()
            raise ExecutorFailure("worker did not respond")
        return result["line"]

    def _roundtrip(self, request: dict, timeout_s: float) -> dict:
        assert self._proc.stdin is not None
        with self._lock:
            self._proc.stdin.write(json.dumps(request, separators=(",", ":")) + "\n")
            self._proc.stdin.flush()
            line = self._readline(timeout_s)
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExecutorFailure(f"bad worker response: {line!r}") from exc

    def run(self, code: str, timeout_ms: int = 10_000, max_output_bytes: int = 65_536) -> ExecOutcome:
        req_id = f"r{self._next_id}"
        self._next_id += 1
        resp = self._roundtrip(
            {"id": req_id, "code": code, "timeout_ms": timeout_ms, "max_output_bytes": max_output_bytes},
            timeout_s=timeout_ms / 1000.0 + 10.0,
        )
        if resp.get("id") != req_id:
            raise ExecutorFailure(f"response id mismatch: {resp}")
        status = resp.get("status", STATUS_ERROR)
        if status not in (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT):
            raise ExecutorFailure(f"bad status in response: {resp}")
        output = resp.get("stdout", "")
        if status == STATUS_ERROR and resp.get("stderr"):
            output = output + resp["stderr"]
        return ExecOutcome(output=output, status=status, duration_ms=float(resp.get("duration_ms", 0.0)))

    def reset(self) -> None:
        req_id = f"r{self._next_id}"
        self._next_id += 1
        resp = self._roundtrip({"id": req_id, "reset": True}, timeout_s=10.0)
        if not resp.get("ack"):
            raise ExecutorFailure(f"reset not acknowledged: {resp}")

    def close(self) -> None:
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=2)
        except Exception:
            self._proc.kill()


def default_worker_argv() -> list[str]:
    """Command for the companion sandbox worker package, if installed."""
    return [sys.executable, "-m", "sandbox_exec.worker"]


class ExecutorPool:
    """Fixed pool of executors with exclusive leases."""

    def __init__(self, factory: Callable[[], object], size: int = 1):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._all = [factory() for _ in range(size)]
        self._free: Queue = Queue()
        for ex in self._all:
            self._free.put(ex)

    @contextmanager
    def lease(self) -> Iterator:
        ex = self._free.get()
        try:
            yield ex
        finally:
            self._free.put(ex)

    def close(self) -> None:
        for ex in self._all:
            close = getattr(ex, "close", None)
            if close:
                close()
