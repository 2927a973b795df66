"""Interpreter worker that executes code snippets under time and output
limits, speaking line-delimited JSON over stdin/stdout.

Protocol (UTF-8, one message per line, FIFO, exactly one response per
request):

    startup    -> {"ready": true, "protocol": 1}
    exec  req  <- {"id", "code", "timeout_ms", "max_output_bytes"}
          resp -> {"id", "status": "ok"|"error"|"timeout", "stdout",
                   "stderr", "duration_ms", "truncated"}
    reset req  <- {"id", "reset": true}
          resp -> {"id", "ack": true}

Every request executes in a freshly forked child process with its own
namespace, so snippets are isolated by default and a wall-clock timeout can
be enforced by hard-terminating the child (model-written code is assumed
adversarial; cooperative checking would not do). The child's std fds are
pointed at /dev/null so that even low-level writes cannot corrupt the
protocol stream; captured output travels back over a pipe.

The network/filesystem guards are best effort (socket creation and
write-mode open() are disabled inside the child). This is NOT a security
boundary for untrusted multi-tenant use; it is snippet hygiene for a
single-trust-domain training loop.
"""

from __future__ import annotations

import io
import json
import multiprocessing
import os
import sys
import time
import traceback
from typing import Any, TextIO

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_MS = 10_000
DEFAULT_MAX_OUTPUT_BYTES = 65_536
KILL_GRACE_S = 0.25

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"


class _CappedWriter(io.TextIOBase):
    """Stores at most `cap` bytes of written text; flags overflow."""

    def __init__(self, cap: int):
        self.cap = cap
        self.size = 0
        self.parts: list[str] = []
        self.truncated = False

    def writable(self) -> bool:
        return True

    def write(self, s: str) -> int:
        b = s.encode("utf-8", errors="replace")
        if self.size < self.cap:
            keep = self.cap - self.size
            if len(b) > keep:
                self.parts.append(b[:keep].decode("utf-8", errors="ignore"))
                self.truncated = True
            else:
                self.parts.append(s)
            self.size = min(self.cap, self.size + len(b))
        else:
            if b:
                self.truncated = True
        return len(s)

    def value(self) -> str:
        return "".join(self.parts)


def _install_guards() -> None:
    # block sockets and write-mode opens inside the child (best effort)
    import builtins
    import socket

    def _no_socket(*args, **kwargs):
        raise PermissionError("network access is disabled in the sandbox")

    socket.socket = _no_socket  # type: ignore[misc]
    real_open = builtins.open

    def guarded_open(file, mode="r", *args, **kwargs):
        if any(ch in str(mode) for ch in "wxa+"):
            raise PermissionError("file writes are disabled in the sandbox")
        return real_open(file, mode, *args, **kwargs)

    builtins.open = guarded_open  # type: ignore[assignment]


def _child_main(conn, code: str, max_output_bytes: int) -> None:
    devnull = os.open(os.devnull, os.O_RDWR)
    os.dup2(devnull, 0)
    os.dup2(devnull, 1)
    os.dup2(devnull, 2)
    out = _CappedWriter(max_output_bytes)
    err = _CappedWriter(max_output_bytes)
    sys.stdout = out  # type: ignore[assignment]
    sys.stderr = err  # type: ignore[assignment]
    _install_guards()
    status = STATUS_OK
    try:
        compiled = compile(code, "<snippet>", "exec")
        namespace: dict[str, Any] = {"__name__": "__main__"}
        exec(compiled, namespace)
    except BaseException:
        status = STATUS_ERROR
        traceback.print_exc(file=err)
    try:
        conn.send(
            {
                "status": status,
                "stdout": out.value(),
                "stderr": err.value(),
                "truncated": out.truncated or err.truncated,
            }
        )
        conn.close()
    except Exception:
        os._exit(1)


def execute(code: str, timeout_ms: int, max_output_bytes: int) -> dict[str, Any]:
    """Run one snippet in a fresh forked child; hard-kill on timeout."""
    ctx = multiprocessing.get_context("fork")
    parent_conn, child_conn = ctx.Pipe(duplex=False)
    proc = ctx.Process(target=_child_main, args=(child_conn, code, max_output_bytes))
    start = time.perf_counter()
    proc.start()
    child_conn.close()
    payload: dict[str, Any] | None = None
    timed_out = False
    if parent_conn.poll(timeout_ms / 1000.0):
        try:
            payload = parent_conn.recv()
        except EOFError:
            payload = None
    else:
        timed_out = True
    duration_ms = (time.perf_counter() - start) * 1000.0
    if proc.is_alive():
        proc.terminate()
        proc.join(KILL_GRACE_S)
        if proc.is_alive():
            proc.kill()
            proc.join()
    else:
        proc.join()
    parent_conn.close()
    if timed_out:
        return {
            "status": STATUS_TIMEOUT,
            "stdout": "",
            "stderr": f"execution exceeded {timeout_ms} ms and was terminated",
            "duration_ms": duration_ms,
            "truncated": False,
        }
    if payload is None:
        return {
            "status": STATUS_ERROR,
            "stdout": "",
            "stderr": "executor child exited without reporting a result",
            "duration_ms": duration_ms,
            "truncated": False,
        }
    payload["duration_ms"] = duration_ms
    return payload


def handle_line(line: str) -> dict[str, Any]:
    """One request line to one response object; never raises."""
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        return {
            "id": None,
            "status": STATUS_ERROR,
            "stdout": "",
            "stderr": f"malformed request line: {exc}",
            "duration_ms": 0.0,
            "truncated": False,
        }
    if not isinstance(req, dict):
        return {
            "id": None,
            "status": STATUS_ERROR,
            "stdout": "",
            "stderr": "request must be a JSON object",
            "duration_ms": 0.0,
            "truncated": False,
        }
    req_id = req.get("id")
    if req.get("reset"):
        # isolation is per request already; reset acknowledges and carries no state
        return {"id": req_id, "ack": True}
    try:
        code = req["code"]
        timeout_ms = int(req.get("timeout_ms", DEFAULT_TIMEOUT_MS))
        max_output = int(req.get("max_output_bytes", DEFAULT_MAX_OUTPUT_BYTES))
        if timeout_ms <= 0 or max_output <= 0:
            raise ValueError("timeout_ms and max_output_bytes must be positive")
        if not isinstance(code, str):
            raise ValueError("code must be a string")
    except (KeyError, ValueError, TypeError) as exc:
        return {
            "id": req_id,
            "status": STATUS_ERROR,
            "stdout": "",
            "stderr": f"bad request: {exc}",
            "duration_ms": 0.0,
            "truncated": False,
        }
    resp = execute(code, timeout_ms, max_output)
    resp["id"] = req_id
    return resp


def serve(stdin: TextIO | None = None, stdout: TextIO | None = None) -> None:
    """Serve requests until stdin closes; survives any single-request failure."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    stdout.write(json.dumps({"ready": True, "protocol": PROTOCOL_VERSION}) + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        resp = handle_line(line)
        stdout.write(json.dumps(resp, ensure_ascii=False) + "\n")
        stdout.flush()


if __name__ == "__main__":
    serve()
