from __future__ import annotations

import json
import random
import subprocess
import sys
import time

import pytest

from sandbox_exec.worker import PROTOCOL_VERSION, execute, handle_line


class WorkerProc:
    """Raw protocol client for the worker subprocess."""

    def __init__(self):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "sandbox_exec.worker"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
        )
        ready = json.loads(self.proc.stdout.readline())
        assert ready == {"ready": True, "protocol": PROTOCOL_VERSION}

    def send(self, obj) -> None:
        self.proc.stdin.write(json.dumps(obj) + "\n")
        self.proc.stdin.flush()

    def send_raw(self, line: str) -> None:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()

    def recv(self) -> dict:
        line = self.proc.stdout.readline()
        assert line, "worker closed its stdout"
        return json.loads(line)

    def exec(self, code, timeout_ms=10_000, max_output_bytes=65_536, req_id="r"):
        self.send({"id": req_id, "code": code, "timeout_ms": timeout_ms, "max_output_bytes": max_output_bytes})
        return self.recv()

    def close(self) -> None:
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


@pytest.fixture
def worker():
    w = WorkerProc()
    yield w
    w.close()


# ---------------------------------------------------------------------------
# correctness
# ---------------------------------------------------------------------------

def test_print_arithmetic(worker):
    resp = worker.exec("print(2+2)")
    assert resp["status"] == "ok"
    assert resp["stdout"] == "4\n"
    assert resp["stderr"] == ""
    assert resp["truncated"] is False


def test_infinite_loop_times_out(worker):
    t0 = time.perf_counter()
    resp = worker.exec("while True: pass", timeout_ms=1000, req_id="loop")
    elapsed = time.perf_counter() - t0
    assert resp["status"] == "timeout"
    assert resp["id"] == "loop"
    assert elapsed <= 1.5
    assert resp["duration_ms"] <= 1500


def test_exception_carries_name(worker):
    resp = worker.exec("x = 1/0")
    assert resp["status"] == "error"
    assert "ZeroDivisionError" in resp["stderr"]


def test_syntax_error_is_error_status(worker):
    resp = worker.exec("def broken(:\n  pass")
    assert resp["status"] == "error"
    assert "SyntaxError" in resp["stderr"]


def test_malformed_line_gets_error_response(worker):
    worker.send_raw("{this is not json")
    resp = worker.recv()
    assert resp["status"] == "error"
    assert resp["id"] is None
    assert "malformed" in resp["stderr"]
    # the loop keeps serving afterwards
    assert worker.exec("print(1)")["stdout"] == "1\n"


def test_missing_code_field(worker):
    worker.send({"id": "x", "timeout_ms": 100, "max_output_bytes": 100})
    resp = worker.recv()
    assert resp["status"] == "error" and resp["id"] == "x"


def test_output_truncation(worker):
    resp = worker.exec("print('a' * 10000)", max_output_bytes=1000)
    assert resp["status"] == "ok"
    assert resp["truncated"] is True
    assert len(resp["stdout"].encode()) <= 1000


def test_stdin_is_closed_for_snippets(worker):
    resp = worker.exec("import sys; print(repr(sys.stdin.read()))")
    assert resp["status"] in ("ok", "error")
    if resp["status"] == "ok":
        assert resp["stdout"] == "''\n"


def test_guards_block_network_and_writes(worker):
    resp = worker.exec("import socket; socket.socket()")
    assert resp["status"] == "error"
    assert "PermissionError" in resp["stderr"]
    resp2 = worker.exec("open('/tmp/sandbox_should_not_exist', 'w')")
    assert resp2["status"] == "error"
    assert "PermissionError" in resp2["stderr"]


# ---------------------------------------------------------------------------
# isolation & determinism
# ---------------------------------------------------------------------------

def test_reset_isolation(worker):
    assert worker.exec("value = 41")["status"] == "ok"
    worker.send({"id": "reset1", "reset": True})
    assert worker.recv() == {"id": "reset1", "ack": True}
    resp = worker.exec("print(value)")
    assert resp["status"] == "error"
    assert "NameError" in resp["stderr"]


def test_reset_on_fresh_session(worker):
    worker.send({"id": "r0", "reset": True})
    assert worker.recv() == {"id": "r0", "ack": True}


def test_isolation_even_without_reset(worker):
    assert worker.exec("leak = 7")["status"] == "ok"
    resp = worker.exec("print(leak)")
    assert resp["status"] == "error"


def test_deterministic_stdout_across_runs(worker):
    code = "print(sum(i * i for i in range(100)))\nprint('done')"
    outputs = {worker.exec(code, req_id=f"d{i}")["stdout"] for i in range(10)}
    assert len(outputs) == 1


# ---------------------------------------------------------------------------
# protocol fuzz
# ---------------------------------------------------------------------------

def test_protocol_fuzz_fifo_thousand_messages(worker):
    rng = random.Random(0)
    expected_ids = []
    n = 1000
    for i in range(n):
        kind = rng.random()
        req_id = f"m{i:04d}"
        expected_ids.append(req_id)
        if kind < 0.55:
            worker.send({"id": req_id, "reset": True})
        elif kind < 0.9:
            worker.send(
                {
                    "id": req_id,
                    "code": f"print({i})",
                    "timeout_ms": 5000,
                    "max_output_bytes": 1024,
                }
            )
        elif kind < 0.95:
            worker.send({"id": req_id, "code": "nope(", "timeout_ms": 5000, "max_output_bytes": 64})
        else:
            worker.send({"id": req_id})  # missing fields -> error response
    got = [worker.recv() for _ in range(n)]
    assert [r["id"] for r in got] == expected_ids
    for r in got:
        assert ("ack" in r) or (r["status"] in ("ok", "error", "timeout"))


# ---------------------------------------------------------------------------
# in-process unit checks
# ---------------------------------------------------------------------------

def test_execute_inprocess():
    resp = execute("print('hi')", timeout_ms=5000, max_output_bytes=100)
    assert resp["status"] == "ok" and resp["stdout"] == "hi\n"


def test_handle_line_reset():
    assert handle_line('{"id": "a", "reset": true}') == {"id": "a", "ack": True}


def test_handle_line_rejects_nonobject():
    resp = handle_line("[1,2,3]")
    assert resp["status"] == "error"


def test_handle_line_bad_limits():
    resp = handle_line('{"id": "a", "code": "print(1)", "timeout_ms": 0, "max_output_bytes": 10}')
    assert resp["status"] == "error" and "bad request" in resp["stderr"]
