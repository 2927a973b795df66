from __future__ import annotations

import json
import sys
import textwrap
import threading
import time

import pytest

from emtir.executor import (
    CallableExecutor,
    ExecOutcome,
    ExecutorFailure,
    ExecutorPool,
    WorkerProcessExecutor,
)

# Minimal stdio worker conforming to the line-JSON protocol, used to test the
# client side without the companion worker package.
FAKE_WORKER = textwrap.dedent(
    """
    import json, sys, time
    print(json.dumps({"ready": True, "protocol": 1}), flush=True)
    for line in sys.stdin:
        req = json.loads(line)
        if req.get("reset"):
            print(json.dumps({"id": req["id"], "ack": True}), flush=True)
            continue
        code = req["code"]
        if code == "SLEEP":
            time.sleep(0.05)
        print(json.dumps({
            "id": req["id"], "status": "ok", "stdout": f"ran {code}",
            "stderr": "", "duration_ms": 1.0, "truncated": False,
        }), flush=True)
    """
)


def fake_worker_argv():
    return [sys.executable, "-c", FAKE_WORKER]


def test_callable_executor():
    ex = CallableExecutor(lambda c: f"out:{c}")
    out = ex.run("x")
    assert out == ExecOutcome("out:x", "ok")


def test_worker_client_roundtrip():
    ex = WorkerProcessExecutor(fake_worker_argv())
    try:
        out = ex.run("print(1)")
        assert out.status == "ok"
        assert out.output == "ran print(1)"
        ex.reset()
        out2 = ex.run("second")
        assert out2.output == "ran second"
    finally:
        ex.close()


def test_worker_client_rejects_bad_handshake():
    argv = [sys.executable, "-c", "print('not json')"]
    with pytest.raises(ExecutorFailure):
        WorkerProcessExecutor(argv)


def test_pool_exclusive_leases():
    ex = WorkerProcessExecutor(fake_worker_argv())
    counts = {"inflight": 0, "max": 0}
    lock = threading.Lock()

    class Probe:
        def run(self, code, **kw):
            with lock:
                counts["inflight"] += 1
                counts["max"] = max(counts["max"], counts["inflight"])
            time.sleep(0.01)
            with lock:
                counts["inflight"] -= 1
            return ExecOutcome("", "ok")

        def close(self):
            pass

    pool = ExecutorPool(Probe, size=2)
    threads = []

    def work():
        with pool.lease() as p:
            p.run("x")

    for _ in range(8):
        t = threading.Thread(target=work)
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    pool.close()
    ex.close()
    assert counts["max"] <= 2


def test_pool_size_validation():
    with pytest.raises(ValueError):
        ExecutorPool(lambda: CallableExecutor(lambda c: ""), size=0)


def test_real_worker_integration_if_installed():
    # end-to-end against the companion interpreter worker when present;
    # the primary suite stays green without it
    pytest.importorskip("sandbox_exec")
    from emtir.executor import default_worker_argv

    ex = WorkerProcessExecutor(default_worker_argv())
    try:
        out = ex.run("print(2+2)")
        assert out.status == "ok"
        assert out.output == "4\n"
        bad = ex.run("1/0")
        assert bad.status == "error"
        assert "ZeroDivisionError" in bad.output
        slow = ex.run("while True: pass", timeout_ms=500)
        assert slow.status == "timeout"
        ex.reset()
    finally:
        ex.close()
