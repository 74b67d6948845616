import json
import sys
import threading
import time

import pytest

from mdml.clockutil import TestClock
from mdml.executor import (
    DONE,
    FAILED,
    PENDING,
    TIMEOUT,
    BadOutput,
    DuplicateFunction,
    Executor,
    ExecutorTarget,
    FunctionDef,
    NonzeroExit,
    UnknownFunction,
    UnknownTarget,
    UnknownTask,
    builtin_identity,
    run_subprocess_function,
)

ECHO_CMD = (sys.executable, "-c", "import sys; sys.stdout.write(sys.stdin.readline())")


@pytest.fixture
def executor():
    ex = Executor()
    ex.register(FunctionDef(name="identity", version="1", fn=builtin_identity))
    ex.add_target(ExecutorTarget(target_id="local", kind="inline"))
    yield ex
    ex.shutdown()


class TestRegistry:
    def test_register_and_invoke(self, executor):
        h = executor.invoke("identity", "1", b'{"x":1}', "local")
        assert h.state == DONE
        assert h.result == b'{"x":1}'

    def test_duplicate_registration(self, executor):
        with pytest.raises(DuplicateFunction):
            executor.register(FunctionDef(name="identity", version="1", fn=builtin_identity))

    def test_same_name_new_version_ok(self, executor):
        executor.register(FunctionDef(name="identity", version="2", fn=builtin_identity))

    def test_unknown_function(self, executor):
        with pytest.raises(UnknownFunction):
            executor.invoke("nope", "1", b"{}", "local")

    def test_unknown_target(self, executor):
        with pytest.raises(UnknownTarget):
            executor.invoke("identity", "1", b"{}", "mars")


class TestInline:
    def test_terminal_before_return(self, executor):
        h = executor.invoke("identity", "1", b"{}", "local")
        assert h.state == DONE
        assert h.finished_us >= h.started_us >= h.submitted_us

    def test_poll_terminal_immutable(self, executor):
        h = executor.invoke("identity", "1", b'{"k":9}', "local")
        first = executor.poll(h.task_id)
        for _ in range(5):
            again = executor.poll(h.task_id)
            assert again.state == first.state == DONE
            assert again.result == first.result

    def test_unknown_task(self, executor):
        with pytest.raises(UnknownTask):
            executor.poll("bogus")

    def test_builtin_exception_fails_task(self, executor):
        def boom(payload):
            raise RuntimeError("kaput")

        executor.register(FunctionDef(name="boom", version="1", fn=boom))
        h = executor.invoke("boom", "1", b"{}", "local")
        assert h.state == FAILED
        assert "kaput" in h.error


class TestPool:
    def test_results_match_inline(self, executor):
        executor.add_target(ExecutorTarget(target_id="p", kind="pool", workers=4))
        payloads = [json.dumps({"i": i}).encode() for i in range(20)]
        handles = [executor.invoke("identity", "1", p, "p") for p in payloads]
        results = [executor.wait(h.task_id).result for h in handles]
        assert results == payloads

    def test_pool_fairness_under_test_clock(self):
        # N identical tasks on k workers finish in ceil(N/k) task-durations +-1.
        clock = TestClock()
        ex = Executor(clock=clock)
        task_duration_us = 1000
        done_counter = []
        lock = threading.Lock()

        def clocked(payload):
            end = clock.now_us() + task_duration_us
            clock.wait_until(end)
            with lock:
                done_counter.append(clock.now_us())
            return payload

        ex.register(FunctionDef(name="clocked", version="1", fn=clocked))
        ex.add_target(ExecutorTarget(target_id="p", kind="pool", workers=4))
        n_tasks = 12
        handles = [ex.invoke("clocked", "1", b"{}", "p") for _ in range(n_tasks)]
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            clock.advance(task_duration_us)
            if all(ex.poll(h.task_id).state == DONE for h in handles):
                break
            time.sleep(0.01)
        assert all(ex.poll(h.task_id).state == DONE for h in handles)
        # 12 tasks / 4 workers = 3 durations; allow +-1 for handoff slack
        finish = max(done_counter)
        assert finish <= (12 // 4 + 1) * task_duration_us
        ex.shutdown()


class TestSimHpc:
    def test_stays_pending_through_dispatch_latency(self):
        clock = TestClock()
        ex = Executor(clock=clock)
        ex.register(FunctionDef(name="identity", version="1", fn=builtin_identity))
        ex.add_target(ExecutorTarget(
            target_id="hpc", kind="sim_hpc", dispatch_latency_ms=200, slots=2
        ))
        h = ex.invoke("identity", "1", b'{"a":1}', "hpc")
        clock.advance(50_000)  # t+50ms: still inside dispatch latency
        time.sleep(0.05)
        assert ex.poll(h.task_id).state == PENDING

        clock.advance(200_000)
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline and ex.poll(h.task_id).state != DONE:
            time.sleep(0.01)
        snap = ex.poll(h.task_id)
        assert snap.state == DONE
        assert snap.result == b'{"a":1}'
        assert snap.started_us >= snap.submitted_us + 200_000
        ex.shutdown()

    def test_slot_bound_never_violated(self):
        clock = TestClock()
        ex = Executor(clock=clock)
        slots = 3
        running = [0]
        max_running = [0]
        gauge_lock = threading.Lock()

        def occupy(payload):
            with gauge_lock:
                running[0] += 1
                max_running[0] = max(max_running[0], running[0])
            clock.wait_until(clock.now_us() + 10_000)
            with gauge_lock:
                running[0] -= 1
            return payload

        ex.register(FunctionDef(name="occupy", version="1", fn=occupy))
        ex.add_target(ExecutorTarget(
            target_id="hpc", kind="sim_hpc", dispatch_latency_ms=0, slots=slots
        ))
        handles = [ex.invoke("occupy", "1", b"{}", "hpc") for _ in range(12)]
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            clock.advance(10_000)
            if all(ex.poll(h.task_id).state == DONE for h in handles):
                break
            time.sleep(0.01)
        assert all(ex.poll(h.task_id).state == DONE for h in handles)
        assert max_running[0] <= slots
        ex.shutdown()


class TestTimeouts:
    def test_builtin_overrun_reports_timeout(self):
        clock = TestClock()
        ex = Executor(clock=clock)

        def slow(payload):
            clock.wait_until(clock.now_us() + 50_000)
            return payload

        ex.register(FunctionDef(name="slow", version="1", fn=slow, timeout_ms=10))
        ex.add_target(ExecutorTarget(target_id="p", kind="pool", workers=1))
        h = ex.invoke("slow", "1", b"{}", "p")
        time.sleep(0.05)  # let the worker start and block on the clock
        clock.advance(50_000)
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline and ex.poll(h.task_id).state not in (TIMEOUT, DONE):
            time.sleep(0.01)
        snap = ex.poll(h.task_id)
        assert snap.state == TIMEOUT
        assert "timeout" in snap.error
        ex.shutdown()


class TestSubprocessProtocol:
    def test_echo_round_trip(self):
        fdef = FunctionDef(name="echo", version="1", kind="subprocess", command=ECHO_CMD)
        payload = json.dumps({"frame": [1.5, 2.5], "tag": "x"}).encode()
        assert run_subprocess_function(fdef, payload) == payload

    def test_nonzero_exit(self):
        fdef = FunctionDef(
            name="bad", version="1", kind="subprocess",
            command=(sys.executable, "-c", "import sys; sys.exit(3)"),
        )
        with pytest.raises(NonzeroExit) as exc:
            run_subprocess_function(fdef, b"{}")
        assert exc.value.code == 3

    def test_two_output_lines_rejected(self):
        fdef = FunctionDef(
            name="chatty", version="1", kind="subprocess",
            command=(sys.executable, "-c", "print('{}'); print('{}')"),
        )
        with pytest.raises(BadOutput):
            run_subprocess_function(fdef, b"{}")

    def test_non_json_output_rejected(self):
        fdef = FunctionDef(
            name="garbage", version="1", kind="subprocess",
            command=(sys.executable, "-c", "print('not json')"),
        )
        with pytest.raises(BadOutput):
            run_subprocess_function(fdef, b"{}")

    def test_spawn_error(self):
        from mdml.executor import SpawnError

        fdef = FunctionDef(
            name="ghost", version="1", kind="subprocess", command=("/no/such/bin",)
        )
        with pytest.raises(SpawnError):
            run_subprocess_function(fdef, b"{}")

    def test_subprocess_via_executor(self, executor):
        executor.register(FunctionDef(
            name="echo", version="1", kind="subprocess", command=ECHO_CMD
        ))
        h = executor.invoke("echo", "1", b'{"v":42}', "local")
        assert h.state == DONE
        assert h.result == b'{"v":42}'


class TestTargetTransparency:
    def test_done_results_identical_across_targets(self):
        ex = Executor()
        ex.register(FunctionDef(name="identity", version="1", fn=builtin_identity))
        ex.add_target(ExecutorTarget(target_id="inline", kind="inline"))
        ex.add_target(ExecutorTarget(target_id="pool", kind="pool", workers=3))
        ex.add_target(ExecutorTarget(
            target_id="hpc", kind="sim_hpc", dispatch_latency_ms=1, slots=2
        ))
        import random

        rng = random.Random(11)
        for _ in range(25):
            payload = json.dumps({"x": rng.random(), "s": rng.choice("abc")}).encode()
            results = set()
            for target in ("inline", "pool", "hpc"):
                h = ex.invoke("identity", "1", payload, target)
                results.add(ex.wait(h.task_id, timeout_s=10).result)
            assert results == {payload}
        ex.shutdown()
