"""Function registry and pluggable compute targets.

Functions are registered by (name, version) and invoked asynchronously
against a target: ``inline`` runs on the caller before invoke() returns,
``pool`` on a fixed set of worker threads, ``sim_hpc`` behind a dispatch
latency and a bounded slot count — the stand-in for offloading to a remote
batch system. Results come back by polling the TaskHandle; terminal states
are immutable.

Subprocess functions speak one protocol: payload JSON + newline on stdin,
exactly one JSON line on stdout. Anything implementable in any language.
"""

import json
import logging
import queue
import subprocess
import threading
import uuid
from dataclasses import dataclass, field, replace

from mdml.clockutil import Clock, WallClock

log = logging.getLogger(__name__)

PENDING, RUNNING, DONE, FAILED, TIMEOUT = "pending", "running", "done", "failed", "timeout"
TERMINAL = (DONE, FAILED, TIMEOUT)


class ExecutorError(Exception):
    pass


class DuplicateFunction(ExecutorError):
    pass


class UnknownFunction(ExecutorError):
    pass


class UnknownTarget(ExecutorError):
    pass


class UnknownTask(ExecutorError):
    pass


class SpawnError(ExecutorError):
    pass


class BadOutput(ExecutorError):
    pass


class NonzeroExit(ExecutorError):
    def __init__(self, code: int, stderr_excerpt: str):
        super().__init__(f"exit code {code}: {stderr_excerpt}")
        self.code = code
        self.stderr_excerpt = stderr_excerpt


@dataclass(frozen=True)
class FunctionDef:
    name: str
    version: str
    kind: str = "builtin"  # builtin | subprocess
    fn: object = None  # builtin: callable(payload: bytes) -> bytes
    command: tuple = ()  # subprocess: argv
    timeout_ms: int = 30_000

    def __post_init__(self):
        if self.kind not in ("builtin", "subprocess"):
            raise ValueError(f"unknown function kind {self.kind!r}")
        if self.kind == "builtin" and not callable(self.fn):
            raise ValueError("builtin function requires a callable")
        if self.kind == "subprocess" and not self.command:
            raise ValueError("subprocess function requires a command")


@dataclass(frozen=True)
class ExecutorTarget:
    target_id: str
    kind: str = "inline"  # inline | pool | sim_hpc
    workers: int = 1
    dispatch_latency_ms: int = 0
    slots: int = 1

    def __post_init__(self):
        if self.kind not in ("inline", "pool", "sim_hpc"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.workers < 1:
            raise ValueError("pool worker count must be >= 1")
        if self.slots < 1:
            raise ValueError("sim_hpc slots must be >= 1")
        if self.dispatch_latency_ms < 0:
            raise ValueError("dispatch_latency_ms must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExecutorTarget":
        return cls(
            target_id=doc["target_id"],
            kind=doc.get("kind", "inline"),
            workers=doc.get("workers", 1),
            dispatch_latency_ms=doc.get("dispatch_latency_ms", 0),
            slots=doc.get("slots", 1),
        )


@dataclass
class TaskHandle:
    task_id: str
    state: str = PENDING
    result: bytes | None = None
    error: str | None = None
    submitted_us: int = 0
    started_us: int = 0
    finished_us: int = 0


class _Task:
    def __init__(self, task_id, fdef, payload, timeout_ms, clock):
        self.task_id = task_id
        self.fdef = fdef
        self.payload = payload
        self.timeout_ms = timeout_ms
        self.clock = clock
        self.lock = threading.Lock()
        self.handle = TaskHandle(task_id=task_id, submitted_us=clock.now_us())
        self.ready_us = 0  # sim_hpc dispatch gate

    def snapshot(self) -> TaskHandle:
        with self.lock:
            return replace(self.handle)

    def mark_running(self) -> bool:
        with self.lock:
            if self.handle.state != PENDING:
                return False
            self.handle.state = RUNNING
            self.handle.started_us = self.clock.now_us()
            return True

    def finish(self, state: str, result: bytes | None = None, error: str | None = None):
        with self.lock:
            if self.handle.state in TERMINAL:
                return  # terminal states are immutable
            self.handle.state = state
            self.handle.result = result
            self.handle.error = error
            self.handle.finished_us = max(self.clock.now_us(), self.handle.started_us)

    def check_timeout(self):
        with self.lock:
            if self.handle.state != RUNNING:
                return
            elapsed_ms = (self.clock.now_us() - self.handle.started_us) / 1000
            if elapsed_ms > self.timeout_ms:
                self.handle.state = TIMEOUT
                self.handle.error = f"exceeded timeout of {self.timeout_ms} ms"
                self.handle.finished_us = self.clock.now_us()


def run_subprocess_function(fdef: FunctionDef, payload: bytes,
                            timeout_ms: int | None = None) -> bytes:
    """One JSON line in on stdin, exactly one JSON line out on stdout."""
    if fdef.kind != "subprocess":
        raise ValueError("not a subprocess function")
    timeout_s = (timeout_ms or fdef.timeout_ms) / 1000
    try:
        proc = subprocess.Popen(
            list(fdef.command), stdin=subprocess.PIPE,
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
    except OSError as e:
        raise SpawnError(f"cannot spawn {fdef.command[0]!r}: {e}") from None
    try:
        stdout, stderr = proc.communicate(payload.rstrip(b"\n") + b"\n", timeout=timeout_s)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        raise
    if proc.returncode != 0:
        excerpt = stderr.decode("utf-8", "replace").strip()[:500]
        raise NonzeroExit(proc.returncode, excerpt)
    lines = [ln for ln in stdout.split(b"\n") if ln.strip()]
    if len(lines) != 1:
        raise BadOutput(f"expected exactly one output line, got {len(lines)}")
    try:
        json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise BadOutput(f"output is not JSON: {e}") from None
    return lines[0]


class _PoolTarget:
    def __init__(self, spec: ExecutorTarget, executor: "Executor"):
        self.spec = spec
        self.executor = executor
        self.queue: queue.Queue = queue.Queue()
        self.threads = [
            threading.Thread(target=self._worker, name=f"pool-{spec.target_id}-{i}", daemon=True)
            for i in range(spec.workers)
        ]
        for t in self.threads:
            t.start()

    def submit(self, task: _Task):
        self.queue.put(task)

    def _worker(self):
        while True:
            task = self.queue.get()
            if task is None:
                return
            self.executor._execute(task)
            self.queue.task_done()

    def shutdown(self):
        for _ in self.threads:
            self.queue.put(None)


class _SimHpcTarget:
    """Tasks stay pending for dispatch_latency_ms, then run with at most
    ``slots`` concurrent. A scheduler thread gates on the clock so a test
    clock can drive the timing deterministically.
    """

    def __init__(self, spec: ExecutorTarget, executor: "Executor", clock: Clock):
        self.spec = spec
        self.executor = executor
        self.clock = clock
        self.pending: list[_Task] = []
        self.lock = threading.Lock()
        self.wake = threading.Event()
        self.stop = threading.Event()
        self.slot_sem = threading.Semaphore(spec.slots)
        self.scheduler = threading.Thread(
            target=self._schedule_loop, name=f"simhpc-{spec.target_id}", daemon=True
        )
        self.scheduler.start()

    def submit(self, task: _Task):
        task.ready_us = self.clock.now_us() + self.spec.dispatch_latency_ms * 1000
        with self.lock:
            self.pending.append(task)
        self.wake.set()

    def _schedule_loop(self):
        while not self.stop.is_set():
            with self.lock:
                now = self.clock.now_us()
                ready = [t for t in self.pending if t.ready_us <= now]
                for t in ready:
                    self.pending.remove(t)
                next_due = min((t.ready_us for t in self.pending), default=None)
            for task in ready:
                self.slot_sem.acquire()
                threading.Thread(
                    target=self._run_slot, args=(task,), daemon=True
                ).start()
            self.wake.clear()
            if next_due is not None:
                self.clock.wait_until(next_due, wake=self.wake)
            else:
                self.wake.wait(timeout=0.1)

    def _run_slot(self, task: _Task):
        try:
            self.executor._execute(task)
        finally:
            self.slot_sem.release()

    def shutdown(self):
        self.stop.set()
        self.wake.set()


class Executor:
    """Registry + targets. invoke/poll are safe from any thread."""

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or WallClock()
        self._functions: dict[tuple[str, str], FunctionDef] = {}
        self._targets: dict[str, object] = {}
        self._target_specs: dict[str, ExecutorTarget] = {}
        self._tasks: dict[str, _Task] = {}
        self._lock = threading.Lock()

    # -- registry

    def register(self, fdef: FunctionDef) -> tuple[str, str]:
        key = (fdef.name, fdef.version)
        with self._lock:
            if key in self._functions:
                raise DuplicateFunction(f"{fdef.name} v{fdef.version} already registered")
            self._functions[key] = fdef
        return key

    def add_target(self, spec: ExecutorTarget) -> None:
        with self._lock:
            if spec.target_id in self._targets:
                raise ValueError(f"target {spec.target_id!r} already exists")
            if spec.kind == "pool":
                self._targets[spec.target_id] = _PoolTarget(spec, self)
            elif spec.kind == "sim_hpc":
                self._targets[spec.target_id] = _SimHpcTarget(spec, self, self.clock)
            else:
                self._targets[spec.target_id] = "inline"
            self._target_specs[spec.target_id] = spec

    # -- invocation

    def invoke(self, name: str, version: str, payload: bytes, target_id: str,
               timeout_ms: int | None = None) -> TaskHandle:
        with self._lock:
            fdef = self._functions.get((name, version))
            target = self._targets.get(target_id)
        if fdef is None:
            raise UnknownFunction(f"{name} v{version} is not registered")
        if target is None:
            raise UnknownTarget(f"no target {target_id!r}")

        task = _Task(
            task_id=uuid.uuid4().hex,
            fdef=fdef,
            payload=bytes(payload),
            timeout_ms=timeout_ms or fdef.timeout_ms,
            clock=self.clock,
        )
        with self._lock:
            self._tasks[task.task_id] = task

        if target == "inline":
            self._execute(task)
        else:
            target.submit(task)
        return task.snapshot()

    def poll(self, task_id: str) -> TaskHandle:
        with self._lock:
            task = self._tasks.get(task_id)
        if task is None:
            raise UnknownTask(f"no task {task_id!r}")
        task.check_timeout()
        return task.snapshot()

    def wait(self, task_id: str, timeout_s: float = 30.0, poll_interval_s: float = 0.001) -> TaskHandle:
        """Convenience poll loop for callers that need the terminal handle."""
        deadline = None if timeout_s is None else (self.clock.now_us() + timeout_s * 1e6)
        while True:
            snap = self.poll(task_id)
            if snap.state in TERMINAL:
                return snap
            if deadline is not None and self.clock.now_us() > deadline:
                return snap
            threading.Event().wait(poll_interval_s)

    def _execute(self, task: _Task) -> None:
        if not task.mark_running():
            return
        fdef = task.fdef
        try:
            if fdef.kind == "builtin":
                result = fdef.fn(task.payload)
                if not isinstance(result, bytes):
                    result = json.dumps(result, separators=(",", ":")).encode()
            else:
                result = run_subprocess_function(fdef, task.payload, task.timeout_ms)
        except subprocess.TimeoutExpired:
            task.finish(TIMEOUT, error=f"subprocess exceeded {task.timeout_ms} ms")
            return
        except (SpawnError, BadOutput, NonzeroExit) as e:
            task.finish(FAILED, error=f"{type(e).__name__}: {e}")
            return
        except Exception as e:  # noqa: BLE001 - function errors must not kill workers
            task.finish(FAILED, error=f"{type(e).__name__}: {e}")
            return
        # A builtin that overran its budget reports timeout, not done.
        task.check_timeout()
        task.finish(DONE, result=result)

    def shutdown(self) -> None:
        with self._lock:
            targets = list(self._targets.values())
            self._targets.clear()
        for t in targets:
            if t != "inline":
                t.shutdown()


def builtin_identity(payload: bytes) -> bytes:
    return payload
