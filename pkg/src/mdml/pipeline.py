"""Declarative pipeline DAG: parse, validate, run.

A pipeline document (JSON, schema in docs/pipeline.md) declares sources,
fusion nodes, function nodes, steer nodes, archive sinks, and taps, wired
by edges. Each node runs on its own thread; records travel by value over
bounded queues (default 1024, block policy). Failures are skip-and-count
per record: one bad frame never halts the DAG.
"""

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace

from mdml import envelope as ev
from mdml.executor import DONE, Executor
from mdml.fusion import BatchingRule, FusedRecord, FusionEngine, FusionError

log = logging.getLogger(__name__)

NODE_KINDS = ("source", "fuse", "function", "steer", "archive_sink", "tap")

DEFAULT_QUEUE_SIZE = 1024

_EOF = object()


class PipelineError(Exception):
    pass


class ParseError(PipelineError):
    pass


class CycleDetected(PipelineError):
    def __init__(self, path):
        super().__init__(" -> ".join(path))
        self.path = list(path)


class DanglingEdge(PipelineError):
    def __init__(self, edge):
        super().__init__(f"{edge[0]!r} -> {edge[1]!r}")
        self.edge = edge


class BadNodeConfig(PipelineError):
    def __init__(self, node_id, reason):
        super().__init__(f"node {node_id!r}: {reason}")
        self.node_id = node_id
        self.reason = reason


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    config: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EdgeSpec:
    src: str
    dst: str
    queue_size: int = DEFAULT_QUEUE_SIZE
    policy: str = "block"  # block | shed


@dataclass(frozen=True)
class PipelineConfig:
    pipeline_id: str
    experiment_id: str
    nodes: tuple
    edges: tuple
    executors: tuple = ()

    def node(self, node_id: str) -> NodeSpec:
        return next(n for n in self.nodes if n.id == node_id)


@dataclass
class NodeStatus:
    node_id: str
    state: str = "idle"  # idle | running | failed | stopped
    records_in: int = 0
    records_out: int = 0
    errors: int = 0
    last_error: str | None = None
    last_activity_ts_us: int = 0

    def to_dict(self) -> dict:
        return {
            "node": self.node_id,
            "state": self.state,
            "in": self.records_in,
            "out": self.records_out,
            "errors": self.errors,
            "last_error": self.last_error,
            "last_activity_ts_us": self.last_activity_ts_us,
        }


# --- validation ---------------------------------------------------------------

def _check_node_config(node: NodeSpec) -> None:
    cfg = node.config
    if node.kind == "source":
        device = cfg.get("device")
        if not device:
            raise BadNodeConfig(node.id, "source requires a device filter")
        if device != "+":
            try:
                ev.check_identifier(device, "device")
            except ev.InvalidIdentifier as e:
                raise BadNodeConfig(node.id, str(e)) from None
    elif node.kind == "fuse":
        rule = cfg.get("rule")
        if not isinstance(rule, dict):
            raise BadNodeConfig(node.id, "fuse requires a batching rule")
        try:
            BatchingRule.from_dict(rule)
        except (ValueError, TypeError) as e:
            raise BadNodeConfig(node.id, f"bad batching rule: {e}") from None
    elif node.kind == "function":
        for key in ("function", "target"):
            if not cfg.get(key):
                raise BadNodeConfig(node.id, f"function node requires {key!r}")
        timeout = cfg.get("timeout_ms")
        if timeout is not None and (not isinstance(timeout, int) or timeout <= 0):
            raise BadNodeConfig(node.id, "timeout_ms must be a positive integer")
    elif node.kind == "steer":
        for key in ("device", "command_name"):
            if not cfg.get(key):
                raise BadNodeConfig(node.id, f"steer node requires {key!r}")
        try:
            ev.check_identifier(cfg["device"], "device")
            ev.check_name(cfg["command_name"], "command_name")
        except ev.InvalidIdentifier as e:
            raise BadNodeConfig(node.id, str(e)) from None
        if not isinstance(cfg.get("params_from", {}), dict):
            raise BadNodeConfig(node.id, "params_from must be a map")
    elif node.kind == "tap":
        if not cfg.get("channel"):
            raise BadNodeConfig(node.id, "tap requires a channel name")
    elif node.kind == "archive_sink":
        pass
    else:
        raise BadNodeConfig(node.id, f"unknown kind {node.kind!r}")


def _find_cycle(node_ids, adjacency) -> list | None:
    WHITE, GRAY, BLACK = 0, 1, 2
    color = dict.fromkeys(node_ids, WHITE)
    stack_path = []

    def dfs(nid):
        color[nid] = GRAY
        stack_path.append(nid)
        for nxt in adjacency.get(nid, ()):
            if color[nxt] == GRAY:
                cycle_start = stack_path.index(nxt)
                return stack_path[cycle_start:] + [nxt]
            if color[nxt] == WHITE:
                found = dfs(nxt)
                if found:
                    return found
        stack_path.pop()
        color[nid] = BLACK
        return None

    for nid in node_ids:
        if color[nid] == WHITE:
            found = dfs(nid)
            if found:
                return found
    return None


def parse_and_validate(document: bytes | str) -> PipelineConfig:
    """Parse a pipeline document and enforce every structural invariant.

    Check order is deterministic: parse, duplicate ids, dangling edges,
    per-node config, in-degree rules, acyclicity.
    """
    try:
        doc = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("pipeline document must be a JSON object")
    for key in ("pipeline_id", "experiment_id", "nodes", "edges"):
        if key not in doc:
            raise ParseError(f"missing top-level key {key!r}")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["edges"], list):
        raise ParseError("nodes and edges must be arrays")
    try:
        ev.check_identifier(doc["experiment_id"], "experiment_id")
    except ev.InvalidIdentifier as e:
        raise ParseError(str(e)) from None

    nodes = []
    for entry in doc["nodes"]:
        if not isinstance(entry, dict) or "id" not in entry or "kind" not in entry:
            raise ParseError(f"malformed node entry: {entry!r}")
        config = {k: v for k, v in entry.items() if k not in ("id", "kind")}
        nodes.append(NodeSpec(id=entry["id"], kind=entry["kind"], config=config))

    seen = set()
    for n in nodes:
        if n.id in seen:
            raise BadNodeConfig(n.id, "duplicate node id")
        seen.add(n.id)

    edges = []
    for entry in doc["edges"]:
        if not isinstance(entry, dict) or "from" not in entry or "to" not in entry:
            raise ParseError(f"malformed edge entry: {entry!r}")
        edges.append(EdgeSpec(
            src=entry["from"], dst=entry["to"],
            queue_size=entry.get("queue_size", DEFAULT_QUEUE_SIZE),
            policy=entry.get("policy", "block"),
        ))

    for e in edges:
        if e.src not in seen or e.dst not in seen:
            raise DanglingEdge((e.src, e.dst))
        if e.queue_size < 1:
            raise ParseError(f"edge {e.src}->{e.dst}: queue_size must be >= 1")
        if e.policy not in ("block", "shed"):
            raise ParseError(f"edge {e.src}->{e.dst}: unknown policy {e.policy!r}")

    for n in nodes:
        _check_node_config(n)

    in_degree = {n.id: 0 for n in nodes}
    for e in edges:
        in_degree[e.dst] += 1
    for n in nodes:
        if n.kind == "source" and in_degree[n.id] > 0:
            raise BadNodeConfig(n.id, "source nodes take no inbound edges")
        if n.kind != "source" and in_degree[n.id] == 0:
            raise BadNodeConfig(n.id, "non-source node has no inbound edge")

    adjacency = {}
    for e in edges:
        adjacency.setdefault(e.src, []).append(e.dst)
    cycle = _find_cycle([n.id for n in nodes], adjacency)
    if cycle:
        raise CycleDetected(cycle)

    executors = tuple(doc.get("executors", []))
    return PipelineConfig(
        pipeline_id=doc["pipeline_id"],
        experiment_id=doc["experiment_id"],
        nodes=tuple(nodes),
        edges=tuple(edges),
        executors=executors,
    )


def topo_order(config: PipelineConfig) -> list[str]:
    in_deg = {n.id: 0 for n in config.nodes}
    adj = {}
    for e in config.edges:
        in_deg[e.dst] += 1
        adj.setdefault(e.src, []).append(e.dst)
    ready = sorted(nid for nid, d in in_deg.items() if d == 0)
    order = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for nxt in adj.get(nid, ()):
            in_deg[nxt] -= 1
            if in_deg[nxt] == 0:
                ready.append(nxt)
    return order


# --- runtime ------------------------------------------------------------------

def record_to_dict(record) -> dict:
    if isinstance(record, ev.Envelope):
        return record.to_wire()
    if isinstance(record, FusedRecord):
        return record.to_dict()
    if isinstance(record, dict):
        return record
    raise TypeError(f"unsupported record type {type(record).__name__}")


def record_ts(record) -> int:
    if isinstance(record, (ev.Envelope, FusedRecord)):
        return record.ts_us
    if isinstance(record, dict):
        ts = record.get("ts_us")
        return ts if isinstance(ts, int) else 0
    return 0


class _Edge:
    def __init__(self, spec: EdgeSpec):
        self.spec = spec
        self.queue: queue.Queue = queue.Queue(maxsize=spec.queue_size)
        self.shed_count = 0
        self.eof = False

    def put(self, item) -> None:
        if self.spec.policy == "shed":
            try:
                self.queue.put_nowait(item)
            except queue.Full:
                self.shed_count += 1
        else:
            self.queue.put(item)


class _Node:
    def __init__(self, spec: NodeSpec, runtime: "RunningPipeline"):
        self.spec = spec
        self.runtime = runtime
        self.in_edges: list[_Edge] = []
        self.out_edges: list[_Edge] = []
        self.status = NodeStatus(node_id=spec.id)
        self._status_lock = threading.Lock()
        self.thread = threading.Thread(
            target=self._run, name=f"node-{spec.id}", daemon=True
        )
        # node-kind state
        self.subscription = None
        self.engine: FusionEngine | None = None
        self.feedback_state = None
        self.steer_seq = 0
        self.steer_enabled = True
        self.control_sub = None
        self.tap_queue: queue.Queue | None = None

    # -- status

    def snapshot(self) -> NodeStatus:
        with self._status_lock:
            return replace(self.status)

    def _set_state(self, state: str) -> None:
        with self._status_lock:
            if self.status.state == state or self.status.state == "stopped":
                return
            self.status.state = state
        self.runtime._publish_node_event(self.spec.id, state)

    def _count(self, records_in=0, records_out=0, errors=0, error_msg=None):
        with self._status_lock:
            self.status.records_in += records_in
            self.status.records_out += records_out
            self.status.errors += errors
            if error_msg is not None:
                self.status.last_error = error_msg
            self.status.last_activity_ts_us = time.time_ns() // 1000

    def _record_error(self, msg: str):
        self._count(errors=1, error_msg=msg)
        self._set_state("failed")
        log.warning("node %s: %s", self.spec.id, msg)

    # -- main loops

    def _run(self) -> None:
        self._set_state("running")
        try:
            if self.spec.kind == "source":
                self._source_loop()
            else:
                self._consume_loop()
        finally:
            self._emit_eof()
            self._set_state("stopped")

    def _source_loop(self) -> None:
        sub = self.subscription
        while not self.runtime._stopping.is_set():
            item = sub.get(timeout=0.05)
            if item is None:
                continue
            _, payload = item
            try:
                env = ev.decode(payload)
                self._count(records_in=1)
                self._forward(env)
            except ev.EnvelopeError as e:
                self._count(records_in=1)
                self._record_error(f"undecodable envelope: {e}")
            finally:
                sub.task_done()

    def _consume_loop(self) -> None:
        pending_eof = {id(e): False for e in self.in_edges}
        while not all(pending_eof.values()):
            progressed = False
            for edge in self.in_edges:
                if pending_eof[id(edge)]:
                    continue
                try:
                    item = edge.queue.get_nowait()
                except queue.Empty:
                    continue
                progressed = True
                try:
                    if item is _EOF:
                        pending_eof[id(edge)] = True
                    else:
                        self._process(item)
                finally:
                    edge.queue.task_done()
            if not progressed:
                time.sleep(0.001)
        if self.spec.kind == "fuse" and self.engine is not None:
            for rec in self.engine.drain():
                self._forward(rec)

    def _process(self, record) -> None:
        try:
            handler = {
                "fuse": self._process_fuse,
                "function": self._process_function,
                "steer": self._process_steer,
                "archive_sink": self._process_archive,
                "tap": self._process_tap,
            }[self.spec.kind]
            self._count(records_in=1)
            handler(record)
            if self.status.state == "failed":
                self._set_state("running")  # recovered on a later record
        except Exception as e:  # noqa: BLE001 - per-record isolation
            self._record_error(f"{type(e).__name__}: {e}")

    def _forward(self, record, count: bool = True) -> None:
        for edge in self.out_edges:
            edge.put(record)
        if self.out_edges and count:
            self._count(records_out=1)

    def _emit_eof(self) -> None:
        for edge in self.out_edges:
            edge.queue.put(_EOF)

    # -- per-kind record handling

    def _process_fuse(self, record) -> None:
        if not isinstance(record, ev.Envelope):
            raise FusionError("fuse nodes consume envelopes")
        self.engine.ingest(record)
        for rec in self.engine.poll():
            self._forward(rec)

    def _process_function(self, record) -> None:
        cfg = self.spec.config
        payload = {
            "params": cfg.get("params", {}),
            "record": record_to_dict(record),
        }
        if cfg.get("feedback"):
            payload["state"] = self.feedback_state
        handle = self.runtime.executor.invoke(
            cfg["function"], str(cfg.get("version", "1")),
            json.dumps(payload, separators=(",", ":")).encode(),
            cfg["target"], timeout_ms=cfg.get("timeout_ms"),
        )
        final = self.runtime.executor.wait(
            handle.task_id,
            timeout_s=(cfg.get("timeout_ms", 30_000) / 1000) + 30,
        )
        if final.state != DONE:
            raise PipelineError(f"function {cfg['function']}: {final.state}: {final.error}")
        result = json.loads(final.result)
        if cfg.get("feedback"):
            self.feedback_state = result.get("state")
            value = result.get("value")
            if value is None:
                return
        else:
            value = result
        out = {
            "node": self.spec.id,
            "ts_us": value.get("ts_us", record_ts(record)) if isinstance(value, dict)
            else record_ts(record),
            "value": value,
        }
        self.runtime.transport.publish(
            ev.topic_for("results", self.runtime.config.experiment_id, self.spec.id),
            json.dumps(out, separators=(",", ":")).encode(),
        )
        self._forward(out)

    def _process_steer(self, record) -> None:
        self._poll_steer_control()
        if not self.steer_enabled:
            return
        cfg = self.spec.config
        rec = record_to_dict(record)
        params = dict(cfg.get("params_const", {}))
        for name, path in cfg.get("params_from", {}).items():
            value = rec
            for part in path.split("."):
                if isinstance(value, (list, tuple)):
                    value = value[int(part)]
                else:
                    value = value[part]
            params[name] = value
        msg = ev.ControlMessage(
            experiment_id=self.runtime.config.experiment_id,
            device_id=cfg["device"],
            seq=self.steer_seq,
            ts_us=record_ts(record),
            command_name=cfg["command_name"],
            params=params,
        )
        self.steer_seq += 1
        self.runtime.transport.publish(
            ev.topic_for("control", self.runtime.config.experiment_id, cfg["device"]),
            ev.encode_control(msg),
        )
        self._count(records_out=1)  # the published command is this node's output
        self._forward({
            "device_id": msg.device_id,
            "seq": msg.seq,
            "ts_us": msg.ts_us,
            "command_name": msg.command_name,
            "params": dict(msg.params),
        }, count=False)

    def _poll_steer_control(self) -> None:
        if self.control_sub is None:
            return
        while (item := self.control_sub.get_nowait()) is not None:
            self.control_sub.task_done()
            try:
                doc = json.loads(item[1])
                if doc.get("command_name") == "set_enabled":
                    self.steer_enabled = bool(doc.get("params", {}).get("enabled", True))
                    log.info("steer node %s enabled=%s", self.spec.id, self.steer_enabled)
            except (json.JSONDecodeError, AttributeError) as e:
                log.warning("steer node %s: bad control message: %s", self.spec.id, e)

    def _process_archive(self, record) -> None:
        if not isinstance(record, ev.Envelope):
            raise PipelineError("archive_sink consumes envelopes")
        if self.runtime.archive_writer is None:
            raise PipelineError("pipeline was started without an archive writer")
        self.runtime.archive_writer.append(record)
        self._count(records_out=1)

    def _process_tap(self, record) -> None:
        if self.spec.config.get("policy", "block") == "shed":
            try:
                self.tap_queue.put_nowait(record)
            except queue.Full:
                return
        else:
            self.tap_queue.put(record)
        self._count(records_out=1)


class RunningPipeline:
    """Handle for a started pipeline: status, taps, drain, stop."""

    def __init__(self, config: PipelineConfig, transport, executor: Executor,
                 archive_writer=None):
        self.config = config
        self.transport = transport
        self.executor = executor
        self.archive_writer = archive_writer
        self._stopping = threading.Event()
        self._stopped = False
        self.taps: dict[str, queue.Queue] = {}

        from mdml.executor import ExecutorTarget

        for target_doc in config.executors:
            spec = ExecutorTarget.from_dict(dict(target_doc))
            try:
                executor.add_target(spec)
            except ValueError:
                pass  # target already present (shared executor)

        self.nodes: dict[str, _Node] = {
            spec.id: _Node(spec, self) for spec in config.nodes
        }
        for espec in config.edges:
            edge = _Edge(espec)
            self.nodes[espec.src].out_edges.append(edge)
            self.nodes[espec.dst].in_edges.append(edge)

        for node in self.nodes.values():
            spec = node.spec
            if spec.kind == "source":
                device = spec.config["device"]
                node.subscription = transport.subscribe(
                    f"mdml/v1/{config.experiment_id}/data/{device}"
                )
            elif spec.kind == "fuse":
                node.engine = FusionEngine(BatchingRule.from_dict(spec.config["rule"]))
            elif spec.kind == "function" and spec.config.get("feedback"):
                node.feedback_state = spec.config.get("feedback_init")
            elif spec.kind == "steer" and spec.config.get("control_device"):
                node.control_sub = transport.subscribe(
                    ev.topic_for("control", config.experiment_id,
                                 spec.config["control_device"])
                )
            elif spec.kind == "tap":
                node.tap_queue = queue.Queue(
                    maxsize=spec.config.get("queue_size", DEFAULT_QUEUE_SIZE)
                )
                self.taps[spec.config["channel"]] = node.tap_queue

        self._topo = topo_order(config)
        for nid in self._topo:
            self.nodes[nid].thread.start()

    def _publish_node_event(self, node_id: str, state: str) -> None:
        event = {"node": node_id, "state": state, "ts_us": time.time_ns() // 1000}
        try:
            self.transport.publish(
                ev.topic_for("events", self.config.experiment_id),
                json.dumps(event, separators=(",", ":")).encode(),
            )
        except Exception as e:  # noqa: BLE001 - status must not break dataflow
            log.debug("could not publish node event: %s", e)

    def status(self) -> list[NodeStatus]:
        return [self.nodes[nid].snapshot() for nid in self._topo]

    def tap(self, channel: str) -> queue.Queue:
        return self.taps[channel]

    def drain(self) -> None:
        """Block until every record already inside the DAG has been fully
        processed. Safe to call repeatedly; used by the lockstep demo.
        """
        for nid in self._topo:
            node = self.nodes[nid]
            if node.subscription is not None:
                node.subscription.join()
            for edge in node.in_edges:
                edge.queue.join()

    def stop(self, drain: bool = True, timeout_s: float = 30.0) -> None:
        if self._stopped:
            return
        if drain:
            self.drain()
        self._stopping.set()
        deadline = time.monotonic() + timeout_s
        for nid in self._topo:
            node = self.nodes[nid]
            node.thread.join(timeout=max(0.0, deadline - time.monotonic()))
        for node in self.nodes.values():
            if node.subscription is not None:
                self.transport.unsubscribe(node.subscription)
            if node.control_sub is not None:
                self.transport.unsubscribe(node.control_sub)
        self._stopped = True


def run(config: PipelineConfig, transport, executor: Executor,
        archive_writer=None) -> RunningPipeline:
    return RunningPipeline(config, transport, executor, archive_writer)
