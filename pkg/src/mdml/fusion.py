"""Multi-rate stream fusion: aligns device streams into FusedRecords.

Three batching rules:

* trigger — every event of a designated fast device emits a record joined
  with the latest non-stale row of each listed slow device (last-value /
  step semantics, no interpolation).
* tumbling — fixed windows [k*W, (k+1)*W) of per-field aggregates.
* count — every n consecutive rows of a single device aggregate into one
  record; the remainder is held.

Disorder model: one watermark per fusion node, watermark = max event ts
seen - max_lateness. An arriving event at or below the current watermark
is rejected as late; duplicates (per-device seq already seen) are dropped.
Emission never runs ahead of the watermark, so records are final: nothing
that could still arrive may contribute to an already-emitted record.
"""

import bisect
import math
from dataclasses import dataclass, field

from mdml.envelope import CONTENT_ROWS, Envelope

ACCEPTED = "accepted"
DUPLICATE = "duplicate"
LATE = "late"

NUMERIC_TYPES = ("f64", "i64")


class FusionError(Exception):
    pass


class SchemaMismatch(FusionError):
    pass


class UnknownDevice(FusionError):
    pass


class MultiDeviceUnsupported(FusionError):
    pass


@dataclass
class BatchingRule:
    kind: str  # tumbling | count | trigger
    width_ms: int | None = None
    n: int | None = None
    trigger_device: str | None = None
    staleness_ms: dict = field(default_factory=dict)  # device -> ms, None = unbounded
    max_lateness_ms: int = 0

    def __post_init__(self):
        if self.kind not in ("tumbling", "count", "trigger"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "tumbling" and (self.width_ms is None or self.width_ms <= 0):
            raise ValueError("tumbling rule requires width_ms > 0")
        if self.kind == "count" and (self.n is None or self.n <= 0):
            raise ValueError("count rule requires n > 0")
        if self.kind == "trigger":
            if not self.trigger_device:
                raise ValueError("trigger rule requires trigger_device")
            for dev, ms in self.staleness_ms.items():
                if ms is not None and ms < 0:
                    raise ValueError(f"staleness_ms for {dev!r} must be >= 0")
        if self.max_lateness_ms < 0:
            raise ValueError("max_lateness_ms must be >= 0")

    @property
    def lateness_us(self) -> int:
        return self.max_lateness_ms * 1000

    @classmethod
    def from_dict(cls, doc: dict) -> "BatchingRule":
        return cls(
            kind=doc.get("kind", ""),
            width_ms=doc.get("width_ms"),
            n=doc.get("n"),
            trigger_device=doc.get("trigger_device"),
            staleness_ms=dict(doc.get("staleness_ms", {})),
            max_lateness_ms=doc.get("max_lateness_ms", 0),
        )


@dataclass(frozen=True)
class Cell:
    present: bool
    age_us: int | None = None
    values: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FusedRecord:
    ts_us: int
    cells: dict  # device_id -> Cell

    def to_dict(self) -> dict:
        return {
            "ts_us": self.ts_us,
            "cells": {
                dev: {"present": c.present, "age_us": c.age_us, "values": dict(c.values)}
                for dev, c in sorted(self.cells.items())
            },
        }


ABSENT = Cell(present=False)


class StreamBuffer:
    """Per-device event store: (ts_us, seq, row_idx, row) kept in ts order."""

    def __init__(self, device_id: str, schema):
        self.device_id = device_id
        self.schema = schema
        self.events: list[tuple[int, int, int, tuple]] = []
        self.seen_seqs: set[int] = set()

    def insert(self, ts_us: int, seq: int, rows) -> None:
        for i, row in enumerate(rows):
            bisect.insort(self.events, (ts_us, seq, i, row))
        self.seen_seqs.add(seq)

    def latest_at(self, ts_us: int):
        """Most recent event with ts <= ts_us, or None."""
        idx = bisect.bisect_right(self.events, (ts_us, math.inf, math.inf, ()))
        if idx == 0:
            return None
        return self.events[idx - 1]

    def prune_below(self, ts_us: int, keep_latest: bool = False) -> None:
        idx = bisect.bisect_left(self.events, (ts_us, -1, -1, ()))
        if keep_latest and idx > 0:
            idx -= 1  # step-join still needs the most recent older value
        if idx > 0:
            del self.events[:idx]


def aggregate_field(ftype: str, cells: list) -> dict:
    """Aggregate one field's values across a batch, in event order."""
    if ftype in NUMERIC_TYPES:
        total = 0
        for v in cells:
            total += v
        return {
            "mean": total / len(cells),
            "min": min(cells),
            "max": max(cells),
            "count": len(cells),
            "last": cells[-1],
        }
    return {"count": len(cells), "last": cells[-1]}


def _aggregate_cell(schema, events) -> Cell:
    values = {}
    for i, fs in enumerate(schema):
        values[fs.name] = aggregate_field(fs.type, [e[3][i] for e in events])
    return Cell(present=True, values=values)


class FusionEngine:
    """Single-writer streaming fusion node: ingest envelopes, poll records.

    All calls for one engine must come from one logical execution context;
    distinct engines are independent.
    """

    def __init__(self, rule: BatchingRule):
        self.rule = rule
        self.buffers: dict[str, StreamBuffer] = {}
        self.max_ts_seen: int | None = None
        self.late_count = 0
        self.duplicate_count = 0
        self._emitted_through: int | None = None  # trigger/count freeze cursor
        self._open_windows: set[int] = set()
        self._pending_rows: list[tuple[int, int, int, tuple]] = []  # count rule
        self._count_schema = None

    @property
    def watermark_us(self) -> int | None:
        if self.max_ts_seen is None:
            return None
        return self.max_ts_seen - self.rule.lateness_us

    def ingest(self, env: Envelope) -> str:
        if env.content_type != CONTENT_ROWS:
            raise FusionError("fusion consumes rows envelopes only")
        if self.rule.kind == "count":
            known = set(self.buffers) | {env.device_id}
            if len(known) > 1:
                raise MultiDeviceUnsupported(
                    f"count rule is single-device, saw {sorted(known)}"
                )
        buf = self.buffers.get(env.device_id)
        if buf is None:
            buf = StreamBuffer(env.device_id, env.schema)
            self.buffers[env.device_id] = buf
        elif buf.schema != env.schema:
            raise SchemaMismatch(
                f"device {env.device_id!r} schema changed from first-seen schema"
            )
        if env.seq in buf.seen_seqs:
            self.duplicate_count += 1
            return DUPLICATE
        wm = self.watermark_us
        if wm is not None and env.ts_us <= wm:
            self.late_count += 1
            return LATE
        buf.insert(env.ts_us, env.seq, env.payload)
        if self.max_ts_seen is None or env.ts_us > self.max_ts_seen:
            self.max_ts_seen = env.ts_us
        if self.rule.kind == "tumbling" and env.payload:
            w = self.rule.width_ms * 1000
            self._open_windows.add((env.ts_us // w) * w)
        return ACCEPTED

    def poll(self) -> list[FusedRecord]:
        wm = self.watermark_us
        if wm is None:
            return []
        return self._emit_up_to(wm)

    def drain(self) -> list[FusedRecord]:
        """End of stream: flush everything (count remainders stay held)."""
        return self._emit_up_to(None)

    def _emit_up_to(self, wm: int | None) -> list[FusedRecord]:
        if self.rule.kind == "trigger":
            return self._emit_trigger(wm)
        if self.rule.kind == "tumbling":
            return self._emit_tumbling(wm)
        return self._emit_count(wm)

    # -- trigger join

    def _emit_trigger(self, wm: int | None) -> list[FusedRecord]:
        trig = self.buffers.get(self.rule.trigger_device)
        if trig is None:
            return []
        out = []
        emit = [e for e in trig.events if wm is None or e[0] <= wm]
        others = sorted(set(self.rule.staleness_ms) - {self.rule.trigger_device})
        for ts, seq, row_idx, row in emit:
            cells = {
                self.rule.trigger_device: Cell(
                    present=True,
                    age_us=0,
                    values={fs.name: row[i] for i, fs in enumerate(trig.schema)},
                )
            }
            for dev in others:
                cells[dev] = self._join_cell(dev, ts)
            out.append(FusedRecord(ts_us=ts, cells=cells))
        if emit:
            last_ts = emit[-1][0]
            trig.events = trig.events[len(emit):]
            for dev in others:
                buf = self.buffers.get(dev)
                if buf is not None:
                    buf.prune_below(last_ts + 1, keep_latest=True)
        return out

    def _join_cell(self, dev: str, trigger_ts: int) -> Cell:
        buf = self.buffers.get(dev)
        if buf is None:
            return ABSENT
        latest = buf.latest_at(trigger_ts)
        if latest is None:
            return ABSENT
        staleness = self.rule.staleness_ms.get(dev)
        age = trigger_ts - latest[0]
        if staleness is not None and age > staleness * 1000:
            return ABSENT
        return Cell(
            present=True,
            age_us=age,
            values={fs.name: latest[3][i] for i, fs in enumerate(buf.schema)},
        )

    # -- tumbling windows

    def _emit_tumbling(self, wm: int | None) -> list[FusedRecord]:
        w = self.rule.width_ms * 1000
        ready = sorted(
            start for start in self._open_windows
            if wm is None or start + w <= wm
        )
        out = []
        for start in ready:
            end = start + w
            cells = {}
            for dev in sorted(self.buffers):
                buf = self.buffers[dev]
                lo = bisect.bisect_left(buf.events, (start, -1, -1, ()))
                hi = bisect.bisect_left(buf.events, (end, -1, -1, ()))
                events = buf.events[lo:hi]
                if events:
                    cells[dev] = _aggregate_cell(buf.schema, events)
            if cells:  # empty windows emit nothing
                out.append(FusedRecord(ts_us=end, cells=cells))
            self._open_windows.discard(start)
        if ready:
            cutoff = ready[-1] + w
            for buf in self.buffers.values():
                buf.prune_below(cutoff)
        return out

    # -- count batches

    def _emit_count(self, wm: int | None) -> list[FusedRecord]:
        for buf in self.buffers.values():
            if wm is None:
                frozen, buf.events = buf.events, []
            else:
                idx = bisect.bisect_right(buf.events, (wm, math.inf, math.inf, ()))
                frozen, buf.events = buf.events[:idx], buf.events[idx:]
            self._pending_rows.extend(frozen)
            if self._count_schema is None:
                self._count_schema = (buf.device_id, buf.schema)
        out = []
        n = self.rule.n
        while len(self._pending_rows) >= n:
            batch, self._pending_rows = self._pending_rows[:n], self._pending_rows[n:]
            dev, schema = self._count_schema
            out.append(FusedRecord(
                ts_us=batch[-1][0],
                cells={dev: _aggregate_cell(schema, batch)},
            ))
        return out


# -- one-shot batch entry points over a finite arrival log -------------------

def run_log(envelopes, rule: BatchingRule) -> tuple[list[FusedRecord], FusionEngine]:
    """Stream a finite arrival-ordered log through an engine and drain it."""
    engine = FusionEngine(rule)
    records = []
    for env in envelopes:
        engine.ingest(env)
        records.extend(engine.poll())
    records.extend(engine.drain())
    return records, engine


def _require_devices(buffers: dict, rule: BatchingRule):
    if rule.kind == "trigger" and rule.trigger_device not in buffers:
        raise UnknownDevice(f"trigger device {rule.trigger_device!r} has no stream")


def fuse_trigger(buffers: dict, rule: BatchingRule) -> list[FusedRecord]:
    """Full trigger join over already-ingested buffers (drained view)."""
    if rule.kind != "trigger":
        raise ValueError("rule kind must be trigger")
    _require_devices(buffers, rule)
    engine = FusionEngine(rule)
    engine.buffers = buffers
    return engine.drain()


def fuse_tumbling(buffers: dict, rule: BatchingRule) -> list[FusedRecord]:
    if rule.kind != "tumbling":
        raise ValueError("rule kind must be tumbling")
    engine = FusionEngine(rule)
    engine.buffers = buffers
    w = rule.width_ms * 1000
    for buf in buffers.values():
        for ts, _, _, _ in buf.events:
            engine._open_windows.add((ts // w) * w)
    return engine.drain()


def fuse_count(buffers: dict, rule: BatchingRule) -> list[FusedRecord]:
    if rule.kind != "count":
        raise ValueError("rule kind must be count")
    if len(buffers) > 1:
        raise MultiDeviceUnsupported(f"count rule is single-device, got {sorted(buffers)}")
    engine = FusionEngine(rule)
    engine.buffers = buffers
    return engine.drain()
