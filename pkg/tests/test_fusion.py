import random

import pytest

from mdml.envelope import Envelope, FieldSpec
from mdml.fusion import (
    ACCEPTED,
    DUPLICATE,
    LATE,
    BatchingRule,
    FusionEngine,
    MultiDeviceUnsupported,
    SchemaMismatch,
    UnknownDevice,
    fuse_count,
    fuse_trigger,
    fuse_tumbling,
    run_log,
)
from tests.fusion_oracle import oracle_fuse

F64 = lambda name: FieldSpec(name, "f64")


def env(dev, seq, ts_ms, values, fields=("v",), exp="e1"):
    return Envelope(
        experiment_id=exp, device_id=dev, seq=seq, ts_us=ts_ms * 1000,
        content_type="rows",
        schema=tuple(F64(f) for f in fields),
        payload=(tuple(float(v) for v in values),),
    )


class TestIngest:
    def test_duplicate_seq_dropped(self):
        e = FusionEngine(BatchingRule(kind="trigger", trigger_device="a"))
        first = env("a", 0, 100, [1])
        assert e.ingest(first) == ACCEPTED
        assert e.ingest(first) == DUPLICATE
        assert e.duplicate_count == 1

    def test_late_event_rejected_at_watermark(self):
        e = FusionEngine(BatchingRule(kind="trigger", trigger_device="a", max_lateness_ms=0))
        assert e.ingest(env("a", 0, 100, [1])) == ACCEPTED
        assert e.ingest(env("a", 1, 50, [2])) == LATE
        assert e.late_count == 1

    def test_within_lateness_accepted(self):
        e = FusionEngine(BatchingRule(kind="trigger", trigger_device="a", max_lateness_ms=60))
        assert e.ingest(env("a", 0, 100, [1])) == ACCEPTED
        assert e.ingest(env("a", 1, 50, [2])) == ACCEPTED

    def test_schema_change_rejected(self):
        e = FusionEngine(BatchingRule(kind="trigger", trigger_device="a"))
        e.ingest(env("a", 0, 0, [1]))
        bad = Envelope(
            experiment_id="e1", device_id="a", seq=1, ts_us=1000,
            content_type="rows", schema=(FieldSpec("v", "i64"),), payload=((3,),),
        )
        with pytest.raises(SchemaMismatch):
            e.ingest(bad)

    def test_count_rule_rejects_second_device(self):
        e = FusionEngine(BatchingRule(kind="count", n=2))
        e.ingest(env("a", 0, 0, [1]))
        with pytest.raises(MultiDeviceUnsupported):
            e.ingest(env("b", 0, 1, [2]))


class TestTriggerJoin:
    def rule(self, staleness=60):
        return BatchingRule(
            kind="trigger", trigger_device="a",
            staleness_ms={"b": staleness}, max_lateness_ms=0,
        )

    def test_spec_example_join(self):
        log = [
            env("a", 0, 0, [1]),
            env("b", 0, 30, [9]),
            env("a", 1, 50, [2]),
            env("a", 2, 100, [3]),
        ]
        records, _ = run_log(log, self.rule(staleness=60))
        assert [r.ts_us for r in records] == [0, 50_000, 100_000]

        r0, r50, r100 = records
        assert r0.cells["a"].values == {"v": 1.0}
        assert not r0.cells["b"].present

        assert r50.cells["b"].present
        assert r50.cells["b"].values == {"v": 9.0}
        assert r50.cells["b"].age_us == 20_000

        assert not r100.cells["b"].present  # age 70ms > 60ms

    def test_no_b_events_all_absent(self):
        log = [env("a", i, i * 50, [i]) for i in range(4)]
        records, _ = run_log(log, self.rule())
        assert all(not r.cells["b"].present for r in records)
        assert all(r.cells["b"].values == {} for r in records)

    def test_unbounded_staleness(self):
        log = [env("b", 0, 30, [9])] + [env("a", i, 100 + i * 1000, [i]) for i in range(3)]
        records, _ = run_log(log, self.rule(staleness=None))
        assert all(r.cells["b"].present for r in records)
        assert records[-1].cells["b"].age_us == (100 + 2000 - 30) * 1000

    def test_staleness_boundary_is_closed(self):
        log = [env("b", 0, 40, [9]), env("a", 0, 100, [1])]
        records, _ = run_log(log, self.rule(staleness=60))
        assert records[0].cells["b"].present  # age == staleness exactly

    def test_emission_waits_for_watermark(self):
        e = FusionEngine(BatchingRule(
            kind="trigger", trigger_device="a", staleness_ms={"b": None},
            max_lateness_ms=50,
        ))
        e.ingest(env("a", 0, 100, [1]))
        assert e.poll() == []  # watermark still at 50ms
        e.ingest(env("a", 1, 200, [2]))
        ready = e.poll()
        assert [r.ts_us for r in ready] == [100_000]
        assert [r.ts_us for r in e.drain()] == [200_000]

    def test_unknown_trigger_device(self):
        with pytest.raises(UnknownDevice):
            fuse_trigger({}, self.rule())


class TestTumbling:
    def test_spec_example_aggregates(self):
        rule = BatchingRule(kind="tumbling", width_ms=100)
        log = [env("a", 0, 0, [2]), env("a", 1, 50, [4])]
        records, _ = run_log(log, rule)
        assert len(records) == 1
        rec = records[0]
        assert rec.ts_us == 100_000
        agg = rec.cells["a"].values["v"]
        assert agg == {"mean": 3.0, "min": 2.0, "max": 4.0, "count": 2, "last": 4.0}

    def test_boundary_event_goes_to_next_window(self):
        rule = BatchingRule(kind="tumbling", width_ms=100)
        log = [env("a", 0, 100, [7]), env("a", 1, 150, [9])]
        records, _ = run_log(log, rule)
        assert [r.ts_us for r in records] == [200_000]

    def test_single_event_window(self):
        rule = BatchingRule(kind="tumbling", width_ms=100)
        records, _ = run_log([env("a", 0, 10, [5])], rule)
        agg = records[0].cells["a"].values["v"]
        assert agg["mean"] == agg["min"] == agg["max"] == agg["last"] == 5.0
        assert agg["count"] == 1

    def test_empty_windows_emit_nothing(self):
        rule = BatchingRule(kind="tumbling", width_ms=100)
        log = [env("a", 0, 50, [1]), env("a", 1, 950, [2])]
        records, _ = run_log(log, rule)
        assert [r.ts_us for r in records] == [100_000, 1_000_000]

    def test_str_fields_get_count_last_only(self):
        rule = BatchingRule(kind="tumbling", width_ms=100)
        e = Envelope(
            experiment_id="e1", device_id="a", seq=0, ts_us=0, content_type="rows",
            schema=(FieldSpec("tag", "str"),), payload=(("x",), ("y",)),
        )
        records, _ = run_log([e], rule)
        assert records[0].cells["a"].values["tag"] == {"count": 2, "last": "y"}


class TestCount:
    def test_spec_example_remainder_held(self):
        rule = BatchingRule(kind="count", n=2)
        log = [env("a", i, i * 10, [i + 1]) for i in range(3)]
        records, _ = run_log(log, rule)
        assert len(records) == 1
        agg = records[0].cells["a"].values["v"]
        assert agg["mean"] == 1.5
        assert agg["count"] == 2
        assert records[0].ts_us == 10_000  # ts of the 2nd contributing row

    def test_n_equals_one(self):
        rule = BatchingRule(kind="count", n=1)
        log = [env("a", i, i * 10, [i]) for i in range(3)]
        records, _ = run_log(log, rule)
        assert len(records) == 3
        assert all(r.cells["a"].values["v"]["count"] == 1 for r in records)

    def test_multi_device_batch_call_rejected(self):
        with pytest.raises(MultiDeviceUnsupported):
            fuse_count({"a": None, "b": None}, BatchingRule(kind="count", n=2))


# --- randomized equivalence against the offline oracle ----------------------

FIELD_SETS = [("v",), ("x", "y")]


def generate_log(rng: random.Random, n_devices=None, n_events=None,
                 lateness_ms=None, beyond_lateness=False):
    n_devices = n_devices or rng.randint(1, 5)
    n_events = n_events or rng.randint(1, 200)
    lateness_ms = lateness_ms if lateness_ms is not None else rng.choice([0, 10, 50])
    devices = [f"d{i}" for i in range(n_devices)]
    fields = {d: rng.choice(FIELD_SETS) for d in devices}
    seqs = {d: 0 for d in devices}
    events = []
    for _ in range(n_events):
        d = rng.choice(devices)
        ts = rng.randint(0, 5000)
        n_rows = rng.choice([1, 1, 1, 2])
        rows = tuple(
            tuple(float(rng.randint(-50, 50)) for _ in fields[d])
            for _ in range(n_rows)
        )
        events.append(Envelope(
            experiment_id="e1", device_id=d, seq=seqs[d], ts_us=ts * 1000,
            content_type="rows",
            schema=tuple(F64(f) for f in fields[d]),
            payload=rows,
        ))
        seqs[d] += 1

    # Arrival order: sorted by ts with bounded displacement. Jitter below the
    # lateness bound keeps everything admissible; beyond it creates real
    # late arrivals, which the oracle must reject identically.
    spread = lateness_ms * 1000
    if beyond_lateness:
        spread = spread * 3 + 20_000
    arrivals = sorted(
        events, key=lambda e: e.ts_us + rng.uniform(0, max(spread * 0.9, 1))
    )
    # Duplicate ~10% of deliveries somewhere later in the log.
    out = list(arrivals)
    for e in arrivals:
        if rng.random() < 0.1:
            out.insert(rng.randint(out.index(e), len(out)), e)
    return out, devices, lateness_ms


def random_rule(rng, devices, lateness_ms, kind):
    if kind == "trigger":
        trigger = rng.choice(devices)
        staleness = {
            d: rng.choice([None, 0, 20, 100, 1000])
            for d in devices if d != trigger and rng.random() < 0.8
        }
        return BatchingRule(kind="trigger", trigger_device=trigger,
                            staleness_ms=staleness, max_lateness_ms=lateness_ms)
    if kind == "tumbling":
        return BatchingRule(kind="tumbling", width_ms=rng.choice([50, 100, 500]),
                            max_lateness_ms=lateness_ms)
    return BatchingRule(kind="count", n=rng.choice([1, 2, 7]),
                        max_lateness_ms=lateness_ms)


@pytest.mark.parametrize("kind", ["trigger", "tumbling", "count"])
@pytest.mark.parametrize("beyond", [False, True])
def test_streaming_equals_oracle(kind, beyond):
    rng = random.Random(hash((kind, beyond)) & 0xFFFF)
    for trial in range(30):
        n_devices = 1 if kind == "count" else None
        log, devices, lateness = generate_log(
            rng, n_devices=n_devices, beyond_lateness=beyond
        )
        rule = random_rule(rng, devices, lateness, kind)
        got, _ = run_log(log, rule)
        want = oracle_fuse(log, rule)
        assert got == want, f"{kind} trial {trial} diverged from oracle"


def test_dedup_idempotence_every_envelope_twice():
    rng = random.Random(42)
    for kind in ["trigger", "tumbling", "count"]:
        n_devices = 1 if kind == "count" else 3
        log, devices, lateness = generate_log(rng, n_devices=n_devices, lateness_ms=50)
        rule = random_rule(rng, devices, lateness, kind)
        base, _ = run_log(log, rule)
        doubled = [e for e in log for _ in range(2)]
        got, _ = run_log(doubled, rule)
        assert got == base


def test_monotone_output_ts():
    rng = random.Random(7)
    for _ in range(10):
        log, devices, lateness = generate_log(rng)
        rule = random_rule(rng, devices, lateness, "trigger")
        engine = FusionEngine(rule)
        emitted = []
        for e in log:
            engine.ingest(e)
            emitted.extend(engine.poll())
        emitted.extend(engine.drain())
        ts = [r.ts_us for r in emitted]
        assert ts == sorted(ts)


def test_batch_helpers_match_run_log():
    rng = random.Random(3)
    log, devices, lateness = generate_log(rng, n_devices=3, lateness_ms=10)
    rule = random_rule(rng, devices, lateness, "tumbling")
    engine = FusionEngine(rule)
    for e in log:
        engine.ingest(e)
    via_helper = fuse_tumbling(engine.buffers, rule)
    via_stream, _ = run_log(log, rule)
    assert via_helper == via_stream
