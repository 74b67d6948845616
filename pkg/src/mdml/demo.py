"""Single-process closed-loop demo: sim + pipeline + gateway on the inproc bus.

The driver advances the simulator in lockstep supersteps: publish one tick's
envelopes, drain the pipeline (bounded-queue joins in topo order), then let
the sim apply whatever control arrived before the next step. Trajectories
are therefore fully deterministic for a given seed — wall pacing only adds
sleeps between ticks and never changes a value, so `--pace turbo` replays
the identical experiment as fast as the machine allows.
"""

import json
import logging
import time
from dataclasses import dataclass, field

from mdml.archive import ArchiveWriter
from mdml.envelope import decode, decode_control
from mdml.executor import Executor, ExecutorTarget, FunctionDef, builtin_identity
from mdml.gateway import GatewayService, TokenRecord, TokenTable, create_app, serve_in_thread
from mdml.pipeline import parse_and_validate, run as run_pipeline
from mdml.sim import (
    InstrumentSim,
    SimParams,
    builtin_stability_index,
    builtin_steering_controller,
)
from mdml.transport import InprocTransport

log = logging.getLogger(__name__)

EXPERIMENT_ID = "fsp-001"

# The analysis node runs with a cv ceiling above the worst achievable pixel
# cv (~1.1 at s=0) so the index keeps a usable gradient over the whole u
# range; at the stability_index default of 0.5 the signal saturates to 0
# for s < 0.5 and the hill climber would pin itself at a bound.
ANALYSIS_CV_MAX = 1.25

DEMO_TOKENS = [
    {"token": "demo-admin-token", "principal": "operator",
     "scopes": ["read", "control"]},
    {"token": "demo-viewer-token", "principal": "viewer", "scopes": ["read"]},
]


@dataclass
class DemoSettings:
    seed: int = 42
    sigma: float = 0.02
    u0: float = 0.9
    duration_s: float = 60.0
    plif_period_ms: int = 50
    spectro_period_ms: int = 5000
    psd_period_ms: int = 5000
    pace: str = "wall"  # wall | turbo
    decide_every: int = 20
    step_size: float = 0.05
    bounds: tuple = (0.0, 1.0)
    open_loop: bool = False
    experiment_id: str = EXPERIMENT_ID
    archive_dir: str | None = None
    gateway_port: int | None = 8080  # None = no gateway
    tokens_path: str | None = None
    report_path: str | None = None


@dataclass
class DemoReport:
    settings: DemoSettings
    ticks: int = 0
    s_trace: list = field(default_factory=list)
    index_trace: list = field(default_factory=list)
    u_commands: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def tail_mean_index(self, tail_ticks: int) -> float | None:
        tail = self.index_trace[-tail_ticks:]
        return sum(tail) / len(tail) if tail else None

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.settings.experiment_id,
            "seed": self.settings.seed,
            "sigma": self.settings.sigma,
            "u0": self.settings.u0,
            "open_loop": self.settings.open_loop,
            "ticks": self.ticks,
            "s_trace": self.s_trace,
            "index_trace": self.index_trace,
            "u_commands": self.u_commands,
            "final_u": self.u_commands[-1] if self.u_commands else self.settings.u0,
            "wall_seconds": self.wall_seconds,
        }


def pipeline_document(settings: DemoSettings) -> dict:
    nodes = [
        {"id": "src-plif", "kind": "source", "device": "plif"},
        {"id": "src-spectro", "kind": "source", "device": "spectro"},
        {"id": "src-psd", "kind": "source", "device": "psd"},
        {"id": "stability", "kind": "function", "function": "stability_index",
         "version": "1", "target": "local", "timeout_ms": 5000,
         "params": {"cv_max": ANALYSIS_CV_MAX}},
    ]
    edges = [{"from": "src-plif", "to": "stability"}]
    if settings.archive_dir is not None:
        nodes.append({"id": "archive", "kind": "archive_sink"})
        edges += [
            {"from": "src-plif", "to": "archive"},
            {"from": "src-spectro", "to": "archive"},
            {"from": "src-psd", "to": "archive"},
        ]
    if not settings.open_loop:
        nodes += [
            {"id": "controller", "kind": "function",
             "function": "steering_controller", "version": "1", "target": "local",
             "timeout_ms": 5000, "feedback": True,
             "params": {
                 "u0": settings.u0,
                 "every": settings.decide_every,
                 "step_size": settings.step_size,
                 "bounds": list(settings.bounds),
             }},
            {"id": "steer", "kind": "steer", "device": "burner",
             "command_name": "set_u", "params_from": {"u": "value.u"},
             "control_device": "steer"},
        ]
        edges += [
            {"from": "stability", "to": "controller"},
            {"from": "controller", "to": "steer"},
        ]
    return {
        "pipeline_id": "flame-qc-loop",
        "experiment_id": settings.experiment_id,
        "executors": [{"target_id": "local", "kind": "inline"}],
        "nodes": nodes,
        "edges": edges,
    }


def make_executor() -> Executor:
    ex = Executor()
    ex.register(FunctionDef(name="identity", version="1", fn=builtin_identity))
    ex.register(FunctionDef(name="stability_index", version="1",
                            fn=builtin_stability_index))
    ex.register(FunctionDef(name="steering_controller", version="1",
                            fn=builtin_steering_controller))
    ex.add_target(ExecutorTarget(target_id="local", kind="inline"))
    return ex


def load_tokens(settings: DemoSettings) -> TokenTable:
    if settings.tokens_path:
        return TokenTable.from_file(settings.tokens_path)
    return TokenTable([
        TokenRecord(t["token"], t["principal"], frozenset(t["scopes"]))
        for t in DEMO_TOKENS
    ])


def run_demo(settings: DemoSettings, transport=None) -> DemoReport:
    own_transport = transport is None
    if own_transport:
        transport = InprocTransport()
    executor = make_executor()

    archive_writer = None
    if settings.archive_dir is not None:
        archive_writer = ArchiveWriter(settings.archive_dir, settings.experiment_id)

    config = parse_and_validate(json.dumps(pipeline_document(settings)).encode())
    handle = run_pipeline(config, transport, executor, archive_writer=archive_writer)

    gateway = None
    server = None
    if settings.gateway_port is not None:
        gateway = GatewayService(transport, load_tokens(settings),
                                 pipeline_handle=handle)
        gateway.start()
        server, _, port = serve_in_thread(
            create_app(gateway), port=settings.gateway_port
        )
        log.info("gateway listening on http://127.0.0.1:%d (tokens: %s)",
                 port, "file" if settings.tokens_path else "built-in demo tokens")

    # Test-side observers: every trajectory below is read back off the bus,
    # not out of the sim's internals.
    plif_sub = transport.subscribe(f"mdml/v1/{settings.experiment_id}/data/plif")
    results_sub = transport.subscribe(
        f"mdml/v1/{settings.experiment_id}/results/stability")
    control_sub = transport.subscribe(
        f"mdml/v1/{settings.experiment_id}/control/burner")

    params = SimParams(
        seed=settings.seed, sigma=settings.sigma,
        plif_period_ms=settings.plif_period_ms,
        spectro_period_ms=settings.spectro_period_ms,
        psd_period_ms=settings.psd_period_ms,
    )
    sim = InstrumentSim(params, transport, settings.experiment_id,
                        u0=settings.u0, listen_control=not settings.open_loop)

    report = DemoReport(settings=settings)
    n_ticks = int(settings.duration_s * 1000 / settings.plif_period_ms)
    tick_s = settings.plif_period_ms / 1000.0
    started = time.monotonic()
    next_deadline = started

    try:
        for k in range(n_ticks):
            sim.tick()
            handle.drain()
            if settings.pace == "wall":
                next_deadline += tick_s
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        handle.drain()
    finally:
        handle.stop()
        if archive_writer is not None:
            archive_writer.close()
        if gateway is not None:
            gateway.stop()
        if server is not None:
            server.should_exit = True

    report.ticks = n_ticks
    report.wall_seconds = time.monotonic() - started

    while (item := plif_sub.get_nowait()) is not None:
        env = decode(item[1])
        report.s_trace.append(env.rows()[0][0])
    while (item := results_sub.get_nowait()) is not None:
        report.index_trace.append(json.loads(item[1])["value"]["index"])
    while (item := control_sub.get_nowait()) is not None:
        report.u_commands.append(decode_control(item[1]).params["u"])

    if settings.report_path:
        with open(settings.report_path, "w") as f:
            json.dump(report.to_dict(), f)
        log.info("wrote demo report to %s", settings.report_path)

    if own_transport:
        transport.close()
    return report
