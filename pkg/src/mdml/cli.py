"""Command-line entrypoint: `mdml <subcommand>`.

Exit codes: 0 success, 1 validation/runtime error, 2 usage error.
"""

import argparse
import json
import logging
import signal
import sys
import threading
import time

log = logging.getLogger(__name__)


def _add_broker_args(p):
    p.add_argument("--broker", default="mqtt://localhost:1883",
                   help="MQTT 3.1.1 broker URI (default %(default)s)")
    p.add_argument("--client-id", default="mdml",
                   help="MQTT client id (default %(default)s)")


def _make_mqtt_transport(args):
    from mdml.transport import MqttTransport, TransportConfig

    return MqttTransport(TransportConfig(
        backend="mqtt", broker_uri=args.broker, client_id=args.client_id,
    ))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdml",
        description="Streaming platform for scientific-instrument IoT data",
    )
    # Accepted both before and after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    # pipeline
    p_pipe = sub.add_parser("pipeline", help="validate or run a pipeline")
    pipe_sub = p_pipe.add_subparsers(dest="pipeline_command", required=True)
    p_validate = pipe_sub.add_parser("validate", parents=[common], help="validate a pipeline document")
    p_validate.add_argument("--config", required=True)
    p_run = pipe_sub.add_parser("run", parents=[common], help="run a pipeline against a broker")
    p_run.add_argument("--config", required=True)
    _add_broker_args(p_run)
    p_run.add_argument("--archive-dir", default=None)

    # sim
    p_sim = sub.add_parser("sim", help="run the instrument simulator")
    sim_sub = p_sim.add_subparsers(dest="sim_command", required=True)
    p_sim_run = sim_sub.add_parser("run", parents=[common], help="stream simulated sensor data")
    _add_broker_args(p_sim_run)
    p_sim_run.add_argument("--experiment", required=True)
    p_sim_run.add_argument("--seed", type=int, default=0)
    p_sim_run.add_argument("--sigma", type=float, default=0.02)
    p_sim_run.add_argument("--u0", type=float, default=0.9)
    p_sim_run.add_argument("--plif-period-ms", type=int, default=50)
    p_sim_run.add_argument("--spectro-period-ms", type=int, default=5000)
    p_sim_run.add_argument("--psd-period-ms", type=int, default=5000)
    p_sim_run.add_argument("--duration-s", type=float, default=None,
                           help="stop after this much simulated time (default: run forever)")
    p_sim_run.add_argument("--listen-control", action="store_true",
                           help="subscribe to the control topic and apply set_u")

    # archive
    p_arch = sub.add_parser("archive", help="verify or replay an archive")
    arch_sub = p_arch.add_subparsers(dest="archive_command", required=True)
    p_verify = arch_sub.add_parser("verify", parents=[common], help="recompute checksums and counts")
    p_verify.add_argument("--dir", required=True)
    p_replay = arch_sub.add_parser("replay", parents=[common], help="republish an archived stream")
    p_replay.add_argument("--dir", required=True)
    p_replay.add_argument("--speed", default="1",
                          help="time-scale multiplier, or 'inf' (default 1)")
    _add_broker_args(p_replay)

    # gateway
    p_gw = sub.add_parser("gateway", parents=[common], help="run the HTTP/WebSocket gateway")
    _add_broker_args(p_gw)
    p_gw.add_argument("--port", type=int, default=8080)
    p_gw.add_argument("--tokens", required=True, help="token table JSON file")
    p_gw.add_argument("--ring-size", type=int, default=10_000)

    # demo
    p_demo = sub.add_parser(
        "demo",
        parents=[common],
        help="run sim + pipeline + gateway in one process on the inproc bus",
    )
    p_demo.add_argument("--seed", type=int, default=42)
    p_demo.add_argument("--sigma", type=float, default=0.02)
    p_demo.add_argument("--u0", type=float, default=0.9)
    p_demo.add_argument("--duration-s", type=float, default=60.0)
    p_demo.add_argument("--plif-period-ms", type=int, default=50)
    p_demo.add_argument("--spectro-period-ms", type=int, default=5000)
    p_demo.add_argument("--psd-period-ms", type=int, default=5000)
    p_demo.add_argument("--pace", choices=["wall", "turbo"], default="wall",
                        help="wall: real-time pacing; turbo: as fast as possible")
    p_demo.add_argument("--decide-every", type=int, default=20,
                        help="controller decision cadence in plif frames")
    p_demo.add_argument("--step-size", type=float, default=0.05)
    p_demo.add_argument("--open-loop", action="store_true",
                        help="disable the controller; u stays at --u0")
    p_demo.add_argument("--port", type=int, default=8080,
                        help="gateway port (0 picks a free port)")
    p_demo.add_argument("--no-gateway", action="store_true")
    p_demo.add_argument("--tokens", default=None,
                        help="token table JSON (default: built-in demo tokens)")
    p_demo.add_argument("--archive-dir", default=None)
    p_demo.add_argument("--report", default=None,
                        help="write trajectory report JSON here")
    return parser


def cmd_pipeline_validate(args) -> int:
    from mdml.pipeline import PipelineError, parse_and_validate

    try:
        document = open(args.config, "rb").read()
    except OSError as e:
        print(f"cannot read {args.config}: {e}", file=sys.stderr)
        return 1
    try:
        config = parse_and_validate(document)
    except PipelineError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(f"ok: {config.pipeline_id} ({len(config.nodes)} nodes, "
          f"{len(config.edges)} edges)")
    return 0


def _wait_for_interrupt(stop_event: threading.Event):
    def handler(signum, frame):
        stop_event.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    while not stop_event.wait(0.2):
        pass


def cmd_pipeline_run(args) -> int:
    from mdml.archive import ArchiveWriter
    from mdml.demo import make_executor
    from mdml.pipeline import PipelineError, parse_and_validate, run

    try:
        config = parse_and_validate(open(args.config, "rb").read())
    except (OSError, PipelineError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    transport = _make_mqtt_transport(args)
    executor = make_executor()
    writer = None
    if args.archive_dir:
        writer = ArchiveWriter(args.archive_dir, config.experiment_id)
    handle = run(config, transport, executor, archive_writer=writer)
    log.info("pipeline %s running; ctrl-c to stop", config.pipeline_id)
    stop = threading.Event()
    _wait_for_interrupt(stop)
    handle.stop()
    if writer is not None:
        writer.close()
    transport.close()
    return 0


def cmd_sim_run(args) -> int:
    from mdml.sim import InstrumentSim, SimParams

    transport = _make_mqtt_transport(args)
    params = SimParams(
        seed=args.seed, sigma=args.sigma,
        plif_period_ms=args.plif_period_ms,
        spectro_period_ms=args.spectro_period_ms,
        psd_period_ms=args.psd_period_ms,
    )
    sim = InstrumentSim(params, transport, args.experiment,
                        u0=args.u0, listen_control=args.listen_control)
    n_ticks = None
    if args.duration_s is not None:
        n_ticks = int(args.duration_s * 1000 / args.plif_period_ms)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    tick_s = args.plif_period_ms / 1000.0
    next_deadline = time.monotonic()
    k = 0
    while not stop.is_set() and (n_ticks is None or k < n_ticks):
        sim.tick()
        k += 1
        next_deadline += tick_s
        delay = next_deadline - time.monotonic()
        if delay > 0 and stop.wait(delay):
            break
    transport.close()
    return 0


def cmd_archive_verify(args) -> int:
    from mdml.archive import ArchiveError, verify

    try:
        report = verify(args.dir)
    except ArchiveError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if report.clean:
        print("archive clean")
        return 0
    for p in report.problems:
        print(f"corrupt: {p}", file=sys.stderr)
    return 1


def cmd_archive_replay(args) -> int:
    from mdml.archive import ArchiveError, replay

    speed = float("inf") if args.speed in ("inf", "infinity") else float(args.speed)
    transport = _make_mqtt_transport(args)
    try:
        n = replay(args.dir, speed, transport)
    except (ArchiveError, ValueError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        transport.close()
    print(f"replayed {n} envelopes")
    return 0


def cmd_gateway(args) -> int:
    from mdml.gateway import GatewayService, TokenTable, create_app, serve_in_thread

    try:
        tokens = TokenTable.from_file(args.tokens)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"cannot load tokens: {e}", file=sys.stderr)
        return 1
    transport = _make_mqtt_transport(args)
    service = GatewayService(transport, tokens, ring_size=args.ring_size)
    service.start()
    server, thread, port = serve_in_thread(create_app(service), port=args.port)
    log.info("gateway on http://127.0.0.1:%d", port)
    stop = threading.Event()
    _wait_for_interrupt(stop)
    server.should_exit = True
    thread.join(timeout=5)
    service.stop()
    transport.close()
    return 0


def cmd_demo(args) -> int:
    from mdml.demo import DemoReport, DemoSettings, run_demo

    settings = DemoSettings(
        seed=args.seed, sigma=args.sigma, u0=args.u0,
        duration_s=args.duration_s,
        plif_period_ms=args.plif_period_ms,
        spectro_period_ms=args.spectro_period_ms,
        psd_period_ms=args.psd_period_ms,
        pace=args.pace,
        decide_every=args.decide_every,
        step_size=args.step_size,
        open_loop=args.open_loop,
        gateway_port=None if args.no_gateway else args.port,
        tokens_path=args.tokens,
        archive_dir=args.archive_dir,
        report_path=args.report,
    )
    report = run_demo(settings)
    final_u = report.u_commands[-1] if report.u_commands else settings.u0
    tail = report.tail_mean_index(tail_ticks=int(20_000 / settings.plif_period_ms))
    print(json.dumps({
        "ticks": report.ticks,
        "final_u": final_u,
        "decisions": len(report.u_commands),
        "tail_mean_index": tail,
        "wall_seconds": round(report.wall_seconds, 3),
    }))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    dispatch = {
        ("pipeline", "validate"): cmd_pipeline_validate,
        ("pipeline", "run"): cmd_pipeline_run,
        ("sim", "run"): cmd_sim_run,
        ("archive", "verify"): cmd_archive_verify,
        ("archive", "replay"): cmd_archive_replay,
    }
    if args.command == "pipeline":
        fn = dispatch[("pipeline", args.pipeline_command)]
    elif args.command == "sim":
        fn = dispatch[("sim", args.sim_command)]
    elif args.command == "archive":
        fn = dispatch[("archive", args.archive_command)]
    elif args.command == "gateway":
        fn = cmd_gateway
    else:
        fn = cmd_demo
    try:
        return fn(args)
    except KeyboardInterrupt:
        return 1
    except Exception as e:  # noqa: BLE001 - report, don't traceback-spam operators
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
