"""Deterministic flame-spray-pyrolysis instrument simulator.

The flame is a one-knob process: a control setting u in [0,1] with a
quadratic response surface s_target(u) = max(0, 1 - beta*(u - u_opt)^2)
and first-order relaxation s' = s + alpha*(s_target - s) + sigma*noise.
PLIF frames carry the observable signature: pixel noise scales with
(1 - s), so a stable flame images flat and an unstable one speckled.
Spectroscopy and particle-size summaries ride slower cadences.

Everything random is drawn from a counter-based generator keyed by
(seed, stream name, tick), so a given seed fully determines every emitted
byte regardless of call ordering, and an offline recurrence can reproduce
the exact trajectory.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from mdml.envelope import (
    Blob,
    ControlMessage,
    Envelope,
    FieldSpec,
    decode_control,
    encode,
    topic_for,
)

log = logging.getLogger(__name__)

PLIF_DEVICE = "plif"
SPECTRO_DEVICE = "spectro"
PSD_DEVICE = "psd"
CONTROL_DEVICE = "burner"

FRAME_MEDIA_TYPE = "application/x-f64-grid"


class SimError(Exception):
    pass


class EmptyFrame(SimError):
    pass


class ZeroMean(SimError):
    pass


class EmptyHistory(SimError):
    pass


@dataclass(frozen=True)
class SimParams:
    u_opt: float = 0.5
    beta: float = 4.0
    alpha: float = 0.2
    sigma: float = 0.02
    plif_period_ms: int = 50
    spectro_period_ms: int = 5000
    psd_period_ms: int = 5000
    frame_size: int = 16
    cv_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.beta < 0 or self.sigma < 0:
            raise ValueError("beta and sigma must be >= 0")
        if min(self.plif_period_ms, self.spectro_period_ms, self.psd_period_ms) <= 0:
            raise ValueError("periods must be > 0")
        if not 0 <= self.u_opt <= 1:
            raise ValueError("u_opt must be in [0, 1]")
        if self.cv_max <= 0 or self.frame_size <= 0:
            raise ValueError("cv_max and frame_size must be > 0")


@dataclass(frozen=True)
class SimState:
    s: float
    u: float
    k: int = 0


def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def stream_rng(seed: int, stream: str, k: int) -> np.random.Generator:
    """Splittable per-(stream, tick) generator; immune to call reordering."""
    digest = hashlib.blake2b(f"{seed}/{stream}/{k}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def s_target(u: float, params: SimParams) -> float:
    return max(0.0, 1.0 - params.beta * (u - params.u_opt) ** 2)


def step(state: SimState, params: SimParams) -> SimState:
    """One relaxation step toward s_target(u), with optional process noise.

    The noise draw is keyed by the pre-increment step counter.
    """
    noise = 0.0
    if params.sigma > 0:
        noise = params.sigma * float(stream_rng(params.seed, "dyn", state.k).standard_normal())
    s_new = clamp01(state.s + params.alpha * (s_target(state.u, params) - state.s) + noise)
    return replace(state, s=s_new, k=state.k + 1)


# --- sensor emission ---------------------------------------------------------

PLIF_SCHEMA = (FieldSpec("s_true", "f64"),)
PSD_SCHEMA = (FieldSpec("gm_nm", "f64", "nm"), FieldSpec("gsd", "f64"))
SPECTRO_SCHEMA = tuple(FieldSpec(f"bin_{j:02d}", "f64") for j in range(64))


def plif_frame(s: float, params: SimParams, k: int) -> np.ndarray:
    """Square pixel grid: 100 * (1 + (1-s) * eta), eta ~ N(0,1) per pixel."""
    n = params.frame_size
    eta = stream_rng(params.seed, "plif", k).standard_normal(n * n)
    return (100.0 * (1.0 + (1.0 - s) * eta)).reshape(n, n)


def emit_plif(state: SimState, params: SimParams, seq: int, ts_us: int,
              experiment_id: str) -> Envelope:
    frame = plif_frame(state.s, params, state.k)
    n = params.frame_size
    return Envelope(
        experiment_id=experiment_id,
        device_id=PLIF_DEVICE,
        seq=seq,
        ts_us=ts_us,
        content_type="blob",
        schema=PLIF_SCHEMA,
        payload=Blob(
            media_type=f"{FRAME_MEDIA_TYPE};rows={n};cols={n};order=C",
            data=frame.astype("<f8").tobytes(),
            rows=((state.s,),),
        ),
    )


def spectro_bins(s: float, params: SimParams, k: int) -> np.ndarray:
    j = np.arange(64, dtype=np.float64)
    base = 10.0 * np.exp(-((j - 32.0) ** 2) / 128.0) * (0.5 + 0.5 * s)
    if params.sigma > 0:
        base = base + 0.1 * stream_rng(params.seed, "spectro", k).standard_normal(64)
    return base


def emit_spectroscopy(state: SimState, params: SimParams, seq: int, ts_us: int,
                      experiment_id: str) -> Envelope:
    return Envelope(
        experiment_id=experiment_id,
        device_id=SPECTRO_DEVICE,
        seq=seq,
        ts_us=ts_us,
        content_type="rows",
        schema=SPECTRO_SCHEMA,
        payload=(tuple(float(v) for v in spectro_bins(state.s, params, state.k)),),
    )


def psd_values(s: float, params: SimParams, k: int) -> tuple[float, float]:
    gm_nm = 20.0 + 30.0 * (1.0 - s)
    gsd = 1.3 + 0.4 * (1.0 - s)
    if params.sigma > 0:
        xi = stream_rng(params.seed, "psd", k).standard_normal(2)
        gm_nm += 0.01 * gm_nm * float(xi[0])
        gsd += 0.01 * gsd * float(xi[1])
    return gm_nm, gsd


def emit_psd(state: SimState, params: SimParams, seq: int, ts_us: int,
             experiment_id: str) -> Envelope:
    gm_nm, gsd = psd_values(state.s, params, state.k)
    return Envelope(
        experiment_id=experiment_id,
        device_id=PSD_DEVICE,
        seq=seq,
        ts_us=ts_us,
        content_type="rows",
        schema=PSD_SCHEMA,
        payload=((gm_nm, gsd),),
    )


# --- analysis ----------------------------------------------------------------

def stability_index(frame, cv_max: float = 0.5) -> float:
    """1 - min(1, cv/cv_max), cv = population stddev / mean magnitude."""
    pixels = np.asarray(frame, dtype=np.float64).ravel()
    if pixels.size == 0:
        raise EmptyFrame("frame has no pixels")
    mean = float(pixels.mean())
    if mean == 0.0:
        raise ZeroMean("frame mean is zero; cv undefined")
    cv = float(pixels.std()) / abs(mean)
    return 1.0 - min(1.0, cv / cv_max)


def controller_step(history, step_size: float, bounds=(0.0, 1.0)) -> float:
    """Hill-climbing move from a history of (u, index) pairs.

    One entry: exploratory move up. Two or more: move in the direction that
    last improved the index (ties break upward), clamped to bounds.
    """
    if not history:
        raise EmptyHistory("controller needs at least one (u, index) entry")
    if step_size <= 0:
        raise ValueError("step_size must be > 0")
    lo, hi = bounds
    u_now, index_now = history[-1]
    if len(history) < 2:
        return min(hi, max(lo, u_now + step_size))
    u_prev, index_prev = history[-2]
    product = (index_now - index_prev) * (u_now - u_prev)
    direction = -1.0 if product < 0 else 1.0
    return min(hi, max(lo, u_now + direction * step_size))


# --- executor builtins -------------------------------------------------------

def decode_frame(blob_wire: dict) -> np.ndarray:
    import base64

    data = base64.b64decode(blob_wire["data"])
    return np.frombuffer(data, dtype="<f8")


def _pixels_from_record(record: dict) -> np.ndarray:
    """Pull a pixel vector out of whatever record shape arrives.

    Accepts a blob envelope (decodes the frame), a rows envelope (numeric
    cells), or a fused record (numeric values of present cells; aggregate
    cells contribute their 'last').
    """
    if "content_type" in record:
        if record["content_type"] == "blob":
            return decode_frame(record["payload"])
        numeric = [
            float(cell) for row in record["payload"] for cell in row
            if isinstance(cell, (int, float)) and not isinstance(cell, bool)
        ]
        return np.asarray(numeric, dtype=np.float64)
    if "cells" in record:
        numeric = []
        for dev in sorted(record["cells"]):
            cell = record["cells"][dev]
            if not cell.get("present"):
                continue
            for name in cell["values"]:
                v = cell["values"][name]
                if isinstance(v, dict):
                    v = v.get("last")
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    numeric.append(float(v))
        return np.asarray(numeric, dtype=np.float64)
    raise EmptyFrame(f"cannot extract pixels from record keys {sorted(record)}")


def builtin_stability_index(payload: bytes) -> bytes:
    doc = json.loads(payload)
    record = doc["record"]
    cv_max = doc.get("params", {}).get("cv_max", 0.5)
    index = stability_index(_pixels_from_record(record), cv_max=cv_max)
    out = {"index": index}
    if isinstance(record.get("ts_us"), int):
        out["ts_us"] = record["ts_us"]
    return json.dumps(out, separators=(",", ":")).encode()


def builtin_steering_controller(payload: bytes) -> bytes:
    """Decimating hill-climber: average the incoming stability index over
    ``every`` inputs, then take one controller step. Pure: all state rides
    in the payload and comes back in the result.
    """
    doc = json.loads(payload)
    params = doc.get("params", {})
    state = doc.get("state") or {
        "u": params.get("u0", 0.9),
        "history": [],
        "acc_sum": 0.0,
        "acc_n": 0,
    }
    index = doc["record"]["value"]["index"]
    state["acc_sum"] += index
    state["acc_n"] += 1
    every = int(params.get("every", 20))
    value = None
    if state["acc_n"] >= every:
        mean_index = state["acc_sum"] / state["acc_n"]
        state["history"] = (state["history"] + [[state["u"], mean_index]])[-2:]
        u_next = controller_step(
            state["history"],
            step_size=params.get("step_size", 0.05),
            bounds=tuple(params.get("bounds", (0.0, 1.0))),
        )
        state["u"] = u_next
        state["acc_sum"] = 0.0
        state["acc_n"] = 0
        value = {"u": u_next, "mean_index": mean_index}
        if isinstance(doc["record"].get("ts_us"), int):
            value["ts_us"] = doc["record"]["ts_us"]
    return json.dumps({"value": value, "state": state}, separators=(",", ":")).encode()


# --- the running instrument --------------------------------------------------

class InstrumentSim:
    """Tick-driven simulator publishing through the transport like any
    external client. Control commands are applied at tick boundaries: all
    commands that arrived since the previous tick take effect before the
    next dynamics step, which keeps the loop deterministic under the
    lockstep demo driver.
    """

    def __init__(self, params: SimParams, transport, experiment_id: str,
                 u0: float = 0.9, listen_control: bool = False, t0_us: int = 0):
        if not 0 <= u0 <= 1:
            raise ValueError("u0 must be in [0, 1]")
        self.params = params
        self.transport = transport
        self.experiment_id = experiment_id
        self.t0_us = t0_us
        self.state = SimState(s=s_target(u0, params), u=u0, k=0)
        self.seqs = {PLIF_DEVICE: 0, SPECTRO_DEVICE: 0, PSD_DEVICE: 0}
        self._event_seq = 0
        self.control_sub = None
        if listen_control:
            self.control_sub = transport.subscribe(
                topic_for("control", experiment_id, CONTROL_DEVICE)
            )

    @property
    def tick_us(self) -> int:
        return self.params.plif_period_ms * 1000

    def now_us(self) -> int:
        return self.t0_us + self.state.k * self.tick_us

    def apply_pending_control(self) -> list[ControlMessage]:
        """Drain and apply queued control commands (set_u). Idempotent
        commands, so at-least-once redelivery is harmless.
        """
        applied = []
        if self.control_sub is None:
            return applied
        while (item := self.control_sub.get_nowait()) is not None:
            _, payload = item
            self.control_sub.task_done()
            try:
                msg = self._parse_control(payload)
            except Exception as e:  # noqa: BLE001 - bad commands must not kill the sim
                log.warning("ignoring malformed control message: %s", e)
                continue
            if msg.command_name == "set_u":
                u = msg.params.get("u")
                if isinstance(u, (int, float)) and not isinstance(u, bool):
                    self.state = replace(self.state, u=clamp01(float(u)))
                    applied.append(msg)
                    self._publish_applied(msg)
                else:
                    log.warning("set_u without numeric u param: %r", msg.params)
            else:
                log.warning("unknown control command %r ignored", msg.command_name)
        return applied

    def _parse_control(self, payload: bytes) -> ControlMessage:
        try:
            return decode_control(payload)
        except Exception:
            # Hand-published short form: {"command_name":..., "params":{...}}
            doc = json.loads(payload)
            return ControlMessage(
                experiment_id=self.experiment_id,
                device_id=CONTROL_DEVICE,
                seq=0,
                ts_us=self.now_us(),
                command_name=doc["command_name"],
                params=doc.get("params", {}),
            )

    def _publish_applied(self, msg: ControlMessage) -> None:
        event = {
            "kind": "control_applied",
            "device": CONTROL_DEVICE,
            "command_name": msg.command_name,
            "params": msg.params,
            "seq": self._event_seq,
            "ts_us": self.now_us(),
        }
        self._event_seq += 1
        self.transport.publish(
            topic_for("events", self.experiment_id),
            json.dumps(event, separators=(",", ":")).encode(),
        )

    def tick(self) -> list[Envelope]:
        """Advance one plif period: apply control, step, emit due streams."""
        self.apply_pending_control()
        self.state = step(self.state, self.params)
        ts = self.now_us()
        due = [emit_plif(self.state, self.params, self.seqs[PLIF_DEVICE], ts,
                         self.experiment_id)]
        self.seqs[PLIF_DEVICE] += 1

        elapsed_ms = self.state.k * self.params.plif_period_ms
        if elapsed_ms % self.params.psd_period_ms == 0:
            due.append(emit_psd(self.state, self.params, self.seqs[PSD_DEVICE], ts,
                                self.experiment_id))
            self.seqs[PSD_DEVICE] += 1
        if elapsed_ms % self.params.spectro_period_ms == 0:
            due.append(emit_spectroscopy(self.state, self.params,
                                         self.seqs[SPECTRO_DEVICE], ts,
                                         self.experiment_id))
            self.seqs[SPECTRO_DEVICE] += 1

        # Emit in device-name order so archive replay (which merges by
        # (ts, device, seq)) reproduces the original byte sequence.
        due.sort(key=lambda e: e.device_id)
        for env in due:
            self.transport.publish(
                topic_for("data", self.experiment_id, env.device_id), encode(env)
            )
        return due

    def run_ticks(self, n: int) -> None:
        for _ in range(n):
            self.tick()
