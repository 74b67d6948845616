"""HTTP + WebSocket facade for operators.

Bearer-token auth with {read, control} scopes against a static token table
(the local stand-in for delegated token introspection). The gateway taps
the transport directly — wildcard subscriptions on data/results/events —
so it stays decoupled from the pipeline and can restart independently.
Live streams go out over one WebSocket per client with bounded queues;
slow clients are shed with close code 4008.

Endpoint and payload schemas are documented in docs/api.md.
"""

import asyncio
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass

from fastapi import Depends, FastAPI, Request, WebSocket
from fastapi.responses import JSONResponse

from mdml import envelope as ev

log = logging.getLogger(__name__)

DEFAULT_RING_SIZE = 10_000
WS_QUEUE_LIMIT = 1000

CLOSE_UNAUTHORIZED = 4401
CLOSE_OVERFLOW = 4008

SCOPES = ("read", "control")


class Unauthorized(Exception):
    pass


@dataclass(frozen=True)
class TokenRecord:
    token: str
    principal: str
    scopes: frozenset
    expires_us: int | None = None  # None = never

    def expired(self, now_us: int) -> bool:
        return self.expires_us is not None and now_us >= self.expires_us


class TokenTable:
    def __init__(self, records):
        self._by_token = {r.token: r for r in records}

    @classmethod
    def from_file(cls, path) -> "TokenTable":
        doc = json.loads(open(path).read())
        entries = doc["tokens"] if isinstance(doc, dict) else doc
        records = []
        for entry in entries:
            scopes = frozenset(entry.get("scopes", []))
            unknown = scopes - set(SCOPES)
            if unknown:
                raise ValueError(f"unknown scopes {sorted(unknown)} for token entry")
            records.append(TokenRecord(
                token=entry["token"],
                principal=entry.get("principal", "anonymous"),
                scopes=scopes,
                expires_us=entry.get("expires_us"),
            ))
        return cls(records)

    def introspect(self, token: str) -> TokenRecord:
        """Valid, unexpired token -> its record; anything else -> Unauthorized."""
        record = self._by_token.get(token)
        if record is None:
            raise Unauthorized("unknown token")
        if record.expired(time.time_ns() // 1000):
            raise Unauthorized("token expired")
        return record


class _WsClient:
    def __init__(self, experiment_id, channels, loop):
        self.experiment_id = experiment_id
        self.channels = channels
        self.loop = loop
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=WS_QUEUE_LIMIT)
        self.overflowed = False

    def offer(self, event: dict) -> None:
        """Called from transport consumer threads."""
        def _put():
            if self.overflowed:
                return
            try:
                self.queue.put_nowait(event)
            except asyncio.QueueFull:
                self.overflowed = True
                # Make room for a wake-up marker so the sender can close 4008.
                try:
                    self.queue.get_nowait()
                except asyncio.QueueEmpty:
                    pass
                self.queue.put_nowait({"__overflow__": True})
        self.loop.call_soon_threadsafe(_put)


class GatewayService:
    """Transport taps + in-memory state behind the HTTP app."""

    def __init__(self, transport, tokens: TokenTable,
                 ring_size: int = DEFAULT_RING_SIZE, pipeline_handle=None):
        self.transport = transport
        self.tokens = tokens
        self.ring_size = ring_size
        self.pipeline_handle = pipeline_handle
        self.rings: dict[tuple[str, str], deque] = {}
        self.schemas: dict[tuple[str, str], list] = {}
        self.experiments: set[str] = set()
        self.node_states: dict[str, dict] = {}
        self._control_seqs: dict[tuple[str, str], int] = {}
        self._control_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._clients: set[_WsClient] = set()
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads = []
        self._subs = []

    def start(self) -> None:
        for filt, handler in [
            ("mdml/v1/+/data/+", self._on_data),
            ("mdml/v1/+/results/+", self._on_result),
            ("mdml/v1/+/events", self._on_event),
        ]:
            sub = self.transport.subscribe(filt)
            self._subs.append(sub)
            t = threading.Thread(
                target=self._consume, args=(sub, handler),
                name=f"gw-{filt.split('/')[3]}", daemon=True,
            )
            self._threads.append(t)
            t.start()

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        for sub in self._subs:
            self.transport.unsubscribe(sub)

    def _consume(self, sub, handler) -> None:
        while not self._stop.is_set():
            item = sub.get(timeout=0.05)
            if item is None:
                continue
            topic, payload = item
            try:
                handler(topic, payload)
            except Exception as e:  # noqa: BLE001 - taps must survive bad frames
                log.warning("gateway tap error on %s: %s", topic, e)
            finally:
                sub.task_done()

    # -- tap handlers

    def _on_data(self, topic: str, payload: bytes) -> None:
        kind, exp, device = ev.parse_topic(topic)
        env = ev.decode(payload)
        entry = {"seq": env.seq, "ts_us": env.ts_us,
                 "rows": [list(r) for r in env.rows()]}
        if env.content_type == "blob":
            entry["blob"] = {
                "media_type": env.payload.media_type,
                "bytes": len(env.payload.data),
            }
        key = (exp, device)
        with self._state_lock:
            self.experiments.add(exp)
            ring = self.rings.get(key)
            if ring is None:
                ring = deque(maxlen=self.ring_size)
                self.rings[key] = ring
                self.schemas[key] = [fs.to_wire() for fs in env.schema]
            ring.append(entry)
        self._fanout("data", exp, {"device_id": device, **entry})

    def _on_result(self, topic: str, payload: bytes) -> None:
        kind, exp, node = ev.parse_topic(topic)
        body = json.loads(payload)
        with self._state_lock:
            self.experiments.add(exp)
        self._fanout("results", exp, body)

    def _on_event(self, topic: str, payload: bytes) -> None:
        kind, exp, _ = ev.parse_topic(topic)
        body = json.loads(payload)
        if "node" in body and "state" in body:
            with self._state_lock:
                self.node_states[body["node"]] = body
        self._fanout("status", exp, body)

    def _fanout(self, channel: str, exp: str, body: dict) -> None:
        event = {
            "channel": channel,
            "experiment_id": exp,
            "ts_us": time.time_ns() // 1000,
            "body": body,
        }
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            if c.experiment_id == exp and channel in c.channels:
                c.offer(event)

    # -- operations used by the HTTP layer

    def stream_records(self, exp: str, device: str, since_us: int, limit: int):
        key = (exp, device)
        with self._state_lock:
            if exp not in self.experiments:
                return None
            ring = self.rings.get(key)
            if ring is None:
                return None
            records = [r for r in ring if r["ts_us"] > since_us]
        return {
            "experiment_id": exp,
            "device_id": device,
            "schema": self.schemas.get(key, []),
            "records": records[-limit:],
        }

    def pipeline_status(self) -> list[dict]:
        if self.pipeline_handle is not None:
            return [s.to_dict() for s in self.pipeline_handle.status()]
        with self._state_lock:
            return [dict(v) for _, v in sorted(self.node_states.items())]

    def publish_control(self, exp: str, device: str, command_name: str,
                        params: dict) -> int:
        # Serialized per (experiment, device) so assigned seqs stay monotone.
        with self._control_lock:
            seq = self._control_seqs.get((exp, device), 0)
            self._control_seqs[(exp, device)] = seq + 1
            msg = ev.ControlMessage(
                experiment_id=exp, device_id=device, seq=seq,
                ts_us=time.time_ns() // 1000,
                command_name=command_name, params=params,
            )
            self.transport.publish(
                ev.topic_for("control", exp, device), ev.encode_control(msg)
            )
        return seq

    def register_client(self, client: _WsClient) -> None:
        with self._clients_lock:
            self._clients.add(client)

    def unregister_client(self, client: _WsClient) -> None:
        with self._clients_lock:
            self._clients.discard(client)


# --- HTTP layer ----------------------------------------------------------------

def create_app(service: GatewayService) -> FastAPI:
    app = FastAPI(title="mdml gateway", docs_url=None, redoc_url=None)
    app.state.service = service

    def auth(request: Request) -> TokenRecord:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise Unauthorized("missing bearer token")
        return service.tokens.introspect(header[7:].strip())

    def require(record: TokenRecord, scope: str):
        if scope not in record.scopes:
            raise _Forbidden(scope)

    class _Forbidden(Exception):
        def __init__(self, scope):
            self.scope = scope

    @app.exception_handler(Unauthorized)
    async def unauthorized_handler(request, exc):
        return JSONResponse(status_code=401, content={"error": str(exc)})

    @app.exception_handler(_Forbidden)
    async def forbidden_handler(request, exc):
        return JSONResponse(status_code=403,
                            content={"error": f"missing scope {exc.scope!r}"})

    @app.get("/api/v1/token")
    def token_info(record: TokenRecord = Depends(auth)):
        # Lets clients (the dashboard) discover their own scopes.
        return {"principal": record.principal, "scopes": sorted(record.scopes)}

    @app.get("/api/v1/experiments")
    def experiments(record: TokenRecord = Depends(auth)):
        require(record, "read")
        with service._state_lock:
            return {"experiments": sorted(service.experiments)}

    @app.get("/api/v1/experiments/{exp}/streams/{device}")
    def streams(exp: str, device: str, since_us: int = 0, limit: int = 500,
                record: TokenRecord = Depends(auth)):
        require(record, "read")
        limit = max(1, min(limit, service.ring_size))
        out = service.stream_records(exp, device, since_us, limit)
        if out is None:
            return JSONResponse(status_code=404,
                                content={"error": f"no stream {exp}/{device}"})
        return out

    @app.get("/api/v1/pipeline/status")
    def status(record: TokenRecord = Depends(auth)):
        require(record, "read")
        return {"nodes": service.pipeline_status()}

    @app.post("/api/v1/experiments/{exp}/control/{device}")
    async def control(exp: str, device: str, request: Request,
                      record: TokenRecord = Depends(auth)):
        require(record, "control")
        try:
            body = json.loads(await request.body())
            command_name = body["command_name"]
            params = body.get("params", {})
            if not isinstance(params, dict):
                raise ValueError("params must be an object")
            ev.check_identifier(exp, "experiment_id")
            ev.check_identifier(device, "device_id")
            ev.check_name(command_name, "command_name")
        except (json.JSONDecodeError, KeyError, ValueError, TypeError,
                ev.InvalidIdentifier) as e:
            return JSONResponse(status_code=400, content={"error": str(e)})
        with service._state_lock:
            known = exp in service.experiments
        if not known:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown experiment {exp!r}"})
        try:
            seq = service.publish_control(exp, device, command_name, params)
        except ev.EnvelopeError as e:
            return JSONResponse(status_code=400, content={"error": str(e)})
        return {"seq": seq}

    @app.websocket("/api/v1/ws")
    async def ws_live(ws: WebSocket):
        await ws.accept()
        token = ws.query_params.get("token", "")
        try:
            record = service.tokens.introspect(token)
            if "read" not in record.scopes:
                raise Unauthorized("read scope required")
        except Unauthorized:
            await ws.close(code=CLOSE_UNAUTHORIZED)
            return
        experiment = ws.query_params.get("experiment", "")
        channels = set(
            c for c in ws.query_params.get("channels", "data,results,status").split(",") if c
        )
        client = _WsClient(experiment, channels, asyncio.get_running_loop())
        service.register_client(client)
        try:
            while True:
                event = await client.queue.get()
                if client.overflowed or "__overflow__" in event:
                    await ws.close(code=CLOSE_OVERFLOW)
                    return
                await ws.send_text(json.dumps(event, separators=(",", ":")))
        except Exception:  # noqa: BLE001 - disconnects arrive as exceptions
            pass
        finally:
            service.unregister_client(client)

    return app


def serve_in_thread(app: FastAPI, host: str = "127.0.0.1", port: int = 8080):
    """Run uvicorn on a daemon thread; returns (server, thread, bound_port)."""
    import socket

    import uvicorn

    sock = socket.create_server((host, port))
    bound_port = sock.getsockname()[1]
    config = uvicorn.Config(app, log_level="warning", lifespan="off")
    server = uvicorn.Server(config)
    thread = threading.Thread(
        target=server.run, kwargs={"sockets": [sock]}, name="gateway-http", daemon=True
    )
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started and time.monotonic() < deadline:
        time.sleep(0.01)
    return server, thread, bound_port
