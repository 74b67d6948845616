"""Pub/sub delivery with two interchangeable backends.

InprocTransport is a same-process bus used by tests and the single-binary
demo; MqttTransport binds to any external MQTT 3.1.1 broker. Both provide
the same semantics: at-least-once delivery, per-(publisher, topic) order,
no retained messages. Deduplication is the consumer's job (fusion keys on
Envelope.seq).
"""

import logging
import queue
import random
import threading
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


class TransportError(Exception):
    pass


class NotConnected(TransportError):
    pass


class TopicInvalid(TransportError):
    pass


class FilterInvalid(TransportError):
    pass


def check_topic(topic: str) -> str:
    if not topic or not isinstance(topic, str):
        raise TopicInvalid("empty topic")
    if any(ch in topic for ch in "+#\x00"):
        raise TopicInvalid(f"wildcards not allowed in publish topic: {topic!r}")
    if any(level == "" for level in topic.split("/")):
        raise TopicInvalid(f"empty topic level: {topic!r}")
    return topic


def check_filter(filt: str) -> str:
    if not filt or not isinstance(filt, str):
        raise FilterInvalid("empty filter")
    levels = filt.split("/")
    for i, level in enumerate(levels):
        if level == "":
            raise FilterInvalid(f"empty filter level: {filt!r}")
        if level == "#" and i != len(levels) - 1:
            raise FilterInvalid(f"multi-level wildcard must be terminal: {filt!r}")
        if ("+" in level or "#" in level) and level not in ("+", "#"):
            raise FilterInvalid(f"wildcard must occupy a whole level: {filt!r}")
    return filt


def topic_matches(filt: str, topic: str) -> bool:
    """MQTT matching: `+` is one level, terminal `#` is the rest."""
    flevels = filt.split("/")
    tlevels = topic.split("/")
    for i, fl in enumerate(flevels):
        if fl == "#":
            return True
        if i >= len(tlevels):
            return False
        if fl != "+" and fl != tlevels[i]:
            return False
    return len(flevels) == len(tlevels)


@dataclass
class TransportConfig:
    backend: str = "inproc"  # inproc | mqtt
    broker_uri: str = "mqtt://localhost:1883"
    client_id: str = "mdml"
    reconnect_initial_ms: int = 100
    reconnect_max_ms: int = 30_000
    # QoS is fixed at-least-once; there is no knob.

    def __post_init__(self):
        if self.backend not in ("inproc", "mqtt"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.reconnect_initial_ms > self.reconnect_max_ms:
            raise ValueError("reconnect backoff initial must be <= max")


class Subscription:
    """One consumer's delivery queue. Consumed by exactly one reader."""

    def __init__(self, filt: str, maxsize: int = 65536):
        self.filter = check_filter(filt)
        self.queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self.closed = False

    def get(self, timeout: float | None = None):
        """Next (topic, payload) delivery, or None on timeout."""
        try:
            return self.queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def get_nowait(self):
        try:
            return self.queue.get_nowait()
        except queue.Empty:
            return None

    def task_done(self):
        self.queue.task_done()

    def join(self):
        self.queue.join()

    def pending(self) -> int:
        return self.queue.qsize()


class Transport:
    def publish(self, topic: str, payload: bytes) -> None:
        raise NotImplementedError

    def subscribe(self, filt: str) -> Subscription:
        raise NotImplementedError

    def unsubscribe(self, sub: Subscription) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class InprocTransport(Transport):
    """Same-process bus. publish() is a bounded-queue handoff; subscribers
    consume on their own threads, never on the publisher's stack.

    ``duplicate_rate`` > 0 makes the bus redeliver that fraction of messages
    immediately after the original — a test harness for the at-least-once
    contract. Duplicates never reorder a (publisher, topic) stream.
    """

    def __init__(self, duplicate_rate: float = 0.0, duplicate_seed: int = 0):
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self._closed = False
        self._dup_rate = duplicate_rate
        self._dup_rng = random.Random(duplicate_seed)

    def publish(self, topic: str, payload: bytes) -> None:
        check_topic(topic)
        if self._closed:
            raise NotConnected("transport closed")
        payload = bytes(payload)
        with self._lock:
            targets = [s for s in self._subs if topic_matches(s.filter, topic)]
        for sub in targets:
            copies = 1
            if self._dup_rate > 0 and self._dup_rng.random() < self._dup_rate:
                copies = 2
            for _ in range(copies):
                sub.queue.put((topic, payload))

    def subscribe(self, filt: str) -> Subscription:
        if self._closed:
            raise NotConnected("transport closed")
        sub = Subscription(filt)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)
        sub.closed = True

    def close(self) -> None:
        self._closed = True
        with self._lock:
            subs = list(self._subs)
            self._subs.clear()
        for s in subs:
            s.closed = True


def backoff_delays_ms(initial_ms: int, max_ms: int):
    """Infinite reconnect schedule: initial, doubling, capped (pre-jitter)."""
    delay = initial_ms
    while True:
        yield delay
        delay = min(delay * 2, max_ms)


def apply_jitter(delay_ms: float, rng: random.Random) -> float:
    """±20% jitter so reconnect stampedes decorrelate."""
    return delay_ms * (1.0 + rng.uniform(-0.2, 0.2))


class MqttTransport(Transport):
    """MQTT 3.1.1 backend. Maintains one broker connection, redelivers into
    local Subscription queues, and reconnects forever with exponential
    backoff until close(). Emits 'connected'/'disconnected' status events.
    """

    def __init__(self, config: TransportConfig, status_cb=None, rng: random.Random | None = None):
        from mdml.mqtt import MqttClient, parse_broker_uri

        self._config = config
        self._host, self._port = parse_broker_uri(config.broker_uri)
        self._status_cb = status_cb or (lambda event: None)
        self._rng = rng or random.Random()
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self._shutdown = threading.Event()
        self._connected = threading.Event()
        self._client: MqttClient | None = None
        self._client_factory = MqttClient
        self._thread = threading.Thread(target=self._reconnect_loop, name="mqtt-loop", daemon=True)
        self._thread.start()
        # Give the first connect a moment; callers may also publish later.
        self._connected.wait(timeout=5.0)

    # -- delivery fan-in from the socket thread

    def _on_message(self, topic: str, payload: bytes) -> None:
        with self._lock:
            targets = [s for s in self._subs if topic_matches(s.filter, topic)]
        for sub in targets:
            sub.queue.put((topic, payload))

    def _reconnect_loop(self) -> None:
        schedule = None
        while not self._shutdown.is_set():
            try:
                client = self._client_factory(
                    self._host, self._port, self._config.client_id,
                    on_message=self._on_message,
                    on_disconnect=self._on_disconnect,
                )
                client.connect()
                with self._lock:
                    self._client = client
                    filters = {s.filter for s in self._subs}
                for f in filters:
                    client.subscribe(f)
                schedule = None
                self._connected.set()
                self._status_cb("connected")
                client.wait_closed(self._shutdown)
                self._connected.clear()
                if not self._shutdown.is_set():
                    self._status_cb("disconnected")
            except OSError as e:
                self._connected.clear()
                log.warning("mqtt connect to %s:%s failed: %s", self._host, self._port, e)
            if self._shutdown.is_set():
                break
            if schedule is None:
                schedule = backoff_delays_ms(
                    self._config.reconnect_initial_ms, self._config.reconnect_max_ms
                )
            delay = apply_jitter(next(schedule), self._rng)
            if self._shutdown.wait(delay / 1000.0):
                break
        with self._lock:
            client, self._client = self._client, None
        if client is not None:
            client.close()

    def _on_disconnect(self) -> None:
        self._connected.clear()

    def publish(self, topic: str, payload: bytes) -> None:
        check_topic(topic)
        with self._lock:
            client = self._client
        if client is None or not self._connected.is_set():
            raise NotConnected("no broker connection")
        client.publish_qos1(topic, bytes(payload))

    def subscribe(self, filt: str) -> Subscription:
        sub = Subscription(filt)
        with self._lock:
            self._subs.append(sub)
            client = self._client if self._connected.is_set() else None
        if client is not None:
            client.subscribe(filt)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)
            still_used = any(s.filter == sub.filter for s in self._subs)
            client = self._client if self._connected.is_set() else None
        sub.closed = True
        if client is not None and not still_used:
            try:
                client.unsubscribe(sub.filter)
            except OSError:
                pass

    def close(self) -> None:
        self._shutdown.set()
        self._connected.clear()
        self._thread.join(timeout=5.0)


def make_transport(config: TransportConfig, status_cb=None) -> Transport:
    if config.backend == "inproc":
        return InprocTransport()
    return MqttTransport(config, status_cb=status_cb)
