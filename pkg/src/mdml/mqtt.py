"""Minimal MQTT 3.1.1 client: the subset the transport needs.

CONNECT/CONNACK, PUBLISH at QoS 1 (with PUBACK both directions),
SUBSCRIBE/SUBACK, UNSUBSCRIBE/UNSUBACK, PINGREQ/PINGRESP, DISCONNECT.
Clean session only, no retained messages, no QoS 2 — matching the
transport contract. Works against any 3.1.1 broker.
"""

import logging
import socket
import struct
import threading
from urllib.parse import urlparse

log = logging.getLogger(__name__)

CONNECT, CONNACK, PUBLISH, PUBACK = 0x10, 0x20, 0x30, 0x40
SUBSCRIBE, SUBACK, UNSUBSCRIBE, UNSUBACK = 0x82, 0x90, 0xA2, 0xB0
PINGREQ, PINGRESP, DISCONNECT = 0xC0, 0xD0, 0xE0

PROTOCOL_NAME = b"\x00\x04MQTT"
PROTOCOL_LEVEL = 4


def parse_broker_uri(uri: str) -> tuple[str, int]:
    parsed = urlparse(uri if "//" in uri else f"mqtt://{uri}")
    if parsed.scheme not in ("mqtt", "tcp", ""):
        raise ValueError(f"unsupported broker scheme {parsed.scheme!r}")
    return parsed.hostname or "localhost", parsed.port or 1883


def encode_remaining_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            byte |= 0x80
        out.append(byte)
        if not n:
            return bytes(out)


def encode_utf8(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack(">H", len(b)) + b


class _SocketReader:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = b""

    def read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionError("connection closed by peer")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def read_packet(self) -> tuple[int, bytes]:
        header = self.read_exact(1)[0]
        length = 0
        shift = 0
        while True:
            byte = self.read_exact(1)[0]
            length |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
            if shift > 21:
                raise ConnectionError("malformed remaining length")
        return header, self.read_exact(length)


class MqttClient:
    """One broker connection. Thread-safe publish/subscribe; a reader thread
    dispatches inbound PUBLISH to ``on_message(topic, payload)``.
    """

    def __init__(self, host: str, port: int, client_id: str,
                 on_message=None, on_disconnect=None, keepalive_s: int = 30):
        self._host = host
        self._port = port
        self._client_id = client_id
        self._on_message = on_message or (lambda t, p: None)
        self._on_disconnect = on_disconnect or (lambda: None)
        self._keepalive_s = keepalive_s
        self._sock: socket.socket | None = None
        self._write_lock = threading.Lock()
        self._acks: dict[int, threading.Event] = {}
        self._acks_lock = threading.Lock()
        self._next_packet_id = 1
        self._closed = threading.Event()
        self._reader_thread: threading.Thread | None = None
        self._ping_thread: threading.Thread | None = None

    def connect(self, timeout_s: float = 10.0) -> None:
        sock = socket.create_connection((self._host, self._port), timeout=timeout_s)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        flags = 0x02  # clean session
        var_header = PROTOCOL_NAME + bytes([PROTOCOL_LEVEL, flags]) + struct.pack(">H", self._keepalive_s)
        payload = encode_utf8(self._client_id)
        self._send_packet(CONNECT, var_header + payload)

        reader = _SocketReader(sock)
        header, body = reader.read_packet()
        if header & 0xF0 != CONNACK or len(body) != 2:
            raise ConnectionError("expected CONNACK")
        if body[1] != 0:
            raise ConnectionError(f"broker refused connection, code {body[1]}")

        self._reader_thread = threading.Thread(
            target=self._read_loop, args=(reader,), name="mqtt-reader", daemon=True
        )
        self._reader_thread.start()
        self._ping_thread = threading.Thread(target=self._ping_loop, name="mqtt-ping", daemon=True)
        self._ping_thread.start()

    def _send_packet(self, header: int, body: bytes) -> None:
        sock = self._sock
        if sock is None:
            raise ConnectionError("not connected")
        frame = bytes([header]) + encode_remaining_length(len(body)) + body
        with self._write_lock:
            sock.sendall(frame)

    def _alloc_packet_id(self) -> int:
        with self._acks_lock:
            pid = self._next_packet_id
            self._next_packet_id = pid % 65535 + 1
            self._acks[pid] = threading.Event()
            return pid

    def _wait_ack(self, pid: int, timeout_s: float, what: str) -> None:
        with self._acks_lock:
            event = self._acks[pid]
        if not event.wait(timeout_s):
            raise OSError(f"timed out waiting for {what} (packet id {pid})")
        with self._acks_lock:
            self._acks.pop(pid, None)

    def _signal_ack(self, pid: int) -> None:
        with self._acks_lock:
            event = self._acks.get(pid)
        if event is not None:
            event.set()

    def publish_qos1(self, topic: str, payload: bytes, timeout_s: float = 10.0) -> None:
        pid = self._alloc_packet_id()
        body = encode_utf8(topic) + struct.pack(">H", pid) + payload
        self._send_packet(PUBLISH | 0x02, body)  # QoS 1
        self._wait_ack(pid, timeout_s, "PUBACK")

    def subscribe(self, filt: str, timeout_s: float = 10.0) -> None:
        pid = self._alloc_packet_id()
        body = struct.pack(">H", pid) + encode_utf8(filt) + bytes([1])  # request QoS 1
        self._send_packet(SUBSCRIBE, body)
        self._wait_ack(pid, timeout_s, "SUBACK")

    def unsubscribe(self, filt: str, timeout_s: float = 10.0) -> None:
        pid = self._alloc_packet_id()
        self._send_packet(UNSUBSCRIBE, struct.pack(">H", pid) + encode_utf8(filt))
        self._wait_ack(pid, timeout_s, "UNSUBACK")

    def _read_loop(self, reader: _SocketReader) -> None:
        try:
            while not self._closed.is_set():
                header, body = reader.read_packet()
                ptype = header & 0xF0
                if ptype == PUBLISH:
                    qos = (header >> 1) & 0x03
                    tlen = struct.unpack(">H", body[:2])[0]
                    topic = body[2:2 + tlen].decode("utf-8")
                    rest = body[2 + tlen:]
                    if qos > 0:
                        pid = struct.unpack(">H", rest[:2])[0]
                        payload = rest[2:]
                        self._send_packet(PUBACK, struct.pack(">H", pid))
                    else:
                        payload = rest
                    self._on_message(topic, payload)
                elif ptype in (PUBACK, SUBACK, UNSUBACK):
                    self._signal_ack(struct.unpack(">H", body[:2])[0])
                elif ptype == PINGRESP:
                    pass
                else:
                    log.debug("ignoring mqtt packet type 0x%02x", ptype)
        except (OSError, ConnectionError, struct.error) as e:
            if not self._closed.is_set():
                log.info("mqtt connection lost: %s", e)
        finally:
            self._shutdown_socket()
            self._on_disconnect()

    def _ping_loop(self) -> None:
        interval = max(self._keepalive_s / 2, 1)
        while not self._closed.wait(interval):
            try:
                self._send_packet(PINGREQ, b"")
            except OSError:
                return

    def wait_closed(self, external_stop: threading.Event, poll_s: float = 0.1) -> None:
        """Block until the connection dies or ``external_stop`` is set."""
        thread = self._reader_thread
        while thread is not None and thread.is_alive():
            if external_stop.wait(poll_s):
                self.close()
                return
        # reader exited: connection is gone

    def _shutdown_socket(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
        # wake anyone blocked on an ack
        with self._acks_lock:
            for event in self._acks.values():
                event.set()

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        try:
            self._send_packet(DISCONNECT, b"")
        except OSError:
            pass
        self._shutdown_socket()
