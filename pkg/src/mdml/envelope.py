"""Canonical message envelope, control messages, and the topic grammar.

Every byte that crosses a topic is produced here. Encoding is canonical
JSON: fixed key order, no insignificant whitespace, UTF-8. Equal envelopes
always encode to identical bytes so archives and checksums are reproducible.
The wire format is documented in docs/wire.md and is normative.
"""

import base64
import binascii
import json
import re
from dataclasses import dataclass, field

WIRE_VERSION = 1

IDENT_RE = re.compile(r"^[a-z0-9-]{1,64}$")
# Field/command/param names additionally allow underscore (set_u, s_true, gm_nm).
NAME_RE = re.compile(r"^[a-z0-9_-]{1,64}$")

FIELD_TYPES = ("f64", "i64", "str", "bool")

CONTENT_ROWS = "rows"
CONTENT_BLOB = "blob"


class EnvelopeError(Exception):
    pass


class InvalidEnvelope(EnvelopeError):
    """Structurally sound input that violates an envelope invariant."""


class ParseError(EnvelopeError):
    """Input that is not a well-formed envelope document at all."""


class InvalidIdentifier(EnvelopeError):
    pass


def check_identifier(value, what: str) -> str:
    if not isinstance(value, str) or not IDENT_RE.match(value):
        raise InvalidIdentifier(f"{what} must match [a-z0-9-]{{1,64}}, got {value!r}")
    return value


def check_name(value, what: str) -> str:
    if not isinstance(value, str) or not NAME_RE.match(value):
        raise InvalidIdentifier(f"{what} must match [a-z0-9_-]{{1,64}}, got {value!r}")
    return value


@dataclass(frozen=True)
class FieldSpec:
    name: str
    type: str
    unit: str = ""

    def validate(self):
        check_name(self.name, "field name")
        if self.type not in FIELD_TYPES:
            raise InvalidEnvelope(f"unknown field type {self.type!r}")
        if not isinstance(self.unit, str):
            raise InvalidEnvelope("field unit must be a string")

    def to_wire(self) -> dict:
        return {"name": self.name, "type": self.type, "unit": self.unit}


@dataclass(frozen=True)
class Blob:
    """Opaque payload (e.g. a PLIF frame) that does not fit a flat row schema.

    ``rows`` optionally carries auxiliary rows conforming to the envelope
    schema, so a frame can travel with scalar side-channels.
    """

    media_type: str
    data: bytes
    rows: tuple = ()

    def to_wire(self) -> dict:
        wire = {
            "media_type": self.media_type,
            "data": base64.b64encode(self.data).decode("ascii"),
        }
        if self.rows:
            wire["rows"] = [list(r) for r in self.rows]
        return wire


@dataclass(frozen=True)
class Envelope:
    experiment_id: str
    device_id: str
    seq: int
    ts_us: int
    content_type: str
    schema: tuple = ()
    payload: object = ()  # tuple of row tuples, or a Blob
    version: int = WIRE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        if self.content_type == CONTENT_ROWS:
            object.__setattr__(
                self, "payload", tuple(tuple(r) for r in self.payload)
            )
        self.validate()

    def validate(self):
        if self.version != WIRE_VERSION:
            raise InvalidEnvelope(f"unsupported version {self.version}")
        try:
            check_identifier(self.experiment_id, "experiment_id")
            check_identifier(self.device_id, "device_id")
        except InvalidIdentifier as e:
            raise InvalidEnvelope(str(e)) from None
        if not isinstance(self.seq, int) or isinstance(self.seq, bool) or self.seq < 0:
            raise InvalidEnvelope(f"seq must be a non-negative integer, got {self.seq!r}")
        if not isinstance(self.ts_us, int) or isinstance(self.ts_us, bool) or self.ts_us < 0:
            raise InvalidEnvelope(f"ts_us must be a non-negative integer, got {self.ts_us!r}")

        names = set()
        for fs in self.schema:
            if not isinstance(fs, FieldSpec):
                raise InvalidEnvelope("schema entries must be FieldSpec")
            fs.validate()
            if fs.name in names:
                raise InvalidEnvelope(f"duplicate field name {fs.name!r}")
            names.add(fs.name)

        if self.content_type == CONTENT_ROWS:
            if not isinstance(self.payload, tuple):
                raise InvalidEnvelope("rows payload must be a sequence of rows")
            for i, row in enumerate(self.payload):
                _check_row(row, self.schema, f"row {i}")
        elif self.content_type == CONTENT_BLOB:
            if not isinstance(self.payload, Blob):
                raise InvalidEnvelope("blob payload must be a Blob")
            if not isinstance(self.payload.media_type, str) or not self.payload.media_type:
                raise InvalidEnvelope("blob media_type must be a non-empty string")
            if not isinstance(self.payload.data, bytes):
                raise InvalidEnvelope("blob data must be bytes")
            for i, row in enumerate(self.payload.rows):
                _check_row(row, self.schema, f"blob aux row {i}")
        else:
            raise InvalidEnvelope(f"unknown content_type {self.content_type!r}")

    def rows(self) -> tuple:
        """Schema-described rows: the payload for rows envelopes, aux rows for blobs."""
        if self.content_type == CONTENT_ROWS:
            return self.payload
        return self.payload.rows

    def to_wire(self) -> dict:
        # Key order here is the canonical wire order; do not reorder.
        if self.content_type == CONTENT_ROWS:
            payload = [list(r) for r in self.payload]
        else:
            payload = self.payload.to_wire()
        return {
            "version": self.version,
            "experiment_id": self.experiment_id,
            "device_id": self.device_id,
            "seq": self.seq,
            "ts_us": self.ts_us,
            "content_type": self.content_type,
            "schema": [fs.to_wire() for fs in self.schema],
            "payload": payload,
        }


def _check_row(row, schema, what: str):
    row = tuple(row)
    if len(row) != len(schema):
        raise InvalidEnvelope(
            f"{what}: arity {len(row)} != schema length {len(schema)}"
        )
    for fs, cell in zip(schema, row):
        ok = {
            "f64": lambda c: isinstance(c, float),
            "i64": lambda c: isinstance(c, int) and not isinstance(c, bool),
            "str": lambda c: isinstance(c, str),
            "bool": lambda c: isinstance(c, bool),
        }[fs.type](cell)
        if not ok:
            raise InvalidEnvelope(f"{what}: cell for {fs.name!r} is not {fs.type}")


def _coerce_row(row, schema, what: str) -> tuple:
    """Accept integers where f64 is declared (JSON cannot spell 1.0 reliably)."""
    if not isinstance(row, list):
        raise InvalidEnvelope(f"{what} must be an array")
    out = []
    for fs, cell in zip(schema, row):
        if fs.type == "f64" and isinstance(cell, int) and not isinstance(cell, bool):
            cell = float(cell)
        out.append(cell)
    # Arity mismatches fall through to _check_row for a uniform error.
    out.extend(row[len(schema):])
    return tuple(out)


def encode(e: Envelope) -> bytes:
    """Canonical bytes for an envelope. Deterministic: equal envelopes, equal bytes."""
    if not isinstance(e, Envelope):
        raise InvalidEnvelope("not an Envelope")
    e.validate()
    return json.dumps(e.to_wire(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode(b: bytes) -> Envelope:
    """Parse envelope bytes. Tolerates key reordering and whitespace on input."""
    try:
        doc = json.loads(b)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed envelope document: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("envelope document must be a JSON object")
    return from_wire(doc)


def from_wire(doc: dict) -> Envelope:
    missing = {"version", "experiment_id", "device_id", "seq", "ts_us",
               "content_type", "schema", "payload"} - doc.keys()
    if missing:
        raise InvalidEnvelope(f"missing keys: {sorted(missing)}")

    raw_schema = doc["schema"]
    if not isinstance(raw_schema, list):
        raise InvalidEnvelope("schema must be an array")
    schema = []
    for entry in raw_schema:
        if not isinstance(entry, dict):
            raise InvalidEnvelope("schema entries must be objects")
        try:
            schema.append(FieldSpec(entry["name"], entry["type"], entry.get("unit", "")))
        except KeyError as e:
            raise InvalidEnvelope(f"schema entry missing {e}") from None
    schema = tuple(schema)

    content_type = doc["content_type"]
    raw_payload = doc["payload"]
    if content_type == CONTENT_ROWS:
        if not isinstance(raw_payload, list):
            raise InvalidEnvelope("rows payload must be an array")
        payload = tuple(_coerce_row(r, schema, f"row {i}") for i, r in enumerate(raw_payload))
    elif content_type == CONTENT_BLOB:
        if not isinstance(raw_payload, dict):
            raise InvalidEnvelope("blob payload must be an object")
        try:
            data = base64.b64decode(raw_payload["data"], validate=True)
        except KeyError:
            raise InvalidEnvelope("blob payload missing data") from None
        except (binascii.Error, TypeError) as e:
            raise InvalidEnvelope(f"blob data is not valid base64: {e}") from None
        aux = raw_payload.get("rows", [])
        if not isinstance(aux, list):
            raise InvalidEnvelope("blob aux rows must be an array")
        payload = Blob(
            media_type=raw_payload.get("media_type", ""),
            data=data,
            rows=tuple(_coerce_row(r, schema, f"blob aux row {i}") for i, r in enumerate(aux)),
        )
    else:
        raise InvalidEnvelope(f"unknown content_type {content_type!r}")

    try:
        return Envelope(
            version=doc["version"],
            experiment_id=doc["experiment_id"],
            device_id=doc["device_id"],
            seq=doc["seq"],
            ts_us=doc["ts_us"],
            content_type=content_type,
            schema=schema,
            payload=payload,
        )
    except TypeError as e:
        raise InvalidEnvelope(str(e)) from None


# --- control messages -------------------------------------------------------

_PARAM_SCALARS = (int, float, str, bool)


@dataclass(frozen=True)
class ControlMessage:
    experiment_id: str
    device_id: str
    seq: int
    ts_us: int
    command_name: str
    params: dict = field(default_factory=dict)
    version: int = WIRE_VERSION

    def validate(self):
        if self.version != WIRE_VERSION:
            raise InvalidEnvelope(f"unsupported version {self.version}")
        check_identifier(self.experiment_id, "experiment_id")
        check_identifier(self.device_id, "device_id")
        check_name(self.command_name, "command_name")
        if not isinstance(self.seq, int) or self.seq < 0:
            raise InvalidEnvelope("seq must be a non-negative integer")
        if not isinstance(self.ts_us, int) or self.ts_us < 0:
            raise InvalidEnvelope("ts_us must be a non-negative integer")
        for k, v in self.params.items():
            check_name(k, "param name")
            if not isinstance(v, _PARAM_SCALARS):
                raise InvalidEnvelope(f"param {k!r} must be number, string, or bool")


def encode_control(m: ControlMessage) -> bytes:
    m.validate()
    wire = {
        "version": m.version,
        "experiment_id": m.experiment_id,
        "device_id": m.device_id,
        "seq": m.seq,
        "ts_us": m.ts_us,
        "command_name": m.command_name,
        "params": {k: m.params[k] for k in sorted(m.params)},
    }
    return json.dumps(wire, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_control(b: bytes) -> ControlMessage:
    try:
        doc = json.loads(b)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed control document: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("control document must be a JSON object")
    missing = {"version", "experiment_id", "device_id", "seq", "ts_us",
               "command_name", "params"} - doc.keys()
    if missing:
        raise InvalidEnvelope(f"missing keys: {sorted(missing)}")
    if not isinstance(doc["params"], dict):
        raise InvalidEnvelope("params must be an object")
    m = ControlMessage(
        experiment_id=doc["experiment_id"],
        device_id=doc["device_id"],
        seq=doc["seq"],
        ts_us=doc["ts_us"],
        command_name=doc["command_name"],
        params=dict(doc["params"]),
        version=doc["version"],
    )
    m.validate()
    return m


# --- topic grammar ----------------------------------------------------------

TOPIC_PREFIX = "mdml/v1"
TOPIC_KINDS = ("data", "control", "results", "events")


def topic_for(kind: str, experiment_id: str, entity_id: str | None = None) -> str:
    """Topic for a traffic kind. ``events`` takes no entity id."""
    if kind not in TOPIC_KINDS:
        raise InvalidIdentifier(f"unknown topic kind {kind!r}")
    check_identifier(experiment_id, "experiment_id")
    if kind == "events":
        if entity_id is not None:
            raise InvalidIdentifier("events topic takes no entity_id")
        return f"{TOPIC_PREFIX}/{experiment_id}/events"
    if entity_id is None:
        raise InvalidIdentifier(f"{kind} topic requires an entity_id")
    check_identifier(entity_id, "entity_id")
    return f"{TOPIC_PREFIX}/{experiment_id}/{kind}/{entity_id}"


def parse_topic(topic: str) -> tuple[str, str, str | None]:
    """Inverse of topic_for: returns (kind, experiment_id, entity_id_or_None)."""
    parts = topic.split("/")
    if len(parts) < 4 or parts[0] != "mdml" or parts[1] != "v1":
        raise InvalidIdentifier(f"not an mdml topic: {topic!r}")
    exp = check_identifier(parts[2], "experiment_id")
    kind = parts[3]
    if kind == "events":
        if len(parts) != 4:
            raise InvalidIdentifier(f"events topic has no entity: {topic!r}")
        return kind, exp, None
    if kind in ("data", "control", "results") and len(parts) == 5:
        return kind, exp, check_identifier(parts[4], "entity_id")
    raise InvalidIdentifier(f"unrecognized topic: {topic!r}")
