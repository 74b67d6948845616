"""Compressed, manifest-described archive of every stream, plus replay.

Layout (object-store shaped: flat keys, immutable sealed segments):

    {root}/{experiment_id}/manifest.json
    {root}/{experiment_id}/segments/{device_id}/{index:06}.jsonl.gz

A segment is newline-delimited canonical envelope JSON, gzipped. The
manifest records per-device schema, counts, ts ranges, and per-segment
SHA-256 of the uncompressed byte stream. Segments rotate at 16 MiB
uncompressed or 10 minutes of age; in-progress segments carry a .part
suffix and are only renamed (sealed) once complete, so a crash can lose
at most the unsealed tail.
"""

import gzip
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from mdml.envelope import Envelope, check_identifier, decode, encode, topic_for

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_SEGMENT_BYTES = 16 * 1024 * 1024
DEFAULT_SEGMENT_AGE_S = 600
GZIP_LEVEL = 6

LOCK_NAME = ".writer.lock"


class ArchiveError(Exception):
    pass


class ClosedWriter(ArchiveError):
    pass


class ManifestMissing(ArchiveError):
    pass


class WriterActive(ArchiveError):
    pass


@dataclass
class CorruptSegment:
    device_id: str
    index: int
    reason: str

    def __str__(self):
        return f"{self.device_id}/{self.index:06}: {self.reason}"


@dataclass
class VerifyReport:
    problems: list = field(default_factory=list)  # CorruptSegment entries
    warnings: list = field(default_factory=list)  # e.g. unsealed tails

    @property
    def clean(self) -> bool:
        return not self.problems


class _OpenSegment:
    def __init__(self, path: Path, index: int, opened_wall_s: float):
        self.path = path
        self.index = index
        self.opened_wall_s = opened_wall_s
        self._raw = open(path, "wb")
        # mtime pinned to 0 so equal content yields equal segment bytes.
        self.file = gzip.GzipFile(
            filename="", mode="wb", fileobj=self._raw,
            compresslevel=GZIP_LEVEL, mtime=0,
        )
        self.uncompressed = 0
        self.count = 0
        self.first_ts = None
        self.last_ts = None
        self.sha = hashlib.sha256()

    def close(self):
        self.file.close()
        self._raw.close()

    def write(self, line: bytes, ts_us: int):
        self.file.write(line)
        self.sha.update(line)
        self.uncompressed += len(line)
        self.count += 1
        if self.first_ts is None:
            self.first_ts = ts_us
        self.last_ts = ts_us


class ArchiveWriter:
    """One open writer per experiment directory; enforced with a lock file."""

    def __init__(self, root: str | Path, experiment_id: str,
                 max_segment_bytes: int = DEFAULT_SEGMENT_BYTES,
                 max_segment_age_s: float = DEFAULT_SEGMENT_AGE_S):
        check_identifier(experiment_id, "experiment_id")
        self.experiment_id = experiment_id
        self.dir = Path(root) / experiment_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.max_segment_bytes = max_segment_bytes
        self.max_segment_age_s = max_segment_age_s
        self._lock_path = self.dir / LOCK_NAME
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WriterActive(f"another writer holds {self._lock_path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)

        self._open: dict[str, _OpenSegment] = {}
        self._closed = False
        self._manifest = {
            "format_version": FORMAT_VERSION,
            "experiment_id": experiment_id,
            "created_ts_us": time.time_ns() // 1000,
            "closed_ts_us": None,
            "devices": {},
        }
        self._write_manifest()

    def append(self, env: Envelope) -> None:
        if self._closed:
            raise ClosedWriter("writer already closed")
        if env.experiment_id != self.experiment_id:
            raise ArchiveError(
                f"writer is for {self.experiment_id!r}, envelope is {env.experiment_id!r}"
            )
        dev = env.device_id
        entry = self._manifest["devices"].setdefault(dev, {
            "schema": [fs.to_wire() for fs in env.schema],
            "record_count": 0,
            "first_ts_us": None,
            "last_ts_us": None,
            "segments": [],
        })

        seg = self._open.get(dev)
        if seg is not None and (
            seg.uncompressed >= self.max_segment_bytes
            or time.monotonic() - seg.opened_wall_s >= self.max_segment_age_s
        ):
            self._seal(dev)
            seg = None
        if seg is None:
            index = len(entry["segments"])
            seg_dir = self.dir / "segments" / dev
            seg_dir.mkdir(parents=True, exist_ok=True)
            seg = _OpenSegment(
                seg_dir / f"{index:06}.jsonl.gz.part", index, time.monotonic()
            )
            self._open[dev] = seg

        seg.write(encode(env) + b"\n", env.ts_us)
        entry["record_count"] += 1
        if entry["first_ts_us"] is None:
            entry["first_ts_us"] = env.ts_us
        entry["last_ts_us"] = env.ts_us

    def _seal(self, dev: str) -> None:
        seg = self._open.pop(dev)
        seg.close()
        final = seg.path.with_suffix("")  # strip .part
        os.replace(seg.path, final)
        # Checksum of the file as stored, so even a flipped bit of gzip
        # framing (which decompression might not notice) is detectable.
        file_sha = hashlib.sha256(final.read_bytes()).hexdigest()
        self._manifest["devices"][dev]["segments"].append({
            "index": seg.index,
            "path": str(final.relative_to(self.dir)),
            "count": seg.count,
            "first_ts_us": seg.first_ts,
            "last_ts_us": seg.last_ts,
            "uncompressed_bytes": seg.uncompressed,
            "sha256": seg.sha.hexdigest(),
            "file_sha256": file_sha,
        })
        self._write_manifest()

    def _write_manifest(self) -> None:
        tmp = self.dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(self._manifest, indent=1))
        os.replace(tmp, self.dir / "manifest.json")

    def close(self) -> None:
        if self._closed:
            return
        for dev in list(self._open):
            self._seal(dev)
        self._manifest["closed_ts_us"] = time.time_ns() // 1000
        self._write_manifest()
        self._closed = True
        try:
            self._lock_path.unlink()
        except FileNotFoundError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _load_manifest(exp_dir: Path) -> dict:
    path = exp_dir / "manifest.json"
    if not path.exists():
        raise ManifestMissing(f"no manifest at {path}")
    return json.loads(path.read_text())


def _reject_active_writer(exp_dir: Path):
    if (exp_dir / LOCK_NAME).exists():
        raise WriterActive(
            f"writer lock present in {exp_dir}; concurrent writer+reader is unsupported"
        )


def verify(exp_dir: str | Path) -> VerifyReport:
    """Recompute per-segment checksums and counts against the manifest."""
    exp_dir = Path(exp_dir)
    _reject_active_writer(exp_dir)
    manifest = _load_manifest(exp_dir)
    report = VerifyReport()

    for dev, entry in manifest["devices"].items():
        seg_total = 0
        for seg in entry["segments"]:
            path = exp_dir / seg["path"]
            if not path.exists():
                report.problems.append(CorruptSegment(dev, seg["index"], "missing segment file"))
                continue
            raw = path.read_bytes()
            if "file_sha256" in seg and hashlib.sha256(raw).hexdigest() != seg["file_sha256"]:
                report.problems.append(CorruptSegment(dev, seg["index"], "file checksum mismatch"))
                continue
            sha = hashlib.sha256()
            count = 0
            try:
                with gzip.open(path, "rb") as f:
                    for line in f:
                        sha.update(line)
                        count += 1
            except (OSError, EOFError, gzip.BadGzipFile) as e:
                report.problems.append(CorruptSegment(dev, seg["index"], f"unreadable: {e}"))
                continue
            if sha.hexdigest() != seg["sha256"]:
                report.problems.append(CorruptSegment(dev, seg["index"], "checksum mismatch"))
            elif count != seg["count"]:
                report.problems.append(CorruptSegment(
                    dev, seg["index"], f"count {count} != manifest {seg['count']}"
                ))
            seg_total += count

        if seg_total != entry["record_count"]:
            report.problems.append(CorruptSegment(
                dev, -1,
                f"segment counts sum to {seg_total}, manifest says {entry['record_count']}",
            ))

    # Crash leftovers: unsealed tails may belong to devices the manifest
    # has not recorded yet, so scan the directory, not the manifest.
    for t in sorted((exp_dir / "segments").glob("*/*.part")):
        report.warnings.append(
            f"unsealed tail segment {t.parent.name}/{t.name} (crash leftovers)"
        )
    return report


def iter_archive(exp_dir: str | Path):
    """All archived envelopes merged across devices in (ts, device, seq) order."""
    exp_dir = Path(exp_dir)
    manifest = _load_manifest(exp_dir)
    envelopes = []
    for dev, entry in manifest["devices"].items():
        for seg in entry["segments"]:
            with gzip.open(exp_dir / seg["path"], "rb") as f:
                for line in f:
                    envelopes.append(decode(line.rstrip(b"\n")))
    envelopes.sort(key=lambda e: (e.ts_us, e.device_id, e.seq))
    return envelopes


def replay(exp_dir: str | Path, speed: float, transport) -> int:
    """Republish every archived envelope on its original data topic.

    Inter-message gaps are scaled by 1/speed; speed=inf replays as fast as
    possible. Returns the number of envelopes published.
    """
    exp_dir = Path(exp_dir)
    _reject_active_writer(exp_dir)
    report = verify(exp_dir)
    if not report.clean:
        raise ArchiveError(
            "archive fails verification: " + "; ".join(str(p) for p in report.problems)
        )
    if speed <= 0:
        raise ValueError("speed must be > 0 (use float('inf') for full speed)")

    published = 0
    prev_ts = None
    for env in iter_archive(exp_dir):
        if prev_ts is not None and speed != float("inf"):
            gap_s = (env.ts_us - prev_ts) / 1e6 / speed
            if gap_s > 0:
                time.sleep(gap_s)
        transport.publish(
            topic_for("data", env.experiment_id, env.device_id), encode(env)
        )
        published += 1
        prev_ts = env.ts_us
    return published
