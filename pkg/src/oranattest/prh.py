"""Proof Repository Hub: replay-checked ingest into a hash-chained audit log.

Log file layout, one record per accepted report, appended and fsynced::

    u32 record_len | u64 seq | u64 received_at_ms | prev_hash(32) | entry_hash(32) | report_bytes

``entry_hash = SHA256(prev_hash || u64 seq || u64 received_at_ms || report_bytes)``
and entry 0 chains from 32 zero bytes. Every persisted byte is covered by
either the hash input or the link check, so a single flipped byte anywhere
is reported at exactly the record that holds it.

The in-memory index (platform -> seqs) and replay state are rebuilt from
the log on open.
"""

from __future__ import annotations

import hmac
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator

from . import merkle
from .attestation import AttestationReport, TrustStore, decode_report, system_clock
from .errors import DecodeError, MalformedKey, OranAttestError

log = logging.getLogger(__name__)

GENESIS = bytes(32)
LOG_NAME = "audit.log"
TRUST_NAME = "trust.json"
DEFAULT_SKEW_MS = 5_000
DEFAULT_RETENTION_MS = 24 * 3600 * 1000

_HEADER = struct.Struct(">QQ32s32s")
_LEN = struct.Struct(">I")


class RejectReason(str, Enum):
    DecodeError = "DecodeError"
    UnknownPlatform = "UnknownPlatform"
    BadSignature = "BadSignature"
    StaleTimestamp = "StaleTimestamp"
    DuplicateNonce = "DuplicateNonce"
    ChainIOFailure = "ChainIOFailure"


@dataclass(frozen=True)
class IngestResult:
    accepted: bool
    seq: int | None = None
    reason: RejectReason | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    prev_hash: bytes
    report_bytes: bytes
    entry_hash: bytes
    received_at: int

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
            "received_at": self.received_at,
            "report": self.report_bytes.decode("utf-8", errors="replace"),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AuditEntry":
        return cls(obj["seq"], bytes.fromhex(obj["prev_hash"]), obj["report"].encode("utf-8"),
                   bytes.fromhex(obj["entry_hash"]), obj["received_at"])


@dataclass(frozen=True)
class ChainStatus:
    ok: bool
    broken_at: int | None = None
    entries: int = 0

    def __bool__(self) -> bool:
        return self.ok


class ChainCorrupted(OranAttestError):
    pass


def entry_hash(prev_hash: bytes, seq: int, received_at: int, report_bytes: bytes) -> bytes:
    return merkle.sha256(prev_hash + struct.pack(">QQ", seq, received_at) + report_bytes)


def encode_record(entry: AuditEntry) -> bytes:
    body = _HEADER.pack(entry.seq, entry.received_at, entry.prev_hash, entry.entry_hash) + entry.report_bytes
    return _LEN.pack(len(body)) + body


def _parse_records(data: bytes) -> Iterator[tuple[int, int, AuditEntry | None]]:
    """Yield ``(offset, end, entry)``; ``entry`` is None for an unparsable tail."""
    pos = 0
    while pos < len(data):
        if pos + _LEN.size > len(data):
            yield pos, len(data), None
            return
        (length,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + length
        if length < _HEADER.size or end > len(data):
            yield pos, len(data), None
            return
        seq, received_at, prev, ehash = _HEADER.unpack_from(data, pos + _LEN.size)
        report = data[pos + _LEN.size + _HEADER.size:end]
        yield pos, end, AuditEntry(seq, prev, report, ehash, received_at)
        pos = end


def verify_entries(entries: Iterable[AuditEntry | None]) -> ChainStatus:
    prev = GENESIS
    count = 0
    for index, entry in enumerate(entries):
        if (
            entry is None
            or entry.seq != index
            or entry.prev_hash != prev
            or entry.entry_hash != entry_hash(entry.prev_hash, entry.seq, entry.received_at, entry.report_bytes)
        ):
            return ChainStatus(False, index, count)
        prev = entry.entry_hash
        count += 1
    return ChainStatus(True, None, count)


def verify_chain(source: "str | os.PathLike | bytes | PrhStore | Iterable[AuditEntry]") -> ChainStatus:
    """Check every link; ``broken_at`` is the first bad record's position.

    ``source`` may be a log path, raw log bytes, an open store, or entries.
    """
    if isinstance(source, PrhStore):
        source = source.log_path
    if isinstance(source, (bytes, bytearray)):
        return verify_entries(e for _, _, e in _parse_records(bytes(source)))
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        data = path.read_bytes() if path.exists() else b""
        return verify_entries(e for _, _, e in _parse_records(data))
    return verify_entries(source)


def read_log(path: str | os.PathLike) -> list[AuditEntry]:
    data = Path(path).read_bytes()
    entries = []
    for _, _, e in _parse_records(data):
        if e is None:
            raise ChainCorrupted(f"{path}: unparsable record after seq {len(entries) - 1}")
        entries.append(e)
    return entries


class FreshnessState:
    """Per-platform last accepted timestamp and recently seen nonces."""

    def __init__(self, retention_ms: int = DEFAULT_RETENTION_MS) -> None:
        self.retention_ms = retention_ms
        self.last_timestamp: dict[bytes, int] = {}
        self.nonces: dict[bytes, dict[bytes, int]] = {}

    def check(self, report: AttestationReport, now_ms: int, skew_ms: int) -> tuple[RejectReason, str] | None:
        pid = report.platform_id
        if report.nonce in self.nonces.get(pid, {}):
            return RejectReason.DuplicateNonce, f"nonce {report.nonce.hex()} already accepted"
        last = self.last_timestamp.get(pid)
        if last is not None and report.timestamp <= last:
            return RejectReason.StaleTimestamp, f"timestamp {report.timestamp} <= last accepted {last}"
        if report.timestamp > now_ms + skew_ms:
            return RejectReason.StaleTimestamp, (
                f"timestamp {report.timestamp} is ahead of receiver clock {now_ms} by more than {skew_ms} ms")
        return None

    def record(self, report: AttestationReport, now_ms: int) -> None:
        pid = report.platform_id
        self.last_timestamp[pid] = report.timestamp
        seen = self.nonces.setdefault(pid, {})
        seen[report.nonce] = report.timestamp
        cutoff = now_ms - self.retention_ms
        if len(seen) > 1024 and next(iter(seen.values())) < cutoff:
            for n in [n for n, t in seen.items() if t < cutoff]:
                del seen[n]


class PrhStore:
    """Audit log, index and freshness state behind one ingest lock."""

    def __init__(
        self,
        store_dir: str | os.PathLike,
        trust: TrustStore | None = None,
        clock: Callable[[], int] = system_clock,
        skew_ms: int = DEFAULT_SKEW_MS,
        retention_ms: int = DEFAULT_RETENTION_MS,
        fsync: bool = True,
        admin_token: str | None = None,
    ) -> None:
        self.dir = Path(store_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / LOG_NAME
        self.trust = trust if trust is not None else TrustStore()
        self.clock = clock
        self.skew_ms = skew_ms
        self.fsync = fsync
        self.admin_token = admin_token
        self.freshness = FreshnessState(retention_ms)
        self.entries: list[AuditEntry] = []
        self.index: dict[bytes, list[int]] = {}
        self._timestamps: list[int] = []
        self._lock = threading.Lock()
        self._load_trust()
        self._recover()
        self._fh = open(self.log_path, "ab")

    # ------------------------------------------------------------ recovery
    def _load_trust(self) -> None:
        extra = self.dir / TRUST_NAME
        if extra.exists():
            for pid, key in TrustStore.load(extra).to_json().items():
                self.trust.add(bytes.fromhex(pid), key)

    def _recover(self) -> None:
        data = self.log_path.read_bytes() if self.log_path.exists() else b""
        good_end = 0
        entries = []
        for _, end, e in _parse_records(data):
            if e is None:
                log.warning("truncating torn record at offset %d of %s", good_end, self.log_path)
                with open(self.log_path, "r+b") as fh:
                    fh.truncate(good_end)
                break
            entries.append(e)
            good_end = end
        status = verify_entries(entries)
        if not status.ok:
            raise ChainCorrupted(f"{self.log_path}: chain broken at seq {status.broken_at}")
        for e in entries:
            self._index_entry(e, decode_report(e.report_bytes))

    def _index_entry(self, entry: AuditEntry, report: AttestationReport) -> None:
        self.entries.append(entry)
        self._timestamps.append(report.timestamp)
        self.index.setdefault(report.platform_id, []).append(entry.seq)
        self.freshness.record(report, entry.received_at)

    # ------------------------------------------------------------ ingest
    def ingest(self, report_bytes: bytes) -> IngestResult:
        try:
            report = decode_report(report_bytes)
        except DecodeError as exc:
            return IngestResult(False, reason=RejectReason.DecodeError, detail=str(exc))
        key = self.trust.get(report.platform_id)
        if key is None:
            return IngestResult(False, reason=RejectReason.UnknownPlatform, detail=report.platform_id.hex())
        if not self.trust.verify(report):
            return IngestResult(False, reason=RejectReason.BadSignature)

        with self._lock:
            now = self.clock()
            problem = self.freshness.check(report, now, self.skew_ms)
            if problem is not None:
                return IngestResult(False, reason=problem[0], detail=problem[1])
            seq = len(self.entries)
            prev = self.entries[-1].entry_hash if self.entries else GENESIS
            entry = AuditEntry(seq, prev, bytes(report_bytes), entry_hash(prev, seq, now, report_bytes), now)
            try:
                self._append(entry)
            except OSError as exc:
                return IngestResult(False, reason=RejectReason.ChainIOFailure, detail=str(exc))
            self._index_entry(entry, report)
            return IngestResult(True, seq=seq)

    def _append(self, entry: AuditEntry) -> None:
        start = self._fh.tell()
        try:
            self._fh.write(encode_record(entry))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError:
            # roll back a partial write so the log stays parseable
            self._fh.truncate(start)
            self._fh.seek(start)
            raise

    # ------------------------------------------------------------ queries
    def query(
        self,
        platform_id: bytes,
        start_ms: int | None = None,
        end_ms: int | None = None,
        seq_start: int | None = None,
        seq_end: int | None = None,
    ) -> list[AuditEntry]:
        """Entries of one platform in seq order.

        Ranges are half-open: ``start <= x < end`` on the report timestamp and
        on ``seq``; ``None`` leaves that side unbounded.
        """
        seqs = list(self.index.get(platform_id, ()))
        out = []
        for s in seqs:
            if seq_start is not None and s < seq_start:
                continue
            if seq_end is not None and s >= seq_end:
                continue
            t = self._timestamps[s]
            if start_ms is not None and t < start_ms:
                continue
            if end_ms is not None and t >= end_ms:
                continue
            out.append(self.entries[s])
        return out

    def latest(self, platform_id: bytes) -> AuditEntry | None:
        seqs = self.index.get(platform_id)
        return self.entries[seqs[-1]] if seqs else None

    def verify_chain(self) -> ChainStatus:
        return verify_chain(self.log_path)

    def add_trust(self, platform_id: bytes, public_key_pem: str, token: str | None = None) -> None:
        if self.admin_token is None or token is None or not hmac.compare_digest(token, self.admin_token):
            raise PermissionError("trust_add requires the admin token")
        with self._lock:
            self.trust.add(platform_id, public_key_pem)
            persisted = TrustStore()
            extra = self.dir / TRUST_NAME
            if extra.exists():
                persisted = TrustStore.load(extra)
            persisted.add(platform_id, public_key_pem)
            persisted.save(extra)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "PrhStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------
# wire protocol
# --------------------------------------------------------------------------
# Request frame: a report envelope (INGEST) or a JSON object with an "op" key.
# Reply frame: 1 status byte (0 ok, 1 rejected/error) + optional UTF-8 body.
# INGEST bodies are "seq=N" or "<Reason>: detail"; other ops reply with JSON.

STATUS_OK = 0
STATUS_REJECT = 1


def _reply(ok: bool, body: str | dict = "") -> bytes:
    if isinstance(body, dict):
        body = json.dumps(body, separators=(",", ":"))
    return bytes([STATUS_OK if ok else STATUS_REJECT]) + body.encode("utf-8")


def handle_frame(store: PrhStore, frame: bytes) -> bytes:
    op = None
    try:
        obj = json.loads(frame)
        if isinstance(obj, dict) and "op" in obj:
            op = obj["op"]
    except (ValueError, UnicodeDecodeError):
        pass

    if op is None:
        res = store.ingest(frame)
        if res.accepted:
            return _reply(True, f"seq={res.seq}")
        return _reply(False, f"{res.reason.value}: {res.detail}" if res.detail else res.reason.value)

    try:
        if op == "query":
            pid = bytes.fromhex(obj["platform_id"])
            entries = store.query(pid, obj.get("start_ms"), obj.get("end_ms"),
                                  obj.get("seq_start"), obj.get("seq_end"))
            if obj.get("latest") and entries:
                entries = entries[-1:]
            return _reply(True, {"entries": [e.to_json() for e in entries]})
        if op == "chain_verify":
            st = store.verify_chain()
            return _reply(True, {"ok": st.ok, "broken_at": st.broken_at, "entries": st.entries})
        if op == "trust_add":
            store.add_trust(bytes.fromhex(obj["platform_id"]), obj["public_key"], obj.get("token"))
            return _reply(True, {"ok": True})
        return _reply(False, {"error": f"unknown op {op!r}"})
    except PermissionError as exc:
        return _reply(False, {"error": str(exc)})
    except (KeyError, ValueError, TypeError, MalformedKey) as exc:
        return _reply(False, {"error": f"bad request: {exc}"})


def parse_reply(reply: bytes) -> tuple[bool, str]:
    if not reply:
        raise DecodeError("empty reply", 0)
    return reply[0] == STATUS_OK, reply[1:].decode("utf-8", errors="replace")


def serve(store: PrhStore, listen: str, ssl_context=None):
    from .transport import FramedServer, parse_addr

    server = FramedServer(parse_addr(listen), lambda frame: handle_frame(store, frame), ssl_context)
    return server


class PrhClient:
    """Tenant/agent-side helper for the hub's framed protocol."""

    def __init__(self, addr: str, ssl_context=None, timeout: float = 5.0) -> None:
        from .transport import FramedClient

        self._client = FramedClient(addr, ssl_context, timeout)

    def send_report(self, envelope: bytes) -> tuple[bool, str]:
        return parse_reply(self._client.request(envelope))

    def _op(self, **req) -> dict:
        ok, body = parse_reply(self._client.request(json.dumps(req).encode()))
        obj = json.loads(body) if body else {}
        if not ok:
            raise OranAttestError(obj.get("error", body))
        return obj

    def query(self, platform_id: bytes, **filters) -> list[AuditEntry]:
        obj = self._op(op="query", platform_id=platform_id.hex(), **filters)
        return [AuditEntry.from_json(e) for e in obj["entries"]]

    def latest(self, platform_id: bytes) -> AuditEntry | None:
        entries = self.query(platform_id, latest=True)
        return entries[-1] if entries else None

    def chain_verify(self) -> ChainStatus:
        obj = self._op(op="chain_verify")
        return ChainStatus(obj["ok"], obj["broken_at"], obj["entries"])

    def trust_add(self, platform_id: bytes, public_key_pem: str, token: str) -> None:
        self._op(op="trust_add", platform_id=platform_id.hex(), public_key=public_key_pem, token=token)

    def close(self) -> None:
        self._client.close()
