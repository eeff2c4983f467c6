"""Trusted reporter runtime: trigger logic, incremental commitment, delivery.

``step`` is the pure trigger function. A report is emitted when the period
has elapsed since the last emission (or a change event arrived) and the
configuration hash differs from the last attested one.

``TrustedReporter`` wraps ``step`` with an incrementally maintained tree and
a choice of scheduling:

* optimized (default): the hash is recomputed on change events and on a
  periodic rescan every ``period_ms``;
* strict: the literal rule, re-hashing on every tick once the period has
  elapsed since the last emission.

When every change produces an event the two schedules emit identical reports.

``run_loop`` runs three threads: a polling watcher, the trigger loop and a
sender that owns the hub connection and keeps a bounded, ordered retry queue.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol

from . import merkle
from .attestation import (
    AttestationReport, Mode, SigningBackend, encode_report, generate_nonce, make_report, system_clock,
)
from .errors import TransportError
from .evidence import (
    ConfigUpdateEvent, DatastoreSnapshot, EvidenceManifest, EvidenceSet, collect, compute_config_hash,
)

log = logging.getLogger(__name__)

DEFAULT_PERIOD_MS = 300
DEFAULT_DEBOUNCE_MS = 20
DEFAULT_RETRY_DEPTH = 64


@dataclass(frozen=True)
class TriggerState:
    last_attested_time: int | None = None
    last_attested_hash: bytes | None = None


@dataclass
class AgentConfig:
    datastore: Path
    manifest: Path
    prh: str | None = None
    period_ms: int = DEFAULT_PERIOD_MS
    mode: Mode = Mode.COMPACT
    backend: str = "software"
    key: Path | None = None
    tpm_key_context: str | None = None
    tpm_public_key: Path | None = None
    platform_id: bytes | None = None
    strict_alg2: bool = False
    debounce_ms: int = DEFAULT_DEBOUNCE_MS
    retry_depth: int = DEFAULT_RETRY_DEPTH
    backoff_initial_ms: int = 50
    backoff_max_ms: int = 2000
    drain_timeout_s: float = 5.0
    tls_cert: Path | None = None
    tls_key: Path | None = None
    tls_ca: Path | None = None

    def __post_init__(self) -> None:
        if self.period_ms <= 0:
            raise ValueError("period_ms must be positive")
        if self.retry_depth <= 0:
            raise ValueError("retry_depth must be positive")
        self.mode = Mode(self.mode)

    @property
    def tick_ms(self) -> int:
        return max(1, self.period_ms // 10)


Hasher = Callable[[EvidenceSet], bytes]


def step(
    state: TriggerState,
    now: int,
    event: ConfigUpdateEvent | None,
    snapshot: DatastoreSnapshot,
    manifest: EvidenceManifest,
    backend: SigningBackend,
    *,
    platform_id: bytes,
    period_ms: int = DEFAULT_PERIOD_MS,
    mode: Mode = Mode.COMPACT,
    nonce_source: Callable[[], bytes] = generate_nonce,
    runtime_fields: Mapping[str, bytes] | None = None,
    hasher: Hasher | None = None,
) -> tuple[TriggerState, AttestationReport | None]:
    due = state.last_attested_time is None or now - state.last_attested_time >= period_ms
    if not (due or event is not None):
        return state, None
    evidence = collect(manifest, snapshot, runtime_fields)
    current = (hasher or compute_config_hash)(evidence)
    if current == state.last_attested_hash:
        return state, None
    # Timestamps must strictly increase per reporter even if two emissions
    # land on the same millisecond.
    ts = now
    if state.last_attested_time is not None and ts <= state.last_attested_time:
        ts = state.last_attested_time + 1
    report = make_report(current, evidence, backend, platform_id, lambda: ts, mode, nonce_source)
    return TriggerState(ts, current), report


def maintain_tree(tree: merkle.MerkleTree, evidence: EvidenceSet, changed_ids) -> bytes:
    """Refresh the leaves named in ``changed_ids`` from ``evidence``; return the root."""
    if tree.leaf_count != len(evidence):
        raise ValueError(f"tree has {tree.leaf_count} leaves, evidence has {len(evidence)}")
    for ident in sorted(changed_ids):
        idx = evidence.index_of(ident)
        merkle.update_leaf(tree, idx, evidence[ident].digest)
    return tree.root


class IncrementalHasher:
    """Configuration hash that patches a cached tree instead of rebuilding it."""

    def __init__(self) -> None:
        self.tree: merkle.MerkleTree | None = None
        self._ids: list[str] = []
        self._digests: list[bytes] = []
        self.rebuilds = 0

    def __call__(self, evidence: EvidenceSet) -> bytes:
        ids, digests = evidence.ids, evidence.leaf_digests()
        if self.tree is None or ids != self._ids:
            _, self.tree = merkle.build_tree(digests)
            self.rebuilds += 1
        else:
            changed = {i for i, old, new in zip(ids, self._digests, digests) if old != new}
            if changed:
                maintain_tree(self.tree, evidence, changed)
        self._ids, self._digests = ids, digests
        return self.tree.root


class TrustedReporter:
    """Stateful driver around ``step`` that owns the trigger state and tree."""

    def __init__(
        self,
        snapshot: DatastoreSnapshot,
        manifest: EvidenceManifest,
        backend: SigningBackend,
        platform_id: bytes,
        *,
        period_ms: int = DEFAULT_PERIOD_MS,
        mode: Mode = Mode.COMPACT,
        strict: bool = False,
        nonce_source: Callable[[], bytes] = generate_nonce,
        runtime_fields: Callable[[], Mapping[str, bytes]] | None = None,
    ) -> None:
        self.snapshot = snapshot
        self.manifest = manifest
        self.backend = backend
        self.platform_id = platform_id
        self.period_ms = period_ms
        self.mode = Mode(mode)
        self.strict = strict
        self.nonce_source = nonce_source
        self.runtime_fields = runtime_fields
        self.state = TriggerState()
        self.hasher = IncrementalHasher()
        self.last_scan: int | None = None
        self.hash_computations = 0

    def tick(self, now: int, event: ConfigUpdateEvent | None = None) -> AttestationReport | None:
        if not self.strict and event is None and self.last_scan is not None \
                and now - self.last_scan < self.period_ms:
            return None
        self._hashed = False
        self.state, report = step(
            self.state, now, event, self.snapshot, self.manifest, self.backend,
            platform_id=self.platform_id, period_ms=self.period_ms, mode=self.mode,
            nonce_source=self.nonce_source,
            runtime_fields=self.runtime_fields() if self.runtime_fields else None,
            hasher=self._counted_hash,
        )
        if report is not None or self._hashed:
            self.last_scan = now
        if report is not None:
            log.info("report emitted t=%d root=%s", report.timestamp, report.merkle_root.hex()[:16])
        return report

    _hashed = False

    def _counted_hash(self, evidence: EvidenceSet) -> bytes:
        self.hash_computations += 1
        self._hashed = True
        return self.hasher(evidence)


# --------------------------------------------------------------------------
# watcher
# --------------------------------------------------------------------------

def _signature(path: Path) -> tuple[int, int, int] | None:
    try:
        st = path.stat()
    except FileNotFoundError:
        return None
    return st.st_mtime_ns, st.st_size, st.st_ino


class PollingWatcher:
    """Detects datastore changes by polling file metadata.

    A change is reported only once the file has been quiet for ``debounce_ms``,
    so a burst of partial writes yields a single event.
    """

    def __init__(self, snapshot: DatastoreSnapshot, debounce_ms: int = DEFAULT_DEBOUNCE_MS,
                 clock: Callable[[], float] = time.time) -> None:
        self.snapshot = snapshot
        self.root = Path(snapshot.root_dir)
        self.debounce_ms = debounce_ms
        self.clock = clock
        self._known = self._scan()
        self._pending: dict[str, tuple[int, int, int] | None] = {}

    def _scan(self) -> dict[str, tuple[int, int, int]]:
        out = {}
        for dirpath, dirnames, filenames in os.walk(self.root):
            dirnames[:] = [d for d in dirnames if not d.startswith(".")]
            for name in filenames:
                if name.startswith(".upd-"):
                    continue
                full = Path(dirpath) / name
                if full.is_symlink() or not full.is_file():
                    continue
                sig = _signature(full)
                if sig is not None:
                    out[full.relative_to(self.root).as_posix()] = sig
        return out

    def poll(self) -> list[ConfigUpdateEvent]:
        current = self._scan()
        for rel in set(current) | set(self._known):
            if current.get(rel) != self._known.get(rel):
                self._pending[rel] = current.get(rel)
        self._known = current
        now_ns = int(self.clock() * 1e9)
        events = []
        for rel, sig in list(self._pending.items()):
            if sig is not None and now_ns - sig[0] < self.debounce_ms * 1_000_000:
                continue
            del self._pending[rel]
            try:
                content = (self.root / rel).read_bytes() if sig is not None else None
            except FileNotFoundError:
                content = None
            if content is not None and self.snapshot.files_copy().get(rel) == content:
                continue
            events.append(self.snapshot.refresh(rel, content))
        return events


# --------------------------------------------------------------------------
# sender
# --------------------------------------------------------------------------

class ReportSink(Protocol):
    def send_report(self, envelope: bytes) -> tuple[bool, str]: ...


_RETRYABLE_REJECTS = ("ChainIOFailure",)


@dataclass
class SenderStats:
    delivered: int = 0
    rejected: int = 0
    dropped: int = 0
    attempts: int = 0
    rejections: list[str] = field(default_factory=list)


class ReportSender:
    """Delivers reports in order with bounded exponential backoff.

    The queue holds at most ``depth`` reports; on overflow the oldest one is
    dropped and a gap warning is logged. Reports rejected by the hub are not
    retried, since resending identical bytes can never succeed.
    """

    def __init__(self, sink: ReportSink, depth: int = DEFAULT_RETRY_DEPTH,
                 backoff_initial_ms: int = 50, backoff_max_ms: int = 2000) -> None:
        self.sink = sink
        self.depth = depth
        self.backoff_initial = backoff_initial_ms / 1000
        self.backoff_max = backoff_max_ms / 1000
        self.stats = SenderStats()
        self._queue: deque[bytes] = deque()
        self._cond = threading.Condition()
        self._stopping = False
        self._abort = threading.Event()
        self._thread: threading.Thread | None = None

    def submit(self, envelope: bytes) -> None:
        with self._cond:
            if len(self._queue) >= self.depth:
                self._queue.popleft()
                self.stats.dropped += 1
                log.warning("retry queue full: dropped oldest report, audit log will show a gap")
            self._queue.append(envelope)
            self._cond.notify()

    def pending(self) -> int:
        with self._cond:
            return len(self._queue)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="report-sender", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        delay = self.backoff_initial
        while True:
            with self._cond:
                while not self._queue and not self._stopping:
                    self._cond.wait()
                if not self._queue:
                    return
                head = self._queue[0]
            if self._abort.is_set():
                return
            self.stats.attempts += 1
            try:
                ok, detail = self.sink.send_report(head)
            except (TransportError, OSError) as exc:
                log.warning("hub unreachable (%s); retrying in %.0f ms", exc, delay * 1000)
                if self._abort.wait(delay):
                    return
                delay = min(delay * 2, self.backoff_max)
                continue
            delay = self.backoff_initial
            if not ok and detail.startswith(_RETRYABLE_REJECTS):
                log.warning("hub storage failure (%s); retrying", detail)
                if self._abort.wait(self.backoff_initial):
                    return
                continue
            with self._cond:
                if self._queue and self._queue[0] is head:
                    self._queue.popleft()
            if ok:
                self.stats.delivered += 1
            else:
                self.stats.rejected += 1
                self.stats.rejections.append(detail)
                log.warning("hub rejected report: %s", detail)

    def stop(self, drain_timeout: float = 5.0) -> None:
        """Flush what can be flushed within ``drain_timeout`` seconds, then stop."""
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(drain_timeout)
            if self._thread.is_alive():
                self._abort.set()
                self._thread.join()
        left = self.pending()
        if left:
            log.warning("shutdown with %d undelivered report(s)", left)


# --------------------------------------------------------------------------
# main loop
# --------------------------------------------------------------------------

@dataclass
class LoopSummary:
    reports: list[AttestationReport]
    sender: SenderStats
    undelivered: int
    errors: list[BaseException]


def build_backend(config: AgentConfig) -> SigningBackend:
    from .attestation import ExternalTpmBackend, SoftwareKeyBackend

    if config.backend == "software":
        if config.key is None:
            raise ValueError("software backend needs a private key file")
        return SoftwareKeyBackend.from_pem_file(config.key)
    if config.backend == "tpm":
        if not config.tpm_key_context or not config.tpm_public_key:
            raise ValueError("tpm backend needs a key context and a public key file")
        return ExternalTpmBackend(config.tpm_key_context, config.tpm_public_key)
    raise ValueError(f"unknown backend {config.backend!r}")


def _client_for(config: AgentConfig):
    from .prh import PrhClient

    ctx = None
    if config.tls_cert:
        from .transport import client_context

        ctx = client_context(config.tls_cert, config.tls_key, config.tls_ca)
    return PrhClient(config.prh, ctx)


def run_loop(
    config: AgentConfig,
    stop: threading.Event | None = None,
    *,
    backend: SigningBackend | None = None,
    sink: ReportSink | None = None,
    clock: Callable[[], int] = system_clock,
    on_report: Callable[[AttestationReport], None] | None = None,
) -> LoopSummary:
    """Run the reporter until ``stop`` is set; returns what happened."""
    from .attestation import reporter_measurement
    from .evidence import load_datastore

    stop = stop or threading.Event()
    snapshot = load_datastore(config.datastore)
    manifest = EvidenceManifest.load(config.manifest)
    backend = backend or build_backend(config)
    platform_id = config.platform_id or reporter_measurement()
    reporter = TrustedReporter(snapshot, manifest, backend, platform_id,
                               period_ms=config.period_ms, mode=config.mode, strict=config.strict_alg2)
    watcher = PollingWatcher(snapshot, config.debounce_ms)

    if sink is None and config.prh:
        sink = _client_for(config)
    sender = ReportSender(sink, config.retry_depth, config.backoff_initial_ms,
                          config.backoff_max_ms) if sink is not None else None

    events: queue.Queue[ConfigUpdateEvent] = queue.Queue(maxsize=1024)
    emitted: list[AttestationReport] = []
    errors: list[BaseException] = []

    def watch() -> None:
        while not stop.wait(config.tick_ms / 1000):
            try:
                for ev in watcher.poll():
                    events.put(ev)
            except Exception as exc:  # keep watching; a transient read error is not fatal
                log.warning("watcher poll failed: %s", exc)

    last_ts = 0

    def monotonic_now() -> int:
        nonlocal last_ts
        last_ts = max(clock(), last_ts + 1)
        return last_ts

    def attest() -> None:
        while True:
            drained = []
            try:
                while True:
                    drained.append(events.get_nowait())
            except queue.Empty:
                pass
            event = drained[-1] if drained else None
            try:
                report = reporter.tick(monotonic_now(), event)
            except Exception as exc:
                log.error("attestation cycle failed: %s", exc)
                errors.append(exc)
                report = None
            if report is not None:
                emitted.append(report)
                if on_report:
                    on_report(report)
                if sender is not None:
                    sender.submit(encode_report(report))
            if stop.wait(config.tick_ms / 1000):
                return

    if sender is not None:
        sender.start()
    threads = [threading.Thread(target=watch, name="watcher", daemon=True),
               threading.Thread(target=attest, name="attest", daemon=True)]
    for t in threads:
        t.start()
    try:
        while not stop.wait(0.1):
            pass
    except KeyboardInterrupt:
        stop.set()
    for t in threads:
        t.join()
    undelivered = 0
    stats = SenderStats()
    if sender is not None:
        sender.stop(config.drain_timeout_s)
        undelivered = sender.pending()
        stats = sender.stats
    close = getattr(sink, "close", None)
    if close:
        close()
    return LoopSummary(emitted, stats, undelivered, errors)


__all__ = [
    "AgentConfig", "IncrementalHasher", "LoopSummary", "PollingWatcher", "ReportSender", "SenderStats",
    "TriggerState", "TrustedReporter", "build_backend", "maintain_tree", "run_loop", "step",
]
