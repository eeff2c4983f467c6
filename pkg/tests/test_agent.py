import itertools
import math
import random
import threading
import time

import pytest

from oranattest import merkle
from oranattest.agent import (
    AgentConfig, IncrementalHasher, PollingWatcher, ReportSender, TriggerState, TrustedReporter, maintain_tree,
    run_loop, step,
)
from oranattest.attestation import Mode, SoftwareKeyBackend, decode_report
from oranattest.errors import CollectionError, TransportError, UnknownEvidenceId
from oranattest.evidence import (
    Category, Disclosure, EvidenceItem, EvidenceSet, RuntimeSource, collect, compute_config_hash, load_datastore,
)
from oranattest.fixtures import generate_fixture

from conftest import H, oracle_root
from oracles import trigger_reference, drive_reporter, random_timeline

PID = H(b"agent-test")


@pytest.fixture(scope="module")
def backend(rsa_key):
    return SoftwareKeyBackend(rsa_key)


@pytest.fixture
def fx(tmp_path):
    return generate_fixture(tmp_path / "fx", 12, seed=3)


def counter_nonces():
    c = itertools.count()
    return lambda: next(c).to_bytes(16, "big")


def run_step(state, now, event, snap, fx, backend, **kw):
    return step(state, now, event, snap, fx.manifest, backend, platform_id=PID, **kw)


def test_first_call_emits(fx, backend):
    snap = load_datastore(fx.datastore)
    state, report = run_step(TriggerState(), 0, None, snap, fx, backend)
    root = compute_config_hash(collect(fx.manifest, snap))
    assert report is not None and report.timestamp == 0 and report.merkle_root == root
    assert state == TriggerState(0, root)


def test_unchanged_periodic_no_emit(fx, backend):
    snap = load_datastore(fx.datastore)
    state, _ = run_step(TriggerState(), 0, None, snap, fx, backend)
    for now in (300, 600, 10_000):
        again, report = run_step(state, now, None, snap, fx, backend)
        assert report is None and again == state


def test_event_before_deadline(fx, backend):
    snap = load_datastore(fx.datastore)
    state, _ = run_step(TriggerState(), 0, None, snap, fx, backend)
    ev = snap.apply_update("startup-config.xml", b"<config>changed</config>")
    state2, report = run_step(state, 150, ev, snap, fx, backend)
    assert report is not None and report.timestamp == 150 and state2.last_attested_time == 150
    # without the event, the periodic guard holds until the deadline
    snap.apply_update("startup-config.xml", b"<config>again</config>")
    assert run_step(state2, 299, None, snap, fx, backend)[1] is None
    assert run_step(state2, 450, None, snap, fx, backend)[1] is not None


def test_step_purity(fx, backend):
    snap = load_datastore(fx.datastore)
    a = run_step(TriggerState(), 5, None, snap, fx, backend, nonce_source=lambda: b"\x01" * 16)
    b = run_step(TriggerState(), 5, None, snap, fx, backend, nonce_source=lambda: b"\x01" * 16)
    assert a == b


def test_step_error_leaves_state(fx, backend):
    snap = load_datastore(fx.datastore)
    state, _ = run_step(TriggerState(), 0, None, snap, fx, backend)
    original = snap.files["o-ran-interfaces.xml"]
    ev = snap.apply_update("o-ran-interfaces.xml", b"<not-xml")

    with pytest.raises(CollectionError):
        run_step(state, 10, ev, snap, fx, backend)

    class Broken:
        def sign(self, m):
            raise RuntimeError("hsm offline")
    snap.apply_update("o-ran-interfaces.xml", original)
    frozen = state
    snap.apply_update("startup-config.xml", b"<x/>")
    with pytest.raises(RuntimeError):
        step(state, 20, ev, snap, fx.manifest, Broken(), platform_id=PID)
    assert state == frozen


def test_same_millisecond_emissions_strictly_increase(fx, backend):
    snap = load_datastore(fx.datastore)
    state, r1 = run_step(TriggerState(), 100, None, snap, fx, backend)
    ev = snap.apply_update("startup-config.xml", b"<c>1</c>")
    state, r2 = run_step(state, 100, ev, snap, fx, backend)
    assert r2.timestamp == 101 > r1.timestamp


def test_manifest_mode_reports(fx, backend):
    snap = load_datastore(fx.datastore)
    _, report = run_step(TriggerState(), 0, None, snap, fx, backend, mode=Mode.MANIFEST)
    assert set(report.dynamic_plaintext) == {"fronthaul/macsec", "sync/clock-class"}


# -- maintain_tree ---------------------------------------------------------

def hundred():
    return EvidenceSet([EvidenceItem(f"item/{i:03d}", Category.RuntimeConfig, Disclosure.STATIC,
                                     f"payload {i}".encode(), RuntimeSource(str(i))) for i in range(100)])


def test_maintain_tree_single_change_hash_count(monkeypatch):
    ev = hundred()
    _, tree = merkle.build_tree(ev.leaf_digests())
    changed = ev.replace("item/042", b"new")
    calls = []
    orig = merkle._node_hash
    monkeypatch.setattr(merkle, "_node_hash", lambda l, r: calls.append(1) or orig(l, r))
    root = maintain_tree(tree, changed, {"item/042"})
    assert len(calls) <= math.ceil(math.log2(100)) + 1
    assert root == oracle_root(changed.leaf_digests())


def test_maintain_tree_empty_and_all():
    ev = hundred()
    root0, tree = merkle.build_tree(ev.leaf_digests())
    assert maintain_tree(tree, ev, set()) == root0
    mutated = EvidenceSet([EvidenceItem(it.id, it.category, it.disclosure, it.payload + b"!", it.source)
                           for it in ev])
    assert maintain_tree(tree, mutated, set(mutated.ids)) == merkle.build_tree(mutated.leaf_digests())[0]


def test_maintain_tree_unknown_id():
    ev = hundred()
    _, tree = merkle.build_tree(ev.leaf_digests())
    with pytest.raises(UnknownEvidenceId):
        maintain_tree(tree, ev, {"nope"})


def test_incremental_hasher_matches_rebuild():
    rng = random.Random(5)
    ev = hundred()
    h = IncrementalHasher()
    for _ in range(50):
        for ident in rng.sample(ev.ids, rng.randint(0, 5)):
            ev = ev.replace(ident, rng.randbytes(8))
        assert h(ev) == oracle_root(ev.leaf_digests())
    assert h.rebuilds == 1


# -- reporter vs reference simulation -------------------------------------

WRITABLE = ["startup-config.xml", "running-config.xml", "runtimeconfig-o-ran-uplane-conf-009.xml"]


@pytest.mark.parametrize("strict", [False, True])
def test_reporter_matches_reference_timelines(tmp_path, backend, strict):
    fx = generate_fixture(tmp_path / "fx", 12, seed=1)
    files = sorted(p.name for p in fx.datastore.iterdir())
    writable = [f for f in files if f not in ("o-ran-interfaces.xml", "o-ran-sync.xml")]
    rng = random.Random(100 + strict)
    for case in range(15):
        snap = load_datastore(fx.datastore)
        initial = snap.files_copy()
        writes, ticks = random_timeline(rng, writable, 3000, 30)
        expected = trigger_reference(initial, writes, ticks, 300)
        rep = TrustedReporter(snap, fx.manifest, backend, PID, period_ms=300, strict=strict)
        assert drive_reporter(rep, snap, writes, ticks) == expected, case
        for f, content in initial.items():
            (fx.datastore / f).write_bytes(content)


def test_optimized_mode_hashes_less(tmp_path, backend):
    fx = generate_fixture(tmp_path / "fx", 12, seed=1)
    counts = {}
    for strict in (False, True):
        snap = load_datastore(fx.datastore)
        rep = TrustedReporter(snap, fx.manifest, backend, PID, period_ms=300, strict=strict)
        for t in range(0, 3001, 30):
            rep.tick(t)
        counts[strict] = rep.hash_computations
    # 101 ticks: optimized hashes at 0, 300, ..., 3000; strict at 0 and every tick from 300 on
    assert counts[False] == 11 and counts[True] == 1 + (3000 - 300) // 30 + 1


# -- watcher ---------------------------------------------------------------

def test_watcher_debounces_and_refreshes(fx):
    snap = load_datastore(fx.datastore)
    clock = [time.time()]
    w = PollingWatcher(snap, debounce_ms=20, clock=lambda: clock[0])
    assert w.poll() == []
    target = fx.datastore / "startup-config.xml"
    target.write_bytes(b"<a>1</a>")
    target.write_bytes(b"<a>12</a>")
    clock[0] = time.time()
    assert w.poll() == []  # too fresh
    clock[0] += 0.05
    events = w.poll()
    assert [e.file for e in events] == ["startup-config.xml"]
    assert snap.files["startup-config.xml"] == b"<a>12</a>"
    assert w.poll() == []


def test_watcher_reports_deletion(fx):
    snap = load_datastore(fx.datastore)
    w = PollingWatcher(snap, debounce_ms=0)
    (fx.datastore / "running-config.xml").unlink()
    assert [e.file for e in w.poll()] == ["running-config.xml"]
    assert "running-config.xml" not in snap.files


# -- sender ----------------------------------------------------------------

class FlakySink:
    def __init__(self, down_for: int):
        self.down_for = down_for
        self.received = []
        self.lock = threading.Lock()

    def send_report(self, envelope):
        with self.lock:
            if self.down_for > 0:
                self.down_for -= 1
                raise TransportError("connection refused")
            self.received.append(envelope)
            return True, f"seq={len(self.received) - 1}"


def test_sender_retries_in_order():
    sink = FlakySink(down_for=6)
    sender = ReportSender(sink, depth=64, backoff_initial_ms=1, backoff_max_ms=4)
    for i in range(3):
        sender.submit(b"r%d" % i)
    sender.start()
    sender.stop(drain_timeout=5)
    assert sink.received == [b"r0", b"r1", b"r2"]
    assert sender.stats.delivered == 3 and sender.pending() == 0


def test_sender_overflow_drops_oldest(caplog):
    sender = ReportSender(FlakySink(0), depth=3)
    for i in range(5):
        sender.submit(b"r%d" % i)
    assert sender.stats.dropped == 2
    assert list(sender._queue) == [b"r2", b"r3", b"r4"]
    assert "gap" in caplog.text


def test_sender_does_not_retry_rejections():
    class Rejecting:
        calls = 0

        def send_report(self, envelope):
            self.calls += 1
            return False, "DuplicateNonce: seen"
    sink = Rejecting()
    sender = ReportSender(sink)
    sender.submit(b"x")
    sender.start()
    sender.stop()
    assert sink.calls == 1 and sender.stats.rejected == 1


def test_sender_stop_gives_up_after_timeout():
    sender = ReportSender(FlakySink(down_for=10**9), backoff_initial_ms=5, backoff_max_ms=10)
    sender.submit(b"x")
    sender.start()
    t0 = time.monotonic()
    sender.stop(drain_timeout=0.2)
    assert time.monotonic() - t0 < 2 and sender.pending() == 1


# -- full loop with threads -------------------------------------------------

def loop_config(fx, **kw):
    return AgentConfig(datastore=fx.datastore, manifest=fx.manifest_path, period_ms=300, platform_id=PID, **kw)


def run_in_thread(cfg, backend, sink=None):
    stop = threading.Event()
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("s", run_loop(cfg, stop, backend=backend, sink=sink)))
    t.start()
    return stop, t, box


def test_loop_idle_emits_once(fx, backend):
    cfg = loop_config(fx)
    stop, t, box = run_in_thread(cfg, backend)
    time.sleep(1.5)
    stop.set()
    t.join()
    assert len(box["s"].reports) == 1


def test_loop_writes_produce_reports_in_order(fx, backend):
    sink = FlakySink(down_for=0)
    cfg = loop_config(fx)
    stop, t, box = run_in_thread(cfg, backend, sink)
    time.sleep(0.2)
    target = fx.datastore / "startup-config.xml"
    for i in range(4):
        target.write_bytes(b"<cfg>%d</cfg>" % i)
        time.sleep(0.35)
    stop.set()
    t.join()
    summary = box["s"]
    assert len(summary.reports) == 5
    stamps = [decode_report(r).timestamp for r in sink.received]
    assert len(stamps) == 5 and stamps == sorted(set(stamps))


def test_config_rejects_bad_period(fx):
    with pytest.raises(ValueError):
        loop_config(fx).__class__(datastore=fx.datastore, manifest=fx.manifest_path, period_ms=0)
