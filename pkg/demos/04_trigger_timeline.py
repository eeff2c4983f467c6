"""Drive the trigger logic over a scripted timeline and print when reports go out.

A report is emitted on a change event or once the period has elapsed, but
only if the configuration hash differs from the last attested one.

Run: python demos/04_trigger_timeline.py
"""

import tempfile

from oranattest import SoftwareKeyBackend
from oranattest.agent import TrustedReporter
from oranattest.evidence import load_datastore
from oranattest.fixtures import generate_fixture

PERIOD_MS, TICK_MS = 300, 30
writes = {
    150: ("startup-config.xml", b"<config>v1</config>\n"),
    900: ("startup-config.xml", b"<config>v1</config>\n"),   # same bytes: no report
    1200: ("running-config.xml", b"<config>v1</config>\n"),
    1230: ("running-config.xml", b"<config>v2</config>\n"),
}

with tempfile.TemporaryDirectory() as tmp:
    fx = generate_fixture(tmp, 12, seed=0)
    snapshot = load_datastore(fx.datastore)
    reporter = TrustedReporter(snapshot, fx.manifest, SoftwareKeyBackend.generate(), bytes(32), period_ms=PERIOD_MS)
    for now in range(0, 2001, TICK_MS):
        event = None
        for t in range(now - TICK_MS + 1, now + 1):
            if t in writes:
                name, content = writes[t]
                event = snapshot.apply_update(name, content)
                print(f"t={t:>4} ms  write {name}")
        report = reporter.tick(now, event)
        if report is not None:
            cause = "event" if event else "periodic"
            print(f"t={now:>4} ms  REPORT ({cause}) root={report.merkle_root.hex()[:16]}...")
    print(f"hash computations: {reporter.hash_computations} over {2000 // TICK_MS + 1} ticks")
