"""Sign a report over a small evidence set and show what breaks verification.

Run: python demos/02_signed_report.py
"""

import dataclasses

from oranattest import (
    Category, Disclosure, EvidenceItem, EvidenceSet, Mode, SoftwareKeyBackend, compute_config_hash,
    decode_report, encode_report, make_report, verify_report_signature,
)
from oranattest.evidence import RuntimeSource

items = [
    EvidenceItem("fronthaul/macsec", Category.FronthaulSecurity, Disclosure.DYNAMIC, b"true", RuntimeSource("m")),
    EvidenceItem("sync/clock-class", Category.SyncParams, Disclosure.DYNAMIC, b"6", RuntimeSource("c")),
    EvidenceItem("config/startup", Category.StartupBaseline, Disclosure.STATIC, b"<config/>", RuntimeSource("s")),
]
evidence = EvidenceSet(items)
backend = SoftwareKeyBackend.generate()
platform = bytes.fromhex("11" * 32)
root = compute_config_hash(evidence)

for mode in Mode:
    envelope = encode_report(make_report(root, evidence, backend, platform, mode=mode))
    print(f"{mode.value:>8} envelope: {len(envelope)} bytes")

report = decode_report(envelope)
print("\nplaintext shipped for dynamic items only:", sorted(report.dynamic_plaintext))
print("signature valid:", verify_report_signature(report, backend.public_key(), platform))

print("\nchanging any signed field breaks the signature:")
for name, value in [("merkle_root", bytes(32)), ("timestamp", report.timestamp + 1),
                    ("nonce", bytes(16)), ("platform_id", bytes(32))]:
    forged = dataclasses.replace(report, **{name: value})
    print(f"  {name:<12} -> valid={verify_report_signature(forged, backend.public_key(), forged.platform_id)}")
print("claiming a different platform:",
      verify_report_signature(report, backend.public_key(), bytes.fromhex("22" * 32)))
