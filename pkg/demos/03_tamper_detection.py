"""Attest a 50-file datastore, tamper with one file, and locate the change.

Run: python demos/03_tamper_detection.py
"""

import tempfile

from oranattest import Mode, SoftwareKeyBackend, TrustStore, collect, compute_config_hash, make_report
from oranattest.evidence import load_datastore
from oranattest.fixtures import flip_byte, generate_fixture
from oranattest.verifier import load_expectations, verify_full

with tempfile.TemporaryDirectory() as tmp:
    fx = generate_fixture(tmp, 50, seed=0)
    backend = SoftwareKeyBackend.generate()
    platform = bytes.fromhex("33" * 32)
    trust = TrustStore()
    trust.add(platform, backend.public_key())
    expectations = load_expectations(fx.expectations_path)

    def attest():
        evidence = collect(fx.manifest, load_datastore(fx.datastore))
        return make_report(compute_config_hash(evidence), evidence, backend, platform, mode=Mode.MANIFEST)

    print("before tampering:")
    print(verify_full(attest(), expectations, trust).summary())

    change = flip_byte(fx.datastore, "ietf-netconf-acm.yang", offset=42)
    print(f"\nflipped byte {change['offset']} of {change['file']} ({change['old']:#04x} -> {change['new']:#04x})\n")

    print("after tampering, the reporter attests honestly and the tenant compares:")
    print(verify_full(attest(), expectations, trust).summary())
