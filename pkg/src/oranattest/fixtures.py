"""Deterministic O-RU style datastore fixtures and tampering helpers."""

from __future__ import annotations

import json
import os
import random
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import OranAttestError
from .evidence import (
    Category,
    Disclosure,
    EvidenceManifest,
    FileSource,
    ManifestEntry,
    SubtreeSource,
    load_datastore,
    collect,
)

MACSEC_ID = "fronthaul/macsec"
CLOCK_CLASS_ID = "sync/clock-class"

# (file name, evidence id, category) for the first fixture files; names follow
# common O-RAN YANG module and datastore names.
NAMED_FILES = [
    ("startup-config.xml", "config/startup", Category.StartupBaseline),
    ("running-config.xml", "config/running", Category.RuntimeConfig),
    ("ietf-netconf-acm.yang", "access/netconf-acm", Category.AccessControl),
    ("o-ran-sync.yang", "sync/o-ran-sync-model", Category.YangModuleIntegrity),
    ("o-ran-interfaces.yang", "fronthaul/o-ran-interfaces-model", Category.YangModuleIntegrity),
    ("o-ran-usermgmt.yang", "access/usermgmt", Category.AccessControl),
    ("ietf-hardware.yang", "hardware/ietf-hardware", Category.RfCapabilities),
    ("o-ran-interfaces.xml", "fronthaul/interfaces", Category.FronthaulSecurity),
    ("o-ran-sync.xml", "sync/ptp-config", Category.SyncParams),
]

_GENERIC = [
    ("o-ran-performance-management", Category.KpmTelemetry),
    ("o-ran-kpm-subscription", Category.KpmSubscription),
    ("o-ran-uplane-conf", Category.RuntimeConfig),
    ("o-ran-software-management", Category.FirmwareVersion),
    ("o-ran-module-cap", Category.RfCapabilities),
    ("o-ran-supervision", Category.RuntimeConfig),
    ("o-ran-fan", Category.RuntimeConfig),
]


@dataclass
class Fixture:
    root: Path
    datastore: Path
    manifest_path: Path
    expectations_path: Path
    policy_path: Path
    manifest: EvidenceManifest


def _hexword(rng: random.Random, n: int) -> str:
    return "".join(rng.choice("0123456789abcdef") for _ in range(n))


def _mac(rng: random.Random) -> str:
    return ":".join(_hexword(rng, 2) for _ in range(6))


def _startup_config(rng: random.Random) -> str:
    carriers = "".join(
        f"""    <tx-array-carrier>
      <name>txarray{i}</name>
      <absolute-frequency-center>{rng.randrange(620000, 680000)}</absolute-frequency-center>
      <channel-bandwidth>{rng.choice([20000000, 40000000, 100000000])}</channel-bandwidth>
      <active>ACTIVE</active>
      <gain>{rng.uniform(-10, 10):.1f}</gain>
    </tx-array-carrier>
"""
        for i in range(3)
    )
    return f"""<?xml version="1.0" encoding="UTF-8"?>
<config xmlns="urn:ietf:params:xml:ns:netconf:base:1.0">
  <user-plane-configuration xmlns="urn:o-ran:uplane-conf:1.0">
{carriers}  </user-plane-configuration>
  <supervision xmlns="urn:o-ran:supervision:1.0">
    <cu-plane-monitoring>
      <configured-cu-monitoring-interval>{rng.choice([160, 300, 500])}</configured-cu-monitoring-interval>
    </cu-plane-monitoring>
  </supervision>
  <software-inventory xmlns="urn:o-ran:software-management:1.0">
    <build-version>{rng.randrange(1, 9)}.{rng.randrange(0, 20)}.{rng.randrange(0, 99)}</build-version>
  </software-inventory>
</config>
"""


def _yang_module(rng: random.Random, name: str) -> str:
    leaves = "".join(
        f"""    leaf {name.split('-')[-1]}-param-{i} {{
      type uint{rng.choice([8, 16, 32])};
      default {rng.randrange(0, 255)};
      description "Parameter {i} of {name}.";
    }}
"""
        for i in range(rng.randrange(3, 7))
    )
    return f"""module {name} {{
  yang-version 1.1;
  namespace "urn:o-ran:{name}:1.0";
  prefix "{name}";

  revision "20{rng.randrange(19, 25)}-{rng.randrange(1, 13):02d}-{rng.randrange(1, 29):02d}" {{
    description "Fixture revision {_hexword(rng, 8)}.";
  }}

  container {name}-config {{
{leaves}  }}
}}
"""


def _interfaces_xml(rng: random.Random) -> str:
    ifaces = "".join(
        f"""  <interface>
    <name>eth{i}</name>
    <type xmlns:ianaift="urn:ietf:params:xml:ns:yang:iana-if-type">ianaift:ethernetCsmacd</type>
    <o-ran-int:mac-address>{_mac(rng)}</o-ran-int:mac-address>
    <o-ran-int:vlan-tagging>{rng.choice(['true', 'false'])}</o-ran-int:vlan-tagging>
"""
        + (
            """    <macsec>
      <macsec-enabled>true</macsec-enabled>
      <cipher-suite>GCM-AES-256</cipher-suite>
    </macsec>
"""
            if i == 0
            else ""
        )
        + "  </interface>\n"
        for i in range(2)
    )
    return f"""<?xml version="1.0" encoding="UTF-8"?>
<interfaces xmlns="urn:ietf:params:xml:ns:yang:ietf-interfaces" xmlns:o-ran-int="urn:o-ran:interfaces:1.0">
{ifaces}</interfaces>
"""


def _sync_xml(rng: random.Random) -> str:
    return f"""<?xml version="1.0" encoding="UTF-8"?>
<sync xmlns="urn:o-ran:sync:1.0">
  <ptp-config>
    <domain-number>{rng.choice([24, 25, 44])}</domain-number>
    <clock-class>{rng.choice([6, 7])}</clock-class>
    <accepted-clock-classes>
      <clock-classes>6</clock-classes>
      <clock-classes>7</clock-classes>
    </accepted-clock-classes>
    <ptp-profile>G_8275_1</ptp-profile>
    <delay-asymmetry>{rng.randrange(-100, 100)}</delay-asymmetry>
  </ptp-config>
  <sync-status>
    <sync-state>LOCKED</sync-state>
  </sync-status>
</sync>
"""


def _generic_xml(rng: random.Random, module: str, k: int) -> str:
    rows = "".join(
        f"""    <entry>
      <id>{j}</id>
      <value>{rng.randrange(0, 1 << 16)}</value>
      <label>{_hexword(rng, 12)}</label>
    </entry>
"""
        for j in range(rng.randrange(4, 10))
    )
    return f"""<?xml version="1.0" encoding="UTF-8"?>
<{module} xmlns="urn:o-ran:{module}:1.0">
  <instance>{k}</instance>
  <table>
{rows}  </table>
</{module}>
"""


def fixture_files(n_items: int, seed: int = 0) -> list[tuple[str, str, Category, bytes]]:
    """Return ``(file name, evidence id, category, content)`` for ``n_items`` files."""
    if not 1 <= n_items <= 65536:
        raise ValueError("n_items must be in [1, 65536]")
    rng = random.Random(seed)
    out = []
    startup = None
    for i in range(n_items):
        if i < len(NAMED_FILES):
            name, ident, cat = NAMED_FILES[i]
            if name == "startup-config.xml":
                startup = _startup_config(rng)
                text = startup
            elif name == "running-config.xml":
                # running starts identical to the startup baseline
                text = startup if startup is not None else _startup_config(rng)
            elif name.endswith(".yang"):
                text = _yang_module(rng, name[: -len(".yang")])
            elif name == "o-ran-interfaces.xml":
                text = _interfaces_xml(rng)
            else:
                text = _sync_xml(rng)
        else:
            module, cat = _GENERIC[i % len(_GENERIC)]
            name = f"{module}-{i:03d}.xml"
            ident = f"{cat.value.lower()}/{module}-{i:03d}"
            text = _generic_xml(rng, module, i)
        out.append((name, ident, cat, text.encode("utf-8")))
    return out


def fixture_manifest(files: list[tuple[str, str, Category, bytes]]) -> EvidenceManifest:
    entries = [ManifestEntry(ident, cat, Disclosure.STATIC, FileSource(name)) for name, ident, cat, _ in files]
    names = {f[0] for f in files}
    if "o-ran-interfaces.xml" in names:
        entries.append(
            ManifestEntry(MACSEC_ID, Category.FronthaulSecurity, Disclosure.DYNAMIC,
                          SubtreeSource("o-ran-interfaces.xml", "//macsec/macsec-enabled"))
        )
    if "o-ran-sync.xml" in names:
        entries.append(
            ManifestEntry(CLOCK_CLASS_ID, Category.SyncParams, Disclosure.DYNAMIC,
                          SubtreeSource("o-ran-sync.xml", "//ptp-config/clock-class"))
        )
    return EvidenceManifest(entries)


def default_policy(manifest: EvidenceManifest, expectations: dict[str, str]) -> dict:
    ids = set(manifest.ids)
    rules = []
    if MACSEC_ID in ids:
        rules.append({"id": MACSEC_ID, "plaintext_equals": "true"})
    if CLOCK_CLASS_ID in ids:
        rules.append({"id": CLOCK_CLASS_ID, "plaintext_matches": "[67]"})
    if {"config/running", "config/startup"} <= ids:
        rules.append({"id": "config/running", "must_match_baseline": "config/startup"})
    for ident in ("access/netconf-acm", "access/usermgmt", "hardware/ietf-hardware", "sync/o-ran-sync-model"):
        if ident in expectations:
            rules.append({"id": ident, "expected_hash": expectations[ident]})
    return {"rules": rules}


def generate_fixture(out_dir: str | os.PathLike, n_items: int, seed: int = 0) -> Fixture:
    """Write ``datastore/``, ``manifest.txt``, ``expectations.json`` and ``policy.json``."""
    root = Path(out_dir)
    ds = root / "datastore"
    ds.mkdir(parents=True, exist_ok=True)
    files = fixture_files(n_items, seed)
    for name, _, _, content in files:
        (ds / name).write_bytes(content)
    manifest = fixture_manifest(files)
    manifest_path = root / "manifest.txt"
    manifest_path.write_text(manifest.dumps(), encoding="utf-8")

    evidence = collect(manifest, load_datastore(ds))
    expectations = {it.id: it.digest.hex() for it in evidence if it.disclosure is Disclosure.STATIC}
    expectations_path = root / "expectations.json"
    expectations_path.write_text(json.dumps(expectations, indent=2, sort_keys=True) + "\n")
    policy_path = root / "policy.json"
    policy_path.write_text(json.dumps(default_policy(manifest, expectations), indent=2) + "\n")
    return Fixture(root, ds, manifest_path, expectations_path, policy_path, manifest)


class TamperError(OranAttestError):
    pass


def _target_path(datastore: Path, file: str) -> Path:
    root = datastore.resolve()
    path = (root / file).resolve()
    if root not in path.parents or not path.is_file():
        raise TamperError(f"no such datastore file: {file}")
    return path


def _write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".tamper-{path.name}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def resolve_target(manifest: EvidenceManifest, evidence_id: str) -> tuple[str, str | None]:
    """Map an evidence id to ``(file, selector or None)``."""
    for entry in manifest.entries:
        if entry.id == evidence_id:
            src = entry.source
            if isinstance(src, FileSource):
                return src.path, None
            if isinstance(src, SubtreeSource):
                return src.file, src.selector
            raise TamperError(f"{evidence_id} is a runtime field, not a datastore file")
    raise TamperError(f"unknown evidence id {evidence_id!r}")


def flip_byte(datastore: str | os.PathLike, file: str, offset: int | None = None,
              rng: random.Random | None = None) -> dict:
    path = _target_path(Path(datastore), file)
    data = bytearray(path.read_bytes())
    if not data:
        raise TamperError(f"{file} is empty")
    if offset is None:
        offset = (rng or random.Random()).randrange(len(data))
    if not 0 <= offset < len(data):
        raise TamperError(f"offset {offset} outside {file} ({len(data)} bytes)")
    old = data[offset]
    data[offset] ^= 0x01
    _write(path, bytes(data))
    return {"mutation": "flip-byte", "file": file, "offset": offset, "old": old, "new": data[offset]}


def set_value(datastore: str | os.PathLike, file: str, selector: str, value: str) -> dict:
    """Rewrite the text of the first element named by the selector's last step.

    Only the element text changes; every other byte of the file is preserved.
    """
    path = _target_path(Path(datastore), file)
    data = path.read_bytes()
    name = selector.rstrip("/").rsplit("/", 1)[-1]
    pattern = re.compile(
        rb"<((?:[\w.-]+:)?" + re.escape(name.encode()) + rb")(\s[^>]*)?>([^<]*)</\1\s*>"
    )
    m = pattern.search(data)
    if m is None:
        raise TamperError(f"element {name!r} not found in {file}")
    new = data[: m.start(3)] + value.encode("utf-8") + data[m.end(3):]
    if new != data:
        _write(path, new)
    return {
        "mutation": "set-value",
        "file": file,
        "selector": selector,
        "offset": m.start(3),
        "old": m.group(3).decode("utf-8"),
        "new": value,
    }

