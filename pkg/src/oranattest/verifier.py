"""Tenant-side checks on attestation reports.

Three entry points share one result type:

``verify_full``
    Rebuilds the root from evidence the tenant holds and compares it with the
    signed root. With a Manifest-mode report, mismatching ids are reported
    individually.
``verify_field``
    Validates one item. It uses either the report's leaf manifest or an
    inclusion proof handed out by the reporter.
``check_policy``
    Evaluates a list of tenant rules.

Plaintext is only trusted after it hashes to a digest that is committed under
the signed root. A rule can never pass on bytes the signature does not cover.
"""

from __future__ import annotations

import datetime
import fnmatch
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

from . import merkle
from .attestation import AttestationReport, FieldDisclosure, TrustStore, verify_report_signature
from .errors import IncompleteEvidence, ManifestError, UnknownEvidenceId
from .evidence import Disclosure, EvidenceSet


def _sort_key(ident: str) -> bytes:
    return ident.encode("utf-8")


# --------------------------------------------------------------------------
# policy rules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpectedHash:
    digest: bytes
    name = "expected_hash"

    def describe(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class PlaintextEquals:
    value: bytes
    name = "plaintext_equals"

    def describe(self) -> str:
        return self.value.decode("utf-8", "replace")


@dataclass(frozen=True)
class PlaintextMatches:
    pattern: str
    name = "plaintext_matches"

    def describe(self) -> str:
        return self.pattern


@dataclass(frozen=True)
class MustMatchBaseline:
    baseline_id: str
    name = "must_match_baseline"

    def describe(self) -> str:
        return f"same bytes as {self.baseline_id}"


Check = Union[ExpectedHash, PlaintextEquals, PlaintextMatches, MustMatchBaseline]


@dataclass(frozen=True)
class Rule:
    evidence_id: str
    check: Check

    def to_json(self) -> dict:
        c = self.check
        value = {
            ExpectedHash: lambda: c.digest.hex(),
            PlaintextEquals: lambda: c.value.decode("utf-8"),
            PlaintextMatches: lambda: c.pattern,
            MustMatchBaseline: lambda: c.baseline_id,
        }[type(c)]()
        return {"id": self.evidence_id, c.name: value}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Rule":
        if not isinstance(obj, Mapping) or "id" not in obj:
            raise ValueError(f"rule needs an 'id': {obj!r}")
        kinds = [k for k in obj if k != "id"]
        if len(kinds) != 1:
            raise ValueError(f"rule for {obj['id']!r} must have exactly one check, got {kinds}")
        kind, value = kinds[0], obj[kinds[0]]
        if kind == "expected_hash":
            check: Check = ExpectedHash(bytes.fromhex(value))
            if len(check.digest) != 32:
                raise ValueError(f"expected_hash for {obj['id']!r} is not 32 bytes")
        elif kind == "plaintext_equals":
            check = PlaintextEquals(value.encode("utf-8"))
        elif kind == "plaintext_matches":
            check = PlaintextMatches(str(value))
        elif kind == "must_match_baseline":
            check = MustMatchBaseline(str(value))
        else:
            raise ValueError(f"unknown check {kind!r}")
        return cls(str(obj["id"]), check)


@dataclass
class TenantPolicy:
    rules: list[Rule] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rules": [r.to_json() for r in self.rules]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TenantPolicy":
        return cls([Rule.from_json(r) for r in obj.get("rules", [])])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TenantPolicy":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def load_expectations(path: str | os.PathLike) -> dict[str, bytes]:
    """Read an ``{id: hex digest}`` file."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for ident, value in raw.items():
        digest = bytes.fromhex(value)
        if len(digest) != 32:
            raise ValueError(f"expectation for {ident!r} is not a 32-byte digest")
        out[ident] = digest
    return out


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

UNRESOLVABLE = "Unresolvable"


@dataclass(frozen=True)
class Violation:
    evidence_id: str
    rule: str
    observed: str
    expected: str
    reason: str = "mismatch"

    def to_json(self) -> dict:
        return {"evidence_id": self.evidence_id, "rule": self.rule, "observed": self.observed,
                "expected": self.expected, "reason": self.reason}


@dataclass
class VerificationResult:
    signature_ok: bool
    platform_ok: bool
    root_ok: bool
    freshness_note: str = ""
    violations: list[Violation] = field(default_factory=list)

    @property
    def compliant(self) -> bool:
        return self.signature_ok and self.platform_ok and self.root_ok and not self.violations

    @property
    def violating_ids(self) -> set[str]:
        return {v.evidence_id for v in self.violations}

    def to_json(self) -> dict:
        return {
            "compliant": self.compliant,
            "signature_ok": self.signature_ok,
            "platform_ok": self.platform_ok,
            "root_ok": self.root_ok,
            "freshness_note": self.freshness_note,
            "violations": [v.to_json() for v in self.violations],
        }

    def summary(self) -> str:
        lines = [
            f"verdict:    {'COMPLIANT' if self.compliant else 'NON-COMPLIANT'}",
            f"signature:  {'ok' if self.signature_ok else 'INVALID'}",
            f"platform:   {'trusted' if self.platform_ok else 'UNKNOWN'}",
            f"root:       {'ok' if self.root_ok else 'MISMATCH'}",
            f"freshness:  {self.freshness_note}",
        ]
        for v in self.violations:
            lines.append(f"violation:  {v.evidence_id} [{v.rule}/{v.reason}] "
                         f"observed={v.observed!r} expected={v.expected!r}")
        return "\n".join(lines)


def _iso(ms: int) -> str:
    try:
        return datetime.datetime.fromtimestamp(ms / 1000, datetime.timezone.utc).isoformat(timespec="milliseconds")
    except (OverflowError, ValueError, OSError):
        return f"{ms} ms since epoch"


def freshness_note(report: AttestationReport, received_at: int | None = None) -> str:
    note = f"reported at {_iso(report.timestamp)}"
    if received_at is not None:
        note += f", recorded by hub at {_iso(received_at)} ({received_at - report.timestamp:+d} ms)"
    else:
        note += ", no hub receipt"
    return note + "; replay rules are enforced by the hub"


def _authenticate(report: AttestationReport, trust: TrustStore,
                  expected_platform: bytes | None) -> tuple[bool, bool]:
    key = trust.get(report.platform_id)
    platform_ok = key is not None and (expected_platform is None or expected_platform == report.platform_id)
    if key is None:
        return False, False
    return verify_report_signature(report, key, report.platform_id), platform_ok


# --------------------------------------------------------------------------
# committed view of items
# --------------------------------------------------------------------------

@dataclass
class _Item:
    digest: bytes
    plaintext: bytes | None


def _committed_plaintexts(report: AttestationReport, digests: Mapping[str, bytes],
                          violations: list[Violation]) -> dict[str, bytes]:
    """Dynamic plaintext entries that hash to their committed digest."""
    disclosures = {e.id: e.disclosure for e in report.leaf_manifest or ()}
    good = {}
    for ident, plain in sorted((report.dynamic_plaintext or {}).items()):
        if ident not in digests or disclosures.get(ident) is not Disclosure.DYNAMIC:
            violations.append(Violation(ident, "plaintext_hash", "plaintext for non-dynamic or unknown item",
                                        "dynamic items only"))
            continue
        observed = merkle.sha256(plain)
        if observed != digests[ident]:
            violations.append(Violation(ident, "plaintext_hash", observed.hex(), digests[ident].hex()))
            continue
        good[ident] = plain
    return good


EvidenceSource = Union[EvidenceSet, Mapping[str, bytes], Sequence[bytes], None]


def _full_view(report: AttestationReport, source: EvidenceSource,
               violations: list[Violation]) -> tuple[bool, dict[str, _Item] | None]:
    """Recompute the root from ``source``; return ``(root_ok, committed items)``."""
    manifest = report.manifest_digests() if report.leaf_manifest is not None else None

    if source is None:
        if manifest is None:
            raise ManifestError("a Compact report needs tenant-held evidence or an inclusion proof")
        ids = sorted(manifest, key=_sort_key)
        root_ok = merkle.merkle_root([manifest[i] for i in ids]) == report.merkle_root
        plain = _committed_plaintexts(report, manifest, violations)
        return root_ok, {i: _Item(manifest[i], plain.get(i)) for i in ids}

    if isinstance(source, EvidenceSet):
        ids = source.ids
        held = {it.id: _Item(it.digest, it.payload) for it in source}
        if manifest is not None:
            for ident in sorted(set(manifest) - set(ids), key=_sort_key):
                violations.append(Violation(ident, "presence", "present in report", "absent from tenant evidence"))
            for ident in sorted(set(ids) - set(manifest), key=_sort_key):
                violations.append(Violation(ident, "presence", "absent from report", "present"))
    elif isinstance(source, Mapping):
        held_digests = {k: bytes.fromhex(v) if isinstance(v, str) else bytes(v) for k, v in source.items()}
        if manifest is not None:
            for ident in held_digests:
                if ident not in manifest:
                    violations.append(Violation(ident, "presence", "absent from report", "present"))
            dynamic = {e.id for e in report.leaf_manifest if e.disclosure is Disclosure.DYNAMIC}
            for ident in manifest:
                if ident not in held_digests:
                    if ident not in dynamic:
                        raise IncompleteEvidence(ident)
                    held_digests[ident] = manifest[ident]
            ids = sorted(manifest, key=_sort_key)
        else:
            ids = sorted(held_digests, key=_sort_key)
        held = {i: _Item(held_digests[i], None) for i in held_digests}
    else:
        digests = [bytes(d) for d in source]
        if manifest is not None and len(digests) != len(manifest):
            raise IncompleteEvidence(f"{len(manifest)} leaves in report, {len(digests)} supplied")
        if not digests:
            raise IncompleteEvidence("no leaf digests supplied")
        root_ok = merkle.merkle_root(digests) == report.merkle_root
        return root_ok, None

    if not ids:
        raise IncompleteEvidence("no evidence supplied")
    root_ok = merkle.merkle_root([held[i].digest for i in ids]) == report.merkle_root

    if manifest is not None:
        for ident in sorted(set(ids) & set(manifest), key=_sort_key):
            if held[ident].digest != manifest[ident]:
                violations.append(Violation(ident, "leaf_digest", manifest[ident].hex(), held[ident].digest.hex()))
        plain = _committed_plaintexts(report, manifest, violations)
        for ident, p in plain.items():
            if ident in held and held[ident].plaintext is None and held[ident].digest == manifest[ident]:
                held[ident] = _Item(held[ident].digest, p)
    return root_ok, {i: held[i] for i in ids}


# --------------------------------------------------------------------------
# rule evaluation
# --------------------------------------------------------------------------

def _text(data: bytes) -> str:
    return data.decode("utf-8", "replace")


def _evaluate(rule: Rule, items: Mapping[str, _Item] | None) -> Violation | None:
    c = rule.check
    ident = rule.evidence_id
    item = (items or {}).get(ident)
    if item is None:
        return Violation(ident, c.name, "not committed in report", c.describe(), UNRESOLVABLE)
    if isinstance(c, ExpectedHash):
        if item.digest != c.digest:
            return Violation(ident, c.name, item.digest.hex(), c.digest.hex())
        return None
    if isinstance(c, MustMatchBaseline):
        base = (items or {}).get(c.baseline_id)
        if base is None:
            return Violation(ident, c.name, "baseline not committed", c.describe(), UNRESOLVABLE)
        if item.digest != base.digest:
            return Violation(ident, c.name, item.digest.hex(), base.digest.hex())
        return None
    if item.plaintext is None:
        return Violation(ident, c.name, "no committed plaintext", c.describe(), UNRESOLVABLE)
    if isinstance(c, PlaintextEquals):
        if item.plaintext != c.value:
            return Violation(ident, c.name, _text(item.plaintext), c.describe())
        return None
    if not fnmatch.fnmatchcase(_text(item.plaintext), c.pattern):
        return Violation(ident, c.name, _text(item.plaintext), c.pattern)
    return None


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def verify_full(
    report: AttestationReport,
    evidence_source: EvidenceSource,
    trust: TrustStore,
    *,
    expected_platform: bytes | None = None,
    received_at: int | None = None,
) -> VerificationResult:
    signature_ok, platform_ok = _authenticate(report, trust, expected_platform)
    violations: list[Violation] = []
    root_ok, _ = _full_view(report, evidence_source, violations)
    return VerificationResult(signature_ok, platform_ok, root_ok, freshness_note(report, received_at), violations)


Disclosures = Union[FieldDisclosure, Mapping[str, FieldDisclosure], None]


def _proof_view(report: AttestationReport, disclosures: Mapping[str, FieldDisclosure],
                violations: list[Violation]) -> tuple[bool, dict[str, _Item]]:
    root_ok = True
    items = {}
    for ident, d in disclosures.items():
        if d.id != ident:
            raise ValueError(f"disclosure for {d.id!r} filed under {ident!r}")
        if not merkle.verify_proof(report.merkle_root, d.leaf_digest, d.proof):
            root_ok = False
            violations.append(Violation(ident, "inclusion_proof", "proof does not reach signed root", "valid proof"))
            continue
        plain = None
        if d.plaintext is not None:
            if merkle.sha256(d.plaintext) != d.leaf_digest:
                violations.append(Violation(ident, "plaintext_hash", merkle.sha256(d.plaintext).hex(),
                                            d.leaf_digest.hex()))
            else:
                plain = d.plaintext
        items[ident] = _Item(d.leaf_digest, plain)
    return root_ok, items


def _as_disclosure_map(disclosures: Disclosures) -> dict[str, FieldDisclosure] | None:
    if disclosures is None:
        return None
    if isinstance(disclosures, FieldDisclosure):
        return {disclosures.id: disclosures}
    return dict(disclosures)


def verify_field(
    report: AttestationReport,
    evidence_id: str,
    expected: Check,
    trust: TrustStore,
    disclosures: Disclosures = None,
    *,
    expected_platform: bytes | None = None,
    received_at: int | None = None,
) -> VerificationResult:
    """Check one item.

    Without ``disclosures`` the report must carry a leaf manifest. With them,
    each disclosure's inclusion proof is checked against the signed root.
    A baseline rule needs a disclosure for the baseline id too.
    """
    signature_ok, platform_ok = _authenticate(report, trust, expected_platform)
    violations: list[Violation] = []
    dmap = _as_disclosure_map(disclosures)
    if dmap is None:
        if report.leaf_manifest is None:
            raise ManifestError("field verification of a Compact report needs an inclusion proof")
        if evidence_id not in report.manifest_digests():
            raise UnknownEvidenceId(evidence_id)
        root_ok, items = _full_view(report, None, violations)
    else:
        if evidence_id not in dmap:
            raise UnknownEvidenceId(evidence_id)
        root_ok, items = _proof_view(report, dmap, violations)
    # Envelope problems on unrelated items do not concern this check.
    violations = [v for v in violations if v.evidence_id == evidence_id]
    v = _evaluate(Rule(evidence_id, expected), items)
    if v is not None:
        violations.append(v)
    return VerificationResult(signature_ok, platform_ok, root_ok, freshness_note(report, received_at), violations)


def check_policy(
    report: AttestationReport,
    policy: TenantPolicy,
    trust: TrustStore,
    evidence_source: EvidenceSource = None,
    disclosures: Disclosures = None,
    *,
    expected_platform: bytes | None = None,
    received_at: int | None = None,
) -> VerificationResult:
    """Evaluate every rule; rules that cannot be resolved count as violations."""
    signature_ok, platform_ok = _authenticate(report, trust, expected_platform)
    violations: list[Violation] = []
    dmap = _as_disclosure_map(disclosures)
    if dmap is not None and evidence_source is None:
        root_ok, items = _proof_view(report, dmap, violations)
    elif evidence_source is None and report.leaf_manifest is None:
        # nothing to recompute the root from; every rule ends up unresolvable
        root_ok, items = False, None
    else:
        root_ok, items = _full_view(report, evidence_source, violations)
    for rule in policy.rules:
        v = _evaluate(rule, items)
        if v is not None:
            violations.append(v)
    return VerificationResult(signature_ok, platform_ok, root_ok, freshness_note(report, received_at), violations)


__all__ = [
    "Check", "ExpectedHash", "MustMatchBaseline", "PlaintextEquals", "PlaintextMatches", "Rule", "TenantPolicy",
    "VerificationResult", "Violation", "check_policy", "freshness_note", "load_expectations", "verify_field",
    "verify_full",
]
