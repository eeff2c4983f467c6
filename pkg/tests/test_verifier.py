import base64
import dataclasses
import json
import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from oranattest import merkle
from oranattest.attestation import (
    Mode, SoftwareKeyBackend, TrustStore, decode_report, encode_report, make_disclosure, make_report, report_to_json,
)
from oranattest.errors import IncompleteEvidence, ManifestError, UnknownEvidenceId
from oranattest.evidence import (
    Category, Disclosure, EvidenceItem, EvidenceSet, RuntimeSource, collect, compute_config_hash, load_datastore,
)
from oranattest.fixtures import CLOCK_CLASS_ID, MACSEC_ID, flip_byte, generate_fixture, set_value
from oranattest.verifier import (
    ExpectedHash, MustMatchBaseline, PlaintextEquals, PlaintextMatches, Rule, TenantPolicy, check_policy,
    load_expectations, verify_field, verify_full,
)

from conftest import H

PID = H(b"verifier-test")
T0 = 1_750_000_000_000


@pytest.fixture(scope="module")
def backend(rsa_key):
    return SoftwareKeyBackend(rsa_key)


@pytest.fixture(scope="module")
def trust(backend):
    t = TrustStore()
    t.add(PID, backend.public_key())
    return t


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    return generate_fixture(tmp_path_factory.mktemp("fx"), 50, seed=7)


def attest(evidence, backend, mode=Mode.MANIFEST, ts=T0):
    return make_report(compute_config_hash(evidence), evidence, backend, PID, lambda: ts, mode)


def fixture_evidence(fx):
    return collect(fx.manifest, load_datastore(fx.datastore))


def test_untampered_pipeline_compliant(fx, backend, trust):
    ev = fixture_evidence(fx)
    for mode in Mode:
        r = decode_report(encode_report(attest(ev, backend, mode)))
        res = verify_full(r, ev, trust)
        assert res.compliant, res.summary()
    expectations = load_expectations(fx.expectations_path)
    res = verify_full(attest(ev, backend), expectations, trust)
    assert res.compliant
    assert verify_full(attest(ev, backend), None, trust).compliant
    assert verify_full(attest(ev, backend, Mode.COMPACT), ev.leaf_digests(), trust).compliant


def test_policy_over_compliant_fixture(fx, backend, trust):
    policy = TenantPolicy.load(fx.policy_path)
    assert len(policy.rules) == 7
    res = check_policy(attest(fixture_evidence(fx), backend), policy, trust)
    assert res.compliant and res.violations == []


def test_modified_file_detected_and_localized(fx, backend, trust, tmp_path):
    fx2 = generate_fixture(tmp_path / "fx", 50, seed=7)
    report = attest(fixture_evidence(fx2), backend)
    flip_byte(fx2.datastore, "startup-config.xml", offset=5)
    tenant_view = fixture_evidence(fx2)
    res = verify_full(report, tenant_view, trust)
    assert not res.root_ok and not res.compliant
    assert res.violating_ids == {"config/startup"}
    assert res.signature_ok and res.platform_ok


def test_honest_reattestation_against_expectations(fx, backend, trust, tmp_path):
    fx2 = generate_fixture(tmp_path / "fx", 50, seed=7)
    expectations = load_expectations(fx2.expectations_path)
    flip_byte(fx2.datastore, "ietf-hardware.yang", offset=10)
    res = verify_full(attest(fixture_evidence(fx2), backend), expectations, trust)
    assert not res.root_ok and res.violating_ids == {"hardware/ietf-hardware"}


def test_swapped_dynamic_plaintext(fx, backend, trust):
    report = attest(fixture_evidence(fx), backend)
    obj = report_to_json(report)
    dp = obj["dynamic_plaintext"]
    dp[MACSEC_ID], dp[CLOCK_CLASS_ID] = dp[CLOCK_CLASS_ID], dp[MACSEC_ID]
    swapped = decode_report(json.dumps(obj))
    res = verify_full(swapped, None, trust)
    assert res.root_ok and res.signature_ok
    assert res.violating_ids == {MACSEC_ID, CLOCK_CLASS_ID}
    assert {v.rule for v in res.violations} == {"plaintext_hash"}


def test_plaintext_for_static_item_rejected(fx, backend, trust):
    obj = report_to_json(attest(fixture_evidence(fx), backend))
    obj["dynamic_plaintext"]["config/startup"] = "AAAA"
    res = verify_full(decode_report(json.dumps(obj)), None, trust)
    assert res.violating_ids == {"config/startup"}


def test_untrusted_platform_and_bad_signature(fx, backend, trust):
    ev = fixture_evidence(fx)
    stranger = SoftwareKeyBackend.generate()
    r = make_report(compute_config_hash(ev), ev, stranger, PID, lambda: T0, Mode.MANIFEST)
    res = verify_full(r, ev, trust)
    assert not res.signature_ok and res.platform_ok and not res.compliant
    res = verify_full(attest(ev, backend), ev, TrustStore())
    assert not res.platform_ok and not res.signature_ok
    res = verify_full(attest(ev, backend), ev, trust, expected_platform=H(b"other"))
    assert not res.platform_ok


def test_incomplete_evidence(fx, backend, trust):
    ev = fixture_evidence(fx)
    report = attest(ev, backend)
    partial = {it.id: it.digest for it in ev if it.id != "config/startup"}
    with pytest.raises(IncompleteEvidence):
        verify_full(report, partial, trust)
    with pytest.raises(IncompleteEvidence):
        verify_full(report, ev.leaf_digests()[:-1], trust)
    with pytest.raises(ManifestError):
        verify_full(attest(ev, backend, Mode.COMPACT), None, trust)


def test_verify_field_macsec(fx, backend, trust, tmp_path):
    fx2 = generate_fixture(tmp_path / "fx", 50, seed=7)
    ok = verify_field(attest(fixture_evidence(fx2), backend), MACSEC_ID, PlaintextEquals(b"true"), trust)
    assert ok.compliant
    set_value(fx2.datastore, "o-ran-interfaces.xml", "//macsec/macsec-enabled", "false")
    res = verify_field(attest(fixture_evidence(fx2), backend), MACSEC_ID, PlaintextEquals(b"true"), trust)
    assert [(v.evidence_id, v.observed, v.expected) for v in res.violations] == [(MACSEC_ID, "false", "true")]
    assert res.root_ok and res.signature_ok


def test_verify_field_errors(fx, backend, trust):
    ev = fixture_evidence(fx)
    with pytest.raises(UnknownEvidenceId):
        verify_field(attest(ev, backend), "nope", PlaintextEquals(b"x"), trust)
    with pytest.raises(ManifestError):
        verify_field(attest(ev, backend, Mode.COMPACT), MACSEC_ID, PlaintextEquals(b"true"), trust)


def test_static_item_plaintext_rule_unresolvable(fx, backend, trust):
    res = verify_field(attest(fixture_evidence(fx), backend), "config/startup", PlaintextEquals(b"x"), trust)
    assert [v.reason for v in res.violations] == ["Unresolvable"]


def test_macsec_scenario_exactly_one_violation(backend, trust, tmp_path):
    fx2 = generate_fixture(tmp_path / "fx", 50, seed=7)
    policy = TenantPolicy.load(fx2.policy_path)
    set_value(fx2.datastore, "o-ran-interfaces.xml", "//macsec/macsec-enabled", "false")
    res = check_policy(attest(fixture_evidence(fx2), backend), policy, trust)
    assert res.signature_ok and res.root_ok
    assert [v.evidence_id for v in res.violations] == [MACSEC_ID]


def test_unresolvable_rules(fx, backend, trust):
    policy = TenantPolicy([Rule("ghost/item", ExpectedHash(bytes(32))),
                           Rule("config/running", MustMatchBaseline("ghost/base"))])
    res = check_policy(attest(fixture_evidence(fx), backend), policy, trust)
    assert [v.reason for v in res.violations] == ["Unresolvable", "Unresolvable"]
    res = check_policy(attest(fixture_evidence(fx), backend, Mode.COMPACT), TenantPolicy.load(fx.policy_path), trust)
    assert not res.compliant and len(res.violations) == 7
    assert {v.reason for v in res.violations} == {"Unresolvable"}


def test_baseline_drift(fx, backend, trust, tmp_path):
    fx2 = generate_fixture(tmp_path / "fx", 50, seed=7)
    flip_byte(fx2.datastore, "running-config.xml", offset=100)
    policy = TenantPolicy([Rule("config/running", MustMatchBaseline("config/startup"))])
    res = check_policy(attest(fixture_evidence(fx2), backend), policy, trust)
    assert res.violating_ids == {"config/running"}


def test_policy_json_roundtrip(fx):
    raw = json.loads(fx.policy_path.read_text())
    assert TenantPolicy.from_json(raw).to_json() == raw
    for bad in ({"rules": [{"plaintext_equals": "x"}]},
                {"rules": [{"id": "a", "plaintext_equals": "x", "expected_hash": "00"}]},
                {"rules": [{"id": "a", "frobnicate": 1}]},
                {"rules": [{"id": "a", "expected_hash": "abcd"}]}):
        with pytest.raises(ValueError):
            TenantPolicy.from_json(bad)


def test_plaintext_glob(fx, backend, trust):
    report = attest(fixture_evidence(fx), backend)
    assert verify_field(report, CLOCK_CLASS_ID, PlaintextMatches("[67]"), trust).compliant
    assert not verify_field(report, CLOCK_CLASS_ID, PlaintextMatches("1*"), trust).compliant


# -- proof-based field verification -----------------------------------------

def small_evidence(rng, n):
    items = []
    for i in range(n):
        disc = rng.choice(list(Disclosure))
        items.append(EvidenceItem(f"f/{i:02d}", Category.RuntimeConfig, disc,
                                  rng.choice([b"true", b"false", b"6", b"7", rng.randbytes(4)]),
                                  RuntimeSource(str(i))))
    return EvidenceSet(items)


def verdict(res):
    return res.compliant, res.root_ok, sorted((v.evidence_id, v.rule, v.observed, v.reason) for v in res.violations)


def test_proof_path_matches_manifest_path(backend, trust):
    rng = random.Random(2024)
    checks = [lambda it: PlaintextEquals(b"true"), lambda it: PlaintextMatches("[67]"),
              lambda it: ExpectedHash(it.digest), lambda it: ExpectedHash(H(b"other")),
              lambda it: MustMatchBaseline("f/00")]
    for case in range(100):
        ev = small_evidence(rng, rng.randint(1, 12))
        item = rng.choice(ev.items)
        check = rng.choice(checks)(item)
        _, tree = merkle.build_tree(ev.leaf_digests())
        man = attest(ev, backend, Mode.MANIFEST, T0 + case)
        compact = dataclasses.replace(man, mode=Mode.COMPACT, leaf_manifest=None, dynamic_plaintext=None)
        disclosures = {i: make_disclosure(ev, tree, i) for i in {item.id, "f/00"} if i in ev}
        a = verify_field(man, item.id, check, trust)
        b = verify_field(compact, item.id, check, trust, disclosures)
        assert verdict(a) == verdict(b), case


def test_forged_proof_rejected(backend, trust):
    ev = small_evidence(random.Random(1), 6)
    _, tree = merkle.build_tree(ev.leaf_digests())
    report = attest(ev, backend, Mode.COMPACT)
    d = make_disclosure(ev, tree, "f/02")
    forged = dataclasses.replace(d, leaf_digest=H(b"forged"), plaintext=b"forged")
    res = verify_field(report, "f/02", PlaintextEquals(b"forged"), trust, forged)
    assert not res.root_ok and not res.compliant
    lying = dataclasses.replace(d, plaintext=b"true" if d.plaintext != b"true" else b"false")
    res = verify_field(report, "f/02", PlaintextEquals(lying.plaintext), trust, lying)
    assert not res.compliant


# -- mutation oracle and properties ------------------------------------------

def static_only(rng, n):
    return EvidenceSet([EvidenceItem(f"s/{i:03d}", Category.RuntimeConfig,
                                     Disclosure.DYNAMIC if i % 4 == 0 else Disclosure.STATIC,
                                     f"value-{i}".encode(), RuntimeSource(str(i))) for i in range(n)])


def rules_for(ev):
    rules = []
    for it in ev:
        if it.disclosure is Disclosure.DYNAMIC:
            rules.append(Rule(it.id, PlaintextEquals(it.payload)))
        else:
            rules.append(Rule(it.id, ExpectedHash(it.digest)))
    return TenantPolicy(rules)


def test_k_of_n_mutations_localized(backend, trust):
    rng = random.Random(99)
    for case in range(40):
        n = rng.randint(1, 40)
        ev = static_only(rng, n)
        policy = rules_for(ev)
        mutated = set(rng.sample(ev.ids, rng.randint(0, n)))
        ev2 = ev
        for ident in mutated:
            ev2 = ev2.replace(ident, ev[ident].payload + b"-tampered")
        res = check_policy(attest(ev2, backend), policy, trust)
        assert res.violating_ids == mutated, case
        assert res.root_ok and res.signature_ok


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(data=st.data())
def test_adding_rules_is_monotone(data, backend, trust):
    n = data.draw(st.integers(1, 10))
    ev = static_only(random.Random(n), n)
    mutated = data.draw(st.sets(st.sampled_from(ev.ids)))
    ev2 = ev
    for ident in mutated:
        ev2 = ev2.replace(ident, b"x")
    report = attest(ev2, backend)
    all_rules = rules_for(ev).rules
    subset = data.draw(st.lists(st.sampled_from(all_rules), unique_by=lambda r: r.evidence_id))
    extra = data.draw(st.lists(st.sampled_from(all_rules)))
    small = check_policy(report, TenantPolicy(subset), trust)
    big = check_policy(report, TenantPolicy(subset + extra), trust)
    assert small.violations == big.violations[: len(small.violations)]
    if not small.compliant:
        assert not big.compliant


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(payloads=st.lists(st.binary(min_size=1, max_size=8), min_size=1, max_size=8), data=st.data())
def test_compliance_implies_commitment(payloads, data, backend, trust):
    ev = EvidenceSet([EvidenceItem(f"d/{i}", Category.RuntimeConfig, Disclosure.DYNAMIC, p, RuntimeSource(str(i)))
                      for i, p in enumerate(payloads)])
    report = attest(ev, backend)
    obj = report_to_json(report)
    ident = data.draw(st.sampled_from(ev.ids))
    claimed = data.draw(st.binary(min_size=1, max_size=8))

    obj["dynamic_plaintext"][ident] = base64.b64encode(claimed).decode()
    res = check_policy(decode_report(json.dumps(obj)), TenantPolicy([Rule(ident, PlaintextEquals(claimed))]), trust)
    assert res.compliant == (claimed == ev[ident].payload)
