import json
import random
import stat
import sys
import textwrap

import pytest
from cryptography.hazmat.primitives import serialization

from oranattest import attestation as att
from oranattest.attestation import (
    AttestationReport,
    ExternalTpmBackend,
    Mode,
    SoftwareKeyBackend,
    TpmClock,
    TrustStore,
    decode_report,
    encode_message,
    encode_report,
    generate_nonce,
    make_disclosure,
    make_report,
    report_to_json,
    verify_report_signature,
)
from oranattest.errors import BackendError, DecodeError, EmptyEvidenceSet, MalformedKey
from oranattest.evidence import (
    Category, Disclosure, EvidenceItem, EvidenceSet, RuntimeSource, collect, compute_config_hash, load_datastore,
)
from oranattest.fixtures import generate_fixture
from oranattest.merkle import build_tree, verify_proof

from conftest import FOUR_ITEM_PAYLOADS, H

PID = H(b"platform")


@pytest.fixture(scope="module")
def backend(rsa_key):
    return SoftwareKeyBackend(rsa_key)


def four_item_set():
    dynamic = {"macsec"}
    return EvidenceSet(
        EvidenceItem(p.decode(), Category.RuntimeConfig,
                     Disclosure.DYNAMIC if p.decode() in dynamic else Disclosure.STATIC, p, RuntimeSource("x"))
        for p in FOUR_ITEM_PAYLOADS
    )


def counter_clock(start=1_700_000_000_000):
    state = [start]

    def clock():
        state[0] += 1
        return state[0]
    return clock


def test_message_layout():
    m = encode_message(b"\x01" * 32, 0x0102030405060708, b"\x02" * 16, b"\x03" * 32)
    assert len(m) == 88
    assert m[32:40] == bytes([1, 2, 3, 4, 5, 6, 7, 8])
    assert att.decode_message(m) == (b"\x01" * 32, 0x0102030405060708, b"\x02" * 16, b"\x03" * 32)
    with pytest.raises(ValueError):
        encode_message(b"\x01" * 31, 0, b"\x02" * 16, b"\x03" * 32)
    with pytest.raises(ValueError):
        encode_message(b"\x01" * 32, -1, b"\x02" * 16, b"\x03" * 32)


def test_make_and_verify(backend):
    ev = four_item_set()
    root = compute_config_hash(ev)
    r = make_report(root, ev, backend, PID, counter_clock())
    assert r.mode is Mode.COMPACT and r.leaf_manifest is None and r.dynamic_plaintext is None
    assert len(r.signature) == 256
    assert verify_report_signature(r, backend.public_key(), PID)
    assert not verify_report_signature(r, backend.public_key(), H(b"other"))


def test_signature_is_pkcs1v15_sha256_over_message(backend):
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.asymmetric import padding, utils
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, backend, PID, counter_clock())
    # verifying the prehashed H(m) confirms the scheme hashes m exactly once
    backend.public_key().verify(r.signature, H(r.message), padding.PKCS1v15(), utils.Prehashed(hashes.SHA256()))


def test_two_reports_fresh(backend):
    ev = four_item_set()
    root = compute_config_hash(ev)
    clock = counter_clock()
    a = make_report(root, ev, backend, PID, clock)
    b = make_report(root, ev, backend, PID, clock)
    assert a.merkle_root == b.merkle_root
    assert a.nonce != b.nonce
    assert b.timestamp >= a.timestamp
    assert a.message != b.message


def test_nonce_uniqueness_100k():
    nonces = {generate_nonce() for _ in range(100_000)}
    assert len(nonces) == 100_000
    assert all(len(n) == 16 for n in list(nonces)[:10])


def test_field_corruption_sweep(backend):
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, backend, PID, counter_clock())
    pub = backend.public_key()
    for name, size in (("merkle_root", 32), ("nonce", 16), ("platform_id", 32)):
        for i in range(size):
            val = bytearray(getattr(r, name))
            val[i] ^= 0xFF
            kwargs = {name: bytes(val)}
            tampered = AttestationReport(**{**r.__dict__, **kwargs})
            expected = tampered.platform_id
            assert not verify_report_signature(tampered, pub, expected), (name, i)
    for i in range(8):
        t = r.timestamp ^ (0xFF << (8 * i))
        tampered = AttestationReport(**{**r.__dict__, "timestamp": t})
        assert not verify_report_signature(tampered, pub, PID)


def test_manifest_mode_four_items(backend):
    ev = four_item_set()
    root = compute_config_hash(ev)
    r = make_report(root, ev, backend, PID, counter_clock(), Mode.MANIFEST)
    assert [e.id for e in r.leaf_manifest] == sorted(p.decode() for p in FOUR_ITEM_PAYLOADS)
    assert {e.id: e.digest for e in r.leaf_manifest} == {p.decode(): H(p) for p in FOUR_ITEM_PAYLOADS}
    assert r.dynamic_plaintext == {"macsec": b"macsec"}
    assert build_tree([e.digest for e in r.leaf_manifest])[0] == r.merkle_root


def test_empty_set(backend):
    with pytest.raises(EmptyEvidenceSet):
        make_report(b"\0" * 32, EvidenceSet([]), backend, PID)


def test_compact_size_50_items(backend, tmp_path):
    fx = generate_fixture(tmp_path, 50)
    ev = collect(fx.manifest, load_datastore(fx.datastore))
    r = make_report(compute_config_hash(ev), ev, backend, PID)
    assert len(encode_report(r)) <= 1024


def test_roundtrip(backend):
    ev = four_item_set()
    for mode in Mode:
        r = make_report(compute_config_hash(ev), ev, backend, PID, counter_clock(), mode)
        assert decode_report(encode_report(r)) == r


def test_reserialization_fuzz(backend):
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, backend, PID, counter_clock(), Mode.MANIFEST)
    obj = report_to_json(r)
    rng = random.Random(3)
    for _ in range(50):
        keys = list(obj)
        rng.shuffle(keys)
        shuffled = {k: obj[k] for k in keys}
        text = json.dumps(shuffled, indent=rng.choice([None, 1, 4]), separators=rng.choice([(",", ":"), (" , ", " : ")]))
        decoded = decode_report("\n  " + text + "  \n")
        assert decoded == r
        assert verify_report_signature(decoded, backend.public_key(), PID)


def test_truncated_signature(backend):
    ev = four_item_set()
    obj = report_to_json(make_report(compute_config_hash(ev), ev, backend, PID))
    obj["signature"] = obj["signature"][:-8]
    with pytest.raises(DecodeError) as ei:
        decode_report(json.dumps(obj))
    assert ei.value.position == "signature"


@pytest.mark.parametrize("mutate", [
    lambda o: o.pop("nonce"),
    lambda o: o.update(extra=1),
    lambda o: o.update(version=2),
    lambda o: o.update(mode="full"),
    lambda o: o.update(timestamp=-1),
    lambda o: o.update(timestamp="1"),
    lambda o: o.update(merkle_root="zz" * 32),
    lambda o: o.update(nonce="00" * 15),
    lambda o: o.update(signature="!!!"),
    lambda o: o.update(leaf_manifest={}),
    lambda o: o.update(leaf_manifest=[{"id": "a"}]),
    lambda o: o.update(dynamic_plaintext=[]),
])
def test_decode_errors(backend, mutate):
    ev = four_item_set()
    obj = report_to_json(make_report(compute_config_hash(ev), ev, backend, PID))
    mutate(obj)
    with pytest.raises(DecodeError):
        decode_report(json.dumps(obj))


def test_decode_not_json():
    with pytest.raises(DecodeError) as ei:
        decode_report(b'{"version": 1,, }')
    assert isinstance(ei.value.position, int)
    with pytest.raises(DecodeError):
        decode_report(b"\xff\xfe")
    with pytest.raises(DecodeError):
        decode_report(b"[]")


def test_malformed_key(backend):
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, backend, PID)
    with pytest.raises(MalformedKey):
        verify_report_signature(r, b"not a key", PID)
    with pytest.raises(KeyError):
        verify_report_signature(r, "-----BEGIN PUBLIC KEY-----\nAAAA\n-----END PUBLIC KEY-----\n", PID)


def test_trust_store_roundtrip(backend, tmp_path):
    store = TrustStore()
    store.add(PID, backend.public_key())
    store.save(tmp_path / "trust.json")
    loaded = TrustStore.load(tmp_path / "trust.json")
    assert PID in loaded
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, backend, PID)
    assert loaded.verify(r)
    (tmp_path / "bad.json").write_text(json.dumps({PID.hex(): "garbage"}))
    with pytest.raises(MalformedKey):
        TrustStore.load(tmp_path / "bad.json")


def test_backend_does_not_expose_key(backend):
    public_attrs = [a for a in dir(backend) if not a.startswith("_")]
    for a in public_attrs:
        v = getattr(backend, a)
        assert not hasattr(v, "private_bytes"), a


def test_disclosure_roundtrip(backend):
    ev = four_item_set()
    root, tree = build_tree(ev.leaf_digests())
    d = make_disclosure(ev, tree, "macsec")
    assert d.plaintext == b"macsec"
    assert verify_proof(root, d.leaf_digest, d.proof)
    again = att.FieldDisclosure.from_json(json.loads(json.dumps(d.to_json())))
    assert again == d
    assert make_disclosure(ev, tree, "ru-cap").plaintext is None


# ---------------------------------------------------------------- external TPM

FAKE_TPM2_SIGN = """\
#!{python}
# stand-in for tpm2_sign: -c <pem key> -g sha256 -s rsassa -f plain -o <sig> <msg>
import sys
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding
a = sys.argv[1:]
key = serialization.load_pem_private_key(open(a[a.index("-c") + 1], "rb").read(), None)
assert a[a.index("-g") + 1] == "sha256" and a[a.index("-s") + 1] == "rsassa"
out = a[a.index("-o") + 1]
msg = open(a[-1], "rb").read()
open(out, "wb").write(key.sign(msg, padding.PKCS1v15(), hashes.SHA256()))
"""


def write_tool(path, body):
    path.write_text(body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


@pytest.fixture
def tpm_setup(tmp_path, rsa_key):
    key_path = tmp_path / "aik.pem"
    key_path.write_bytes(rsa_key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()))
    pub_path = tmp_path / "aik.pub.pem"
    pub_path.write_text(att.public_key_pem(rsa_key.public_key()))
    tool = write_tool(tmp_path / "tpm2_sign", FAKE_TPM2_SIGN.format(python=sys.executable))
    return key_path, pub_path, tool


def test_external_backend_signs_verifiably(tpm_setup, backend):
    key_path, pub_path, tool = tpm_setup
    tpm = ExternalTpmBackend(str(key_path), pub_path, tool=tool)
    ev = four_item_set()
    r = make_report(compute_config_hash(ev), ev, tpm, PID)
    assert verify_report_signature(r, backend.public_key(), PID)
    # deterministic PKCS#1 v1.5: both backends produce identical signatures
    assert backend.sign(r.message) == r.signature


def test_external_backend_missing_tool(tpm_setup):
    key_path, pub_path, _ = tpm_setup
    tpm = ExternalTpmBackend(str(key_path), pub_path, tool="/nonexistent/tpm2_sign")
    assert not tpm.available()
    with pytest.raises(BackendError):
        tpm.sign(b"x" * 88)


def test_external_backend_tool_failure(tpm_setup, tmp_path):
    key_path, pub_path, _ = tpm_setup
    tool = write_tool(tmp_path / "failing", "#!/bin/sh\necho 'ERROR: no such handle' >&2\nexit 3\n")
    with pytest.raises(BackendError, match="no such handle"):
        ExternalTpmBackend(str(key_path), pub_path, tool=tool).sign(b"x" * 88)


def test_tpm_clock(tmp_path):
    counter = tmp_path / "count"
    counter.write_text("5000")
    tool = write_tool(tmp_path / "tpm2_readclock", textwrap.dedent(f"""\
        #!/bin/sh
        n=$(cat {counter})
        echo "time: 123"
        echo "clock_info:"
        echo "  clock: $n"
        echo "  reset_count: 0"
        echo $((n + 250)) > {counter}
        """))
    clock = TpmClock(tool=tool)
    first = clock()
    second = clock()
    assert second - first == 250
    with pytest.raises(BackendError):
        TpmClock(tool=str(tmp_path / "missing"))()
