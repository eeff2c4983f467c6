"""Signed, replay-protected attestation reports over a Merkle root.

The signed message is the fixed-width concatenation::

    merkle_root (32) || timestamp_ms (8, big-endian) || nonce (16) || platform_id (32)

RSASSA-PKCS1-v1_5 with SHA-256 hashes that 88-byte message once inside the
scheme; the report hash is that internal SHA-256, not a second hash applied
beforehand. Both backends sign the same bytes, so one verify path serves both.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import logging
import os
import re
import secrets
import shutil
import struct
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from . import merkle
from .errors import BackendError, DecodeError, EmptyEvidenceSet, MalformedKey, UnknownEvidenceId
from .evidence import Disclosure, EvidenceSet

log = logging.getLogger(__name__)

ENVELOPE_VERSION = 1
NONCE_SIZE = 16
MESSAGE_SIZE = 32 + 8 + NONCE_SIZE + 32
_RSA_SIG_SIZES = (256, 384, 512)
_U64_MAX = (1 << 64) - 1

Clock = Callable[[], int]


class Mode(str, Enum):
    COMPACT = "compact"
    MANIFEST = "manifest"


def generate_nonce() -> bytes:
    return secrets.token_bytes(NONCE_SIZE)


def system_clock() -> int:
    """Milliseconds since the Unix epoch."""
    return time.time_ns() // 1_000_000


class TpmClock:
    """Clock backed by the TPM's ``TPMS_CLOCK_INFO.clock`` counter.

    The TPM counter is milliseconds since TPM reset, so the first reading is
    anchored to wall time and later readings advance with the TPM counter
    only; a host changing its system clock afterwards has no effect.
    """

    _pattern = re.compile(r"^\s*clock:\s*(\d+)\s*$", re.MULTILINE)

    def __init__(self, tool: str = "tpm2_readclock", timeout: float = 5.0) -> None:
        self.tool = tool
        self.timeout = timeout
        self._anchor: tuple[int, int] | None = None

    def _read(self) -> int:
        try:
            proc = subprocess.run([self.tool], capture_output=True, text=True, timeout=self.timeout)
        except FileNotFoundError:
            raise BackendError(f"TPM toolchain not found: {self.tool}") from None
        except subprocess.TimeoutExpired:
            raise BackendError(f"{self.tool} timed out") from None
        if proc.returncode != 0:
            raise BackendError(f"{self.tool} failed: {proc.stderr.strip()}")
        m = self._pattern.search(proc.stdout)
        if m is None:
            raise BackendError(f"cannot parse clock from {self.tool} output")
        return int(m.group(1))

    def __call__(self) -> int:
        tpm_ms = self._read()
        if self._anchor is None:
            self._anchor = (system_clock(), tpm_ms)
        wall0, tpm0 = self._anchor
        return wall0 + (tpm_ms - tpm0)


def measure_files(paths) -> bytes:
    """SHA-256 over ``name NUL content`` of each file, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        h.update(p.name.encode() + b"\0")
        h.update(p.read_bytes())
    return h.digest()


def reporter_measurement() -> bytes:
    """Platform id of this reporter build: a hash of the package's own sources."""
    pkg = Path(__file__).resolve().parent
    return measure_files(sorted(pkg.glob("*.py")))


def encode_message(root: bytes, timestamp: int, nonce: bytes, platform_id: bytes) -> bytes:
    if len(root) != 32 or len(nonce) != NONCE_SIZE or len(platform_id) != 32:
        raise ValueError("bad field width in report message")
    if not 0 <= timestamp <= _U64_MAX:
        raise ValueError("timestamp out of u64 range")
    return root + struct.pack(">Q", timestamp) + nonce + platform_id


def decode_message(message: bytes) -> tuple[bytes, int, bytes, bytes]:
    if len(message) != MESSAGE_SIZE:
        raise ValueError(f"report message must be {MESSAGE_SIZE} bytes")
    (t,) = struct.unpack(">Q", message[32:40])
    return message[:32], t, message[40:56], message[56:]


@dataclass(frozen=True)
class LeafEntry:
    id: str
    digest: bytes
    disclosure: Disclosure


@dataclass(frozen=True)
class AttestationReport:
    merkle_root: bytes
    timestamp: int
    nonce: bytes
    platform_id: bytes
    signature: bytes
    mode: Mode = Mode.COMPACT
    leaf_manifest: tuple[LeafEntry, ...] | None = None
    dynamic_plaintext: Mapping[str, bytes] | None = field(default=None, hash=False)

    @property
    def message(self) -> bytes:
        return encode_message(self.merkle_root, self.timestamp, self.nonce, self.platform_id)

    def manifest_digests(self) -> dict[str, bytes]:
        return {e.id: e.digest for e in self.leaf_manifest or ()}


# --------------------------------------------------------------------------
# signing backends
# --------------------------------------------------------------------------

class SigningBackend:
    kind = "abstract"

    def sign(self, message: bytes) -> bytes:
        raise NotImplementedError

    def public_key(self) -> rsa.RSAPublicKey:
        raise NotImplementedError


class SoftwareKeyBackend(SigningBackend):
    """RSA key held in process memory, reachable only through ``sign``."""

    kind = "software"

    def __init__(self, private_key: rsa.RSAPrivateKey) -> None:
        if not isinstance(private_key, rsa.RSAPrivateKey):
            raise BackendError("software backend needs an RSA private key")
        self.__key = private_key
        self._lock = threading.Lock()

    @classmethod
    def generate(cls, key_size: int = 2048) -> "SoftwareKeyBackend":
        return cls(rsa.generate_private_key(public_exponent=65537, key_size=key_size))

    @classmethod
    def from_pem_file(cls, path: str | os.PathLike) -> "SoftwareKeyBackend":
        try:
            key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
        except (OSError, ValueError, TypeError) as exc:
            raise BackendError(f"cannot load private key {path}: {exc}") from exc
        return cls(key)

    def sign(self, message: bytes) -> bytes:
        with self._lock:
            try:
                return self.__key.sign(message, padding.PKCS1v15(), hashes.SHA256())
            except Exception as exc:  # noqa: BLE001 - surface as backend failure
                raise BackendError(f"signing failed: {exc}") from exc

    def public_key(self) -> rsa.RSAPublicKey:
        return self.__key.public_key()

    def __repr__(self) -> str:
        return f"SoftwareKeyBackend(rsa-{self.__key.key_size})"


class ExternalTpmBackend(SigningBackend):
    """Delegates signing to a TPM 2.0 command-line tool (``tpm2_sign``).

    The tool receives the 88-byte message in a file and hashes it with SHA-256
    itself, producing a plain RSASSA-PKCS1-v1_5 signature. A missing tool is a
    ``BackendError``; there is no silent fallback to a software key.
    """

    kind = "tpm"

    def __init__(
        self,
        key_context: str,
        public_key_path: str | os.PathLike,
        tool: str = "tpm2_sign",
        timeout: float = 10.0,
    ) -> None:
        self.key_context = key_context
        self.tool = tool
        self.timeout = timeout
        self._public = load_public_key(Path(public_key_path).read_bytes())
        self._lock = threading.Lock()

    def available(self) -> bool:
        return shutil.which(self.tool) is not None

    def sign(self, message: bytes) -> bytes:
        with self._lock, tempfile.TemporaryDirectory(prefix="tpmsign-") as tmp:
            msg = os.path.join(tmp, "msg.bin")
            sig = os.path.join(tmp, "sig.bin")
            with open(msg, "wb") as fh:
                fh.write(message)
            cmd = [self.tool, "-c", self.key_context, "-g", "sha256", "-s", "rsassa",
                   "-f", "plain", "-o", sig, msg]
            try:
                proc = subprocess.run(cmd, capture_output=True, timeout=self.timeout)
            except FileNotFoundError:
                raise BackendError(f"TPM toolchain not found: {self.tool}") from None
            except subprocess.TimeoutExpired:
                raise BackendError(f"{self.tool} timed out after {self.timeout}s") from None
            if proc.returncode != 0:
                raise BackendError(f"{self.tool} exited {proc.returncode}: "
                                   f"{proc.stderr.decode(errors='replace').strip()}")
            try:
                with open(sig, "rb") as fh:
                    signature = fh.read()
            except OSError:
                raise BackendError(f"{self.tool} produced no signature") from None
        if len(signature) * 8 != self._public.key_size:
            raise BackendError(f"unexpected signature length {len(signature)}")
        return signature

    def public_key(self) -> rsa.RSAPublicKey:
        return self._public


# --------------------------------------------------------------------------
# report generation and verification
# --------------------------------------------------------------------------

def make_report(
    root: bytes,
    evidence: EvidenceSet,
    backend: SigningBackend,
    platform_id: bytes,
    clock: Clock = system_clock,
    mode: Mode = Mode.COMPACT,
    nonce_source: Callable[[], bytes] = generate_nonce,
) -> AttestationReport:
    if len(evidence) == 0:
        raise EmptyEvidenceSet("cannot attest an empty evidence set")
    t = int(clock())
    nonce = nonce_source()
    message = encode_message(root, t, nonce, platform_id)
    signature = backend.sign(message)

    leaf_manifest = None
    plaintext = None
    if Mode(mode) is Mode.MANIFEST:
        leaf_manifest = tuple(LeafEntry(it.id, it.digest, it.disclosure) for it in evidence)
        plaintext = {it.id: it.payload for it in evidence if it.disclosure is Disclosure.DYNAMIC}
    return AttestationReport(root, t, nonce, platform_id, signature, Mode(mode), leaf_manifest, plaintext)


PublicKeyLike = Union[rsa.RSAPublicKey, bytes, str]


def load_public_key(data: PublicKeyLike) -> rsa.RSAPublicKey:
    if isinstance(data, rsa.RSAPublicKey):
        return data
    if isinstance(data, str):
        data = data.encode()
    try:
        key = serialization.load_pem_public_key(data)
    except (ValueError, TypeError) as exc:
        raise MalformedKey(f"cannot parse public key: {exc}") from None
    if not isinstance(key, rsa.RSAPublicKey):
        raise MalformedKey("public key is not RSA")
    return key


def public_key_pem(key: rsa.RSAPublicKey) -> str:
    return key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    ).decode()


def verify_report_signature(report: AttestationReport, public_key: PublicKeyLike,
                            expected_platform: bytes) -> bool:
    key = load_public_key(public_key)
    if report.platform_id != expected_platform:
        return False
    try:
        key.verify(report.signature, report.message, padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError):
        return False
    return True


class TrustStore:
    """platform_id -> RSA public key, distributed out of band.

    On disk: a JSON object mapping lowercase platform-id hex to PEM text.
    """

    def __init__(self, entries: Mapping[bytes, rsa.RSAPublicKey] | None = None) -> None:
        self._entries: dict[bytes, rsa.RSAPublicKey] = dict(entries or {})
        self._lock = threading.Lock()

    def add(self, platform_id: bytes, key: PublicKeyLike) -> None:
        if len(platform_id) != 32:
            raise MalformedKey("platform id must be 32 bytes")
        with self._lock:
            self._entries[bytes(platform_id)] = load_public_key(key)

    def get(self, platform_id: bytes) -> rsa.RSAPublicKey | None:
        return self._entries.get(platform_id)

    def __contains__(self, platform_id: object) -> bool:
        return platform_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def platforms(self) -> list[bytes]:
        return sorted(self._entries)

    def verify(self, report: AttestationReport) -> bool:
        key = self.get(report.platform_id)
        return key is not None and verify_report_signature(report, key, report.platform_id)

    def to_json(self) -> dict[str, str]:
        return {pid.hex(): public_key_pem(k) for pid, k in sorted(self._entries.items())}

    @classmethod
    def from_json(cls, obj: Mapping[str, str]) -> "TrustStore":
        store = cls()
        for pid_hex, pem in obj.items():
            try:
                pid = bytes.fromhex(pid_hex)
            except ValueError:
                raise MalformedKey(f"bad platform id {pid_hex!r}") from None
            store.add(pid, pem)
        return store

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrustStore":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedKey(f"{path}: {exc}") from None
        if not isinstance(obj, dict):
            raise MalformedKey(f"{path}: expected a JSON object")
        return cls.from_json(obj)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# envelope
# --------------------------------------------------------------------------

_REQUIRED = ("version", "mode", "merkle_root", "timestamp", "nonce", "platform_id", "signature")
_OPTIONAL = ("leaf_manifest", "dynamic_plaintext")


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def report_to_json(report: AttestationReport) -> dict:
    obj = {
        "version": ENVELOPE_VERSION,
        "mode": report.mode.value,
        "merkle_root": report.merkle_root.hex(),
        "timestamp": report.timestamp,
        "nonce": report.nonce.hex(),
        "platform_id": report.platform_id.hex(),
        "signature": _b64(report.signature),
    }
    if report.leaf_manifest is not None:
        obj["leaf_manifest"] = [
            {"id": e.id, "digest": e.digest.hex(), "disclosure": e.disclosure.value}
            for e in report.leaf_manifest
        ]
    if report.dynamic_plaintext is not None:
        obj["dynamic_plaintext"] = {k: _b64(v) for k, v in sorted(report.dynamic_plaintext.items())}
    return obj


def encode_report(report: AttestationReport) -> bytes:
    return json.dumps(report_to_json(report), separators=(",", ":")).encode("utf-8")


def _hex_field(obj: dict, name: str, size: int) -> bytes:
    value = obj[name]
    if not isinstance(value, str) or len(value) != 2 * size:
        raise DecodeError(f"{name} must be {2 * size} hex characters", name)
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise DecodeError(f"{name} is not hex", name) from None


def _b64_field(value: object, where: str) -> bytes:
    if not isinstance(value, str):
        raise DecodeError("expected base64 string", where)
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError):
        raise DecodeError("invalid base64", where) from None


def report_from_json(obj: object) -> AttestationReport:
    if not isinstance(obj, dict):
        raise DecodeError("envelope must be a JSON object", 0)
    for name in _REQUIRED:
        if name not in obj:
            raise DecodeError(f"missing field {name!r}", name)
    for name in obj:
        if name not in _REQUIRED and name not in _OPTIONAL:
            raise DecodeError(f"unknown field {name!r}", name)
    if obj["version"] != ENVELOPE_VERSION:
        raise DecodeError(f"unsupported envelope version {obj['version']!r}", "version")
    try:
        mode = Mode(obj["mode"])
    except ValueError:
        raise DecodeError(f"bad mode {obj['mode']!r}", "mode") from None
    t = obj["timestamp"]
    if not isinstance(t, int) or isinstance(t, bool) or not 0 <= t <= _U64_MAX:
        raise DecodeError("timestamp must be an unsigned 64-bit integer", "timestamp")
    signature = _b64_field(obj["signature"], "signature")
    if len(signature) not in _RSA_SIG_SIZES:
        raise DecodeError(f"signature has {len(signature)} bytes", "signature")

    manifest = None
    if "leaf_manifest" in obj:
        raw = obj["leaf_manifest"]
        if not isinstance(raw, list):
            raise DecodeError("leaf_manifest must be a list", "leaf_manifest")
        entries = []
        for i, e in enumerate(raw):
            where = f"leaf_manifest[{i}]"
            if not isinstance(e, dict) or set(e) != {"id", "digest", "disclosure"}:
                raise DecodeError("entry needs exactly id, digest, disclosure", where)
            if not isinstance(e["id"], str):
                raise DecodeError("id must be a string", where)
            try:
                disclosure = Disclosure(e["disclosure"])
            except ValueError:
                raise DecodeError(f"bad disclosure {e['disclosure']!r}", where) from None
            entries.append(LeafEntry(e["id"], _hex_field(e, "digest", 32), disclosure))
        manifest = tuple(entries)

    plaintext = None
    if "dynamic_plaintext" in obj:
        raw = obj["dynamic_plaintext"]
        if not isinstance(raw, dict):
            raise DecodeError("dynamic_plaintext must be an object", "dynamic_plaintext")
        plaintext = {k: _b64_field(v, f"dynamic_plaintext[{k!r}]") for k, v in raw.items()}

    return AttestationReport(
        merkle_root=_hex_field(obj, "merkle_root", 32),
        timestamp=t,
        nonce=_hex_field(obj, "nonce", NONCE_SIZE),
        platform_id=_hex_field(obj, "platform_id", 32),
        signature=signature,
        mode=mode,
        leaf_manifest=manifest,
        dynamic_plaintext=plaintext,
    )


def decode_report(data: bytes | str) -> AttestationReport:
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    except UnicodeDecodeError as exc:
        raise DecodeError("envelope is not UTF-8", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(exc.msg, exc.pos) from None
    return report_from_json(obj)


# --------------------------------------------------------------------------
# single-field disclosure with an inclusion proof
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldDisclosure:
    """Everything a tenant needs to check one leaf against a Compact report."""

    id: str
    leaf_digest: bytes
    proof: merkle.InclusionProof
    plaintext: bytes | None = None

    def to_json(self) -> dict:
        obj = {
            "id": self.id,
            "leaf_index": self.proof.leaf_index,
            "leaf_digest": self.leaf_digest.hex(),
            "proof": self.proof.to_json(),
        }
        if self.plaintext is not None:
            obj["plaintext"] = _b64(self.plaintext)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "FieldDisclosure":
        try:
            proof = merkle.InclusionProof.from_json(obj["leaf_index"], obj["proof"])
            plaintext = _b64_field(obj["plaintext"], "plaintext") if "plaintext" in obj else None
            return cls(obj["id"], _hex_field(obj, "leaf_digest", 32), proof, plaintext)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DecodeError):
                raise
            raise DecodeError(f"malformed disclosure: {exc}") from None


def make_disclosure(evidence: EvidenceSet, tree: merkle.MerkleTree, evidence_id: str) -> FieldDisclosure:
    if evidence_id not in evidence:
        raise UnknownEvidenceId(evidence_id)
    index = evidence.index_of(evidence_id)
    item = evidence[evidence_id]
    plaintext = item.payload if item.disclosure is Disclosure.DYNAMIC else None
    return FieldDisclosure(evidence_id, item.digest, tree.proof(index), plaintext)
