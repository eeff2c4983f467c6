"""Command-line entry point: ``oranattest <command> ...``.

Exit codes
    0   success; for ``verify``, the report is compliant
    1   error: bad arguments, missing files, unreachable hub, refused overwrite
    2   ``verify`` only: the report is not compliant (violations, bad signature,
        unknown platform or root mismatch)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import threading
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import OranAttestError

log = logging.getLogger("oranattest")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCOMPLIANT = 2


class CliError(Exception):
    """Raised for operator mistakes; printed without a traceback."""


def _emit(args: argparse.Namespace, human: str, machine: dict) -> None:
    if args.json:
        print(json.dumps(machine, indent=2, sort_keys=True))
    else:
        print(human)


def _hex32(value: str) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not hex: {value!r}") from None
    if len(raw) != 32:
        raise argparse.ArgumentTypeError("platform id must be 32 bytes (64 hex digits)")
    return raw


def _platform_id(args: argparse.Namespace) -> bytes:
    from .attestation import measure_files, reporter_measurement

    if getattr(args, "platform_id", None):
        return args.platform_id
    if getattr(args, "measure", None):
        return measure_files(args.measure)
    return reporter_measurement()


# --------------------------------------------------------------------------
# keygen
# --------------------------------------------------------------------------

def cmd_keygen(args: argparse.Namespace) -> int:
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric import rsa

    from .attestation import (
        AttestationReport, SoftwareKeyBackend, TrustStore, encode_message, public_key_pem, verify_report_signature,
    )
    from .transport import write_self_signed

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    priv, pub, trust_path = out / "aik.pem", out / "aik.pub.pem", out / "trust.json"
    tls_paths = [out / f"{n}.{ext}" for n in args.tls for ext in ("key", "crt")]
    existing = [p for p in (priv, pub, trust_path, *tls_paths) if p.exists()]
    if existing and not args.force:
        raise CliError(f"refusing to overwrite {', '.join(str(p) for p in existing)} (use --force)")

    key = rsa.generate_private_key(public_exponent=65537, key_size=args.bits)
    pid = _platform_id(args)

    # self-test before anything is written
    backend = SoftwareKeyBackend(key)
    vector = encode_message(bytes(32), 0, bytes(16), pid)
    probe = AttestationReport(bytes(32), 0, bytes(16), pid, backend.sign(vector))
    if not verify_report_signature(probe, key.public_key(), pid):
        raise CliError("generated key failed its signing self-test")

    pem = key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                            serialization.NoEncryption())
    fd = os.open(priv, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(pem)
    pub.write_text(public_key_pem(key.public_key()))
    trust = TrustStore.load(trust_path) if trust_path.exists() and args.force else TrustStore()
    trust.add(pid, key.public_key())
    trust.save(trust_path)
    certs = [str(p) for n in args.tls for p in write_self_signed(out, n)]

    _emit(args,
          f"private key: {priv}\npublic key:  {pub}\ntrust store: {trust_path}\n"
          + "".join(f"tls:         {c}\n" for c in certs)
          + f"trust line:  {pid.hex()} {pub}",
          {"private_key": str(priv), "public_key": str(pub), "trust_store": str(trust_path),
           "platform_id": pid.hex(), "tls": certs, "self_test": "ok"})
    return EXIT_OK


# --------------------------------------------------------------------------
# fixture / tamper
# --------------------------------------------------------------------------

def cmd_fixture(args: argparse.Namespace) -> int:
    from .fixtures import generate_fixture

    if not 1 <= args.n <= 65536:
        raise CliError("--n must be between 1 and 65536")
    fx = generate_fixture(args.out, args.n, args.seed)
    files = sorted(p.name for p in fx.datastore.iterdir())
    _emit(args,
          f"datastore:    {fx.datastore} ({len(files)} files)\nmanifest:     {fx.manifest_path} "
          f"({len(fx.manifest.entries)} items)\nexpectations: {fx.expectations_path}\npolicy:       {fx.policy_path}",
          {"datastore": str(fx.datastore), "files": len(files), "items": len(fx.manifest.entries),
           "manifest": str(fx.manifest_path), "expectations": str(fx.expectations_path),
           "policy": str(fx.policy_path)})
    return EXIT_OK


def cmd_tamper(args: argparse.Namespace) -> int:
    from .evidence import EvidenceManifest
    from .fixtures import flip_byte, resolve_target, set_value

    selector = args.selector
    if args.id:
        if not args.manifest:
            raise CliError("--id needs --manifest")
        file, id_selector = resolve_target(EvidenceManifest.load(args.manifest), args.id)
        selector = selector or id_selector
    elif args.file:
        file = args.file
    else:
        raise CliError("give --id or --file")

    if args.mutation == "flip-byte":
        entry = flip_byte(args.datastore, file, args.offset, random.Random(args.seed))
    else:
        if args.value is None or not selector:
            raise CliError("set-value needs --value and a selector (from --id or --selector)")
        entry = set_value(args.datastore, file, selector, args.value)
    human = ", ".join(f"{k}={v}" for k, v in entry.items())
    _emit(args, f"tampered: {human}", entry)
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def _parse_n_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(not 1 <= v <= 65536 for v in values):
        raise argparse.ArgumentTypeError("item counts must be in [1, 65536]")
    return values


def _backend_from_args(args: argparse.Namespace):
    from .attestation import ExternalTpmBackend, SoftwareKeyBackend

    if args.backend == "tpm":
        if not (args.tpm_context and args.tpm_public):
            raise CliError("--backend tpm needs --tpm-context and --tpm-public")
        backend = ExternalTpmBackend(args.tpm_context, args.tpm_public)
        if not backend.available():
            raise CliError(f"TPM toolchain not found ({backend.tool}); refusing to fall back to software")
        return backend
    if getattr(args, "key", None):
        return SoftwareKeyBackend.from_pem_file(args.key)
    return SoftwareKeyBackend.generate()


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import format_table, run_bench, to_csv

    backend = _backend_from_args(args)
    records = run_bench(args.n, backend, _platform_id(args), args.runs, args.seed, args.backend)
    csv_text = to_csv(records)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.json:
        print(json.dumps([dict(zip(csv_text.splitlines()[0].split(","), r.row())) for r in records], indent=2))
    else:
        print(format_table(records))
        if not args.csv:
            print()
            print(csv_text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# tr run / tr disclose
# --------------------------------------------------------------------------

def _wait(stop: threading.Event, duration: float | None) -> None:
    try:
        stop.wait(duration) if duration else stop.wait()
    except KeyboardInterrupt:
        pass
    stop.set()


def cmd_tr_run(args: argparse.Namespace, stop: threading.Event) -> int:
    from .agent import AgentConfig, run_loop
    from .attestation import Mode

    tls = (args.tls_cert, args.tls_key, args.tls_ca)
    if any(tls) and not all(tls):
        raise CliError("--tls-cert, --tls-key and --tls-ca go together")
    if args.backend == "software" and not args.key:
        raise CliError("--backend software needs --key")
    config = AgentConfig(
        datastore=Path(args.datastore), manifest=Path(args.manifest), prh=args.prh,
        period_ms=args.period_ms, mode=Mode(args.mode), backend=args.backend, key=args.key,
        tpm_key_context=args.tpm_context, tpm_public_key=args.tpm_public,
        platform_id=_platform_id(args), strict_alg2=args.strict_alg2,
        tls_cert=args.tls_cert, tls_key=args.tls_key, tls_ca=args.tls_ca,
    )
    if config.backend == "tpm":
        _backend_from_args(args)  # fail fast when the toolchain is missing

    timer = threading.Thread(target=_wait, args=(stop, args.duration), daemon=True)
    timer.start()

    def announce(report) -> None:
        if not args.json:
            print(f"report t={report.timestamp} root={report.merkle_root.hex()}", flush=True)

    summary = run_loop(config, stop, on_report=announce)
    _emit(args,
          f"emitted {len(summary.reports)} report(s); delivered {summary.sender.delivered}, "
          f"rejected {summary.sender.rejected}, dropped {summary.sender.dropped}, "
          f"undelivered {summary.undelivered}",
          {"emitted": len(summary.reports), "delivered": summary.sender.delivered,
           "rejected": summary.sender.rejected, "dropped": summary.sender.dropped,
           "undelivered": summary.undelivered, "errors": [str(e) for e in summary.errors]})
    return EXIT_OK


def cmd_tr_attest(args: argparse.Namespace) -> int:
    from .attestation import Mode, encode_report, make_report
    from .evidence import EvidenceManifest, collect, compute_config_hash, load_datastore

    if args.backend == "software" and not args.key:
        raise CliError("--backend software needs --key")
    backend = _backend_from_args(args)
    evidence = collect(EvidenceManifest.load(args.manifest), load_datastore(args.datastore))
    report = make_report(compute_config_hash(evidence), evidence, backend, _platform_id(args), mode=Mode(args.mode))
    envelope = encode_report(report)
    if args.out:
        Path(args.out).write_bytes(envelope)
    _emit(args, f"root={report.merkle_root.hex()} t={report.timestamp} bytes={len(envelope)}"
          + (f" -> {args.out}" if args.out else "\n" + envelope.decode()),
          {"merkle_root": report.merkle_root.hex(), "timestamp": report.timestamp, "size": len(envelope),
           "out": str(args.out) if args.out else None})
    return EXIT_OK


def cmd_tr_disclose(args: argparse.Namespace) -> int:
    from . import merkle
    from .attestation import make_disclosure
    from .evidence import EvidenceManifest, collect, load_datastore

    evidence = collect(EvidenceManifest.load(args.manifest), load_datastore(args.datastore))
    _, tree = merkle.build_tree(evidence.leaf_digests())
    out = {"merkle_root": tree.root.hex(),
           "disclosures": [make_disclosure(evidence, tree, i).to_json() for i in args.id]}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# prh serve
# --------------------------------------------------------------------------

def cmd_prh_serve(args: argparse.Namespace, stop: threading.Event) -> int:
    from .attestation import TrustStore
    from .prh import PrhStore, serve
    from .transport import server_context

    tls = (args.tls_cert, args.tls_key, args.tls_ca)
    if any(tls) and not all(tls):
        raise CliError("--tls-cert, --tls-key and --tls-ca go together")
    trust = TrustStore.load(args.trust)
    token = args.admin_token or os.environ.get("ORANATTEST_ADMIN_TOKEN")
    ctx = server_context(*tls[:2], tls[2]) if all(tls) else None
    with PrhStore(args.store, trust, admin_token=token) as store:
        server = serve(store, args.listen, ctx)
        server.start()
        if args.port_file:
            Path(args.port_file).write_text(server.address + "\n")
        print(f"listening on {server.address} ({'mutual TLS' if ctx else 'plain TCP'}); "
              f"{len(store.entries)} entries in log", flush=True)
        try:
            _wait(stop, args.duration)
        finally:
            server.stop()
    return EXIT_OK


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def _load_report(args: argparse.Namespace):
    """Return ``(report, received_at or None)`` from a file or the hub."""
    from .attestation import decode_report
    from .prh import PrhClient

    if args.report:
        return decode_report(Path(args.report).read_bytes()), None
    if not args.prh:
        raise CliError("give --report FILE or --prh ADDR")
    if not args.platform:
        raise CliError("--prh needs --platform HEX")
    ctx = None
    if args.tls_cert:
        from .transport import client_context
        ctx = client_context(args.tls_cert, args.tls_key, args.tls_ca)
    client = PrhClient(args.prh, ctx)
    try:
        if args.seq is not None:
            entries = client.query(args.platform, seq_start=args.seq, seq_end=args.seq + 1)
            entry = entries[0] if entries else None
        else:
            entry = client.latest(args.platform)
    finally:
        client.close()
    if entry is None:
        raise CliError("hub has no matching report for that platform")
    return decode_report(entry.report_bytes), entry.received_at


def _evidence_source(args: argparse.Namespace):
    from .evidence import EvidenceManifest, collect, load_datastore
    from .verifier import load_expectations

    if args.datastore:
        if not args.manifest:
            raise CliError("--datastore needs --manifest")
        return collect(EvidenceManifest.load(args.manifest), load_datastore(args.datastore))
    if args.expectations:
        return load_expectations(args.expectations)
    return None


def _disclosures(args: argparse.Namespace):
    from .attestation import FieldDisclosure

    if not args.disclosure:
        return None
    obj = json.loads(Path(args.disclosure).read_text())
    items = obj["disclosures"] if isinstance(obj, dict) and "disclosures" in obj else obj
    items = items if isinstance(items, list) else [items]
    return {d.id: d for d in (FieldDisclosure.from_json(x) for x in items)}


def _field_check(args: argparse.Namespace):
    from .verifier import ExpectedHash, MustMatchBaseline, PlaintextEquals, PlaintextMatches

    given = [x for x in (args.equals, args.matches, args.expected_hash, args.baseline) if x is not None]
    if len(given) != 1:
        raise CliError("field verification needs exactly one of --equals/--matches/--expected-hash/--baseline")
    if args.equals is not None:
        return PlaintextEquals(args.equals.encode("utf-8"))
    if args.matches is not None:
        return PlaintextMatches(args.matches)
    if args.expected_hash is not None:
        return ExpectedHash(_hex32(args.expected_hash))
    return MustMatchBaseline(args.baseline)


def cmd_verify(args: argparse.Namespace) -> int:
    from .attestation import TrustStore
    from .verifier import TenantPolicy, check_policy, verify_field, verify_full

    trust = TrustStore.load(args.trust)
    report, received_at = _load_report(args)
    expected = args.platform if args.platform else None
    if args.kind == "full":
        result = verify_full(report, _evidence_source(args), trust,
                             expected_platform=expected, received_at=received_at)
    elif args.kind == "field":
        if not args.id:
            raise CliError("verify field needs --id")
        result = verify_field(report, args.id, _field_check(args), trust, _disclosures(args),
                              expected_platform=expected, received_at=received_at)
    else:
        if not args.policy:
            raise CliError("verify policy needs --policy")
        result = check_policy(report, TenantPolicy.load(args.policy), trust, _evidence_source(args),
                              _disclosures(args), expected_platform=expected, received_at=received_at)
    _emit(args, result.summary(), result.to_json())
    return EXIT_OK if result.compliant else EXIT_NONCOMPLIANT


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_tls(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tls-cert", type=Path, help="own certificate (PEM); enables mutual TLS")
    p.add_argument("--tls-key", type=Path, help="own private key (PEM)")
    p.add_argument("--tls-ca", type=Path, help="pinned peer certificate (PEM)")


def _add_identity(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--platform-id", type=_hex32, help="explicit 32-byte platform id (hex)")
    g.add_argument("--measure", nargs="+", type=Path, metavar="FILE",
                   help="derive the platform id by hashing these files (default: this package's sources)")


def _add_backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["software", "tpm"], default="software", help="signing backend")
    p.add_argument("--key", type=Path, help="RSA private key (PEM) for the software backend")
    p.add_argument("--tpm-context", help="key context handed to tpm2_sign -c")
    p.add_argument("--tpm-public", type=Path, help="PEM public key of the TPM attestation key")


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Subcommands repeat the global flags with suppressed defaults so a
        # flag given before the subcommand is not reset by the subparser.
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--seed", type=int, default=d(0), help="seed for deterministic generators (default 0)")
        g.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
        g.add_argument("-v", "--verbose", action="count", default=d(0), help="more logging (repeatable)")
        return g

    common = global_flags(True)
    parser = argparse.ArgumentParser(
        prog="oranattest", parents=[global_flags(False)],
        description="Runtime configuration attestation: reporter agent, proof hub, tenant verifier.",
        epilog="exit codes: 0 ok/compliant, 1 error, 2 non-compliant (verify)",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("keygen", parents=[common], help="create an RSA-2048 attestation key and trust store")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing key material")
    p.add_argument("--bits", type=int, default=2048, choices=[2048, 3072, 4096], help="RSA modulus size")
    p.add_argument("--tls", action="append", default=[], metavar="NAME",
                   help="also write NAME.key/NAME.crt self-signed TLS material (repeatable)")
    _add_identity(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("fixture", parents=[common], help="generate a deterministic datastore and manifest")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--n", type=int, default=50, help="number of datastore files (1..65536)")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("tamper", parents=[common], help="mutate a datastore file for demonstrations")
    p.add_argument("--datastore", required=True, type=Path)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--id", help="evidence id to target (needs --manifest)")
    target.add_argument("--file", help="datastore-relative file to target")
    p.add_argument("--manifest", type=Path, help="manifest used to resolve --id")
    p.add_argument("--mutation", choices=["flip-byte", "set-value"], required=True)
    p.add_argument("--offset", type=int, help="byte offset for flip-byte (default: random from --seed)")
    p.add_argument("--selector", help="element selector for set-value when targeting a file")
    p.add_argument("--value", help="new element text for set-value")
    p.set_defaults(func=cmd_tamper)

    p = sub.add_parser("bench", parents=[common], help="time collect, commit, sign and verify")
    p.add_argument("--n", type=_parse_n_list, default=[1, 10, 50, 100], help="comma-separated file counts")
    p.add_argument("--runs", type=int, default=10, help="runs per size (default 10)")
    p.add_argument("--csv", type=Path, help="write CSV here")
    _add_backend(p)
    _add_identity(p)
    p.set_defaults(func=cmd_bench)

    tr = sub.add_parser("tr", parents=[common], help="trusted reporter agent")
    trs = tr.add_subparsers(dest="tr_command", required=True, metavar="ACTION")
    p = trs.add_parser("run", parents=[common], help="watch the datastore and send signed reports")
    p.add_argument("--datastore", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--prh", help="hub address HOST:PORT (omit to attest without sending)")
    p.add_argument("--period-ms", type=int, default=300, help="periodic trigger interval (default 300)")
    p.add_argument("--mode", choices=["compact", "manifest"], default="compact")
    p.add_argument("--strict-alg2", action="store_true",
                   help="re-hash on every tick once the period has elapsed (literal trigger rule)")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    _add_backend(p)
    _add_identity(p)
    _add_tls(p)
    p.set_defaults(func=cmd_tr_run, needs_stop=True)

    p = trs.add_parser("attest", parents=[common], help="produce one signed report and exit")
    p.add_argument("--datastore", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--mode", choices=["compact", "manifest"], default="compact")
    p.add_argument("--out", type=Path, help="write the report envelope here")
    _add_backend(p)
    _add_identity(p)
    p.set_defaults(func=cmd_tr_attest)

    p = trs.add_parser("disclose", parents=[common], help="print inclusion proofs for selected items")
    p.add_argument("--datastore", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--id", required=True, action="append", help="evidence id (repeatable)")
    p.add_argument("--out", type=Path, help="also write the JSON here")
    p.set_defaults(func=cmd_tr_disclose)

    prh = sub.add_parser("prh", parents=[common], help="proof repository hub")
    prhs = prh.add_subparsers(dest="prh_command", required=True, metavar="ACTION")
    p = prhs.add_parser("serve", parents=[common], help="accept reports into the audit log")
    p.add_argument("--store", required=True, type=Path, help="log directory")
    p.add_argument("--listen", default="127.0.0.1:7443", help="HOST:PORT (port 0 picks a free one)")
    p.add_argument("--trust", required=True, type=Path, help="trust store JSON")
    p.add_argument("--admin-token", help="token for trust_add (or ORANATTEST_ADMIN_TOKEN)")
    p.add_argument("--port-file", type=Path, help="write the bound HOST:PORT here")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    _add_tls(p)
    p.set_defaults(func=cmd_prh_serve, needs_stop=True)

    p = sub.add_parser("verify", parents=[common], help="verify a report as a tenant")
    p.add_argument("kind", choices=["full", "field", "policy"])
    src = p.add_mutually_exclusive_group()
    src.add_argument("--report", type=Path, help="report envelope file")
    src.add_argument("--prh", help="fetch the report from this hub")
    p.add_argument("--platform", type=_hex32, help="platform id to fetch and to require")
    p.add_argument("--seq", type=int, help="fetch this log entry instead of the latest")
    p.add_argument("--trust", required=True, type=Path, help="trust store JSON")
    p.add_argument("--expectations", type=Path, help="tenant {id: digest} file")
    p.add_argument("--datastore", type=Path, help="tenant-held datastore copy (with --manifest)")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--policy", type=Path, help="policy JSON for 'verify policy'")
    p.add_argument("--disclosure", type=Path, help="inclusion-proof JSON from 'tr disclose'")
    p.add_argument("--id", help="evidence id for 'verify field'")
    p.add_argument("--equals", help="expected plaintext")
    p.add_argument("--matches", help="glob the plaintext must match")
    p.add_argument("--expected-hash", help="expected leaf digest (hex)")
    p.add_argument("--baseline", help="evidence id the item must equal")
    _add_tls(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None, *, stop: threading.Event | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "needs_stop", False):
            return args.func(args, stop or threading.Event())
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OranAttestError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
