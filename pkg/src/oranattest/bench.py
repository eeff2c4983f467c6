"""Latency benchmarks for the collect, commit, sign and verify pipeline."""

from __future__ import annotations

import csv
import io
import statistics
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import merkle
from .attestation import Mode, SigningBackend, TrustStore, make_report
from .evidence import collect, load_datastore
from .fixtures import generate_fixture
from .verifier import verify_full

PHASES = ("collect", "merkle", "sign", "verify", "total")

CSV_COLUMNS = (
    "n_items", "backend", "runs",
    *(f"t_{p}_{stat}_ms" for p in PHASES for stat in ("mean", "min", "max")),
    "t_update_mean_ms", "t_rebuild_mean_ms",
)


@dataclass(frozen=True)
class Stat:
    mean: float
    min: float
    max: float

    @classmethod
    def of(cls, samples: Sequence[float]) -> "Stat":
        return cls(statistics.fmean(samples), min(samples), max(samples))


@dataclass(frozen=True)
class BenchRecord:
    n_items: int
    backend: str
    runs: int
    collect: Stat
    merkle: Stat
    sign: Stat
    verify: Stat
    total: Stat
    update_mean: float
    rebuild_mean: float

    @property
    def t_merkle_ms(self) -> float:
        return self.merkle.mean

    @property
    def t_sign_ms(self) -> float:
        return self.sign.mean

    @property
    def t_verify_ms(self) -> float:
        return self.verify.mean

    @property
    def t_total_ms(self) -> float:
        return self.total.mean

    def row(self) -> list:
        out: list = [self.n_items, self.backend, self.runs]
        for p in PHASES:
            s: Stat = getattr(self, p)
            out += [round(s.mean, 4), round(s.min, 4), round(s.max, 4)]
        return out + [round(self.update_mean, 4), round(self.rebuild_mean, 4)]


def _ms(ns: int) -> float:
    return ns / 1e6


def bench_one(
    datastore: Path,
    manifest_path: Path,
    backend: SigningBackend,
    platform_id: bytes,
    runs: int = 10,
    backend_name: str = "software",
    clock: Callable[[], int] = time.perf_counter_ns,
) -> BenchRecord:
    from .evidence import EvidenceManifest

    manifest = EvidenceManifest.load(manifest_path)
    snapshot = load_datastore(datastore)
    trust = TrustStore()
    trust.add(platform_id, backend.public_key())
    samples: dict[str, list[float]] = {p: [] for p in PHASES}
    updates, rebuilds = [], []
    for _ in range(runs):
        t0 = clock()
        evidence = collect(manifest, snapshot)
        t1 = clock()
        root, tree = merkle.build_tree(evidence.leaf_digests())
        t2 = clock()
        report = make_report(root, evidence, backend, platform_id, mode=Mode.COMPACT)
        t3 = clock()
        result = verify_full(report, evidence, trust)
        t4 = clock()
        if not result.compliant:
            raise RuntimeError(f"benchmark pipeline failed verification: {result.summary()}")
        for name, a, b in (("collect", t0, t1), ("merkle", t1, t2), ("sign", t2, t3),
                           ("verify", t3, t4), ("total", t0, t4)):
            samples[name].append(_ms(b - a))

        changed = merkle.sha256(b"bench-change")
        index = len(evidence) // 2
        scratch = tree.copy()
        u0 = clock()
        scratch.update_leaf(index, changed)
        u1 = clock()
        leaves = evidence.leaf_digests()
        leaves[index] = changed
        merkle.build_tree(leaves)
        u2 = clock()
        updates.append(_ms(u1 - u0))
        rebuilds.append(_ms(u2 - u1))
    return BenchRecord(
        len(evidence), backend_name, runs,
        *(Stat.of(samples[p]) for p in PHASES),
        statistics.fmean(updates), statistics.fmean(rebuilds),
    )


def run_bench(
    n_list: Iterable[int],
    backend: SigningBackend,
    platform_id: bytes,
    runs: int = 10,
    seed: int = 0,
    backend_name: str = "software",
    workdir: str | Path | None = None,
) -> list[BenchRecord]:
    """Generate an ``n``-file fixture for every ``n`` and benchmark it."""
    records = []
    with tempfile.TemporaryDirectory(prefix="bench-") as tmp:
        base = Path(workdir) if workdir else Path(tmp)
        for n in n_list:
            fx = generate_fixture(base / f"n{n}", n, seed)
            records.append(bench_one(fx.datastore, fx.manifest_path, backend, platform_id, runs, backend_name))
    return records


def to_csv(records: Iterable[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def format_table(records: Iterable[BenchRecord]) -> str:
    head = f"{'items':>6} {'collect':>9} {'merkle':>9} {'sign':>9} {'verify':>9} {'total':>9} {'update':>9}"
    lines = [head + "   (mean ms)"]
    for r in records:
        lines.append(f"{r.n_items:>6} {r.collect.mean:>9.3f} {r.merkle.mean:>9.3f} {r.sign.mean:>9.3f} "
                     f"{r.verify.mean:>9.3f} {r.total.mean:>9.3f} {r.update_mean:>9.4f}")
    return "\n".join(lines)
