"""Registration ingest benchmark for a single-node in-memory ledger.

Client threads submit pre-signed registrations (a 64-hex-digit ManifestID
plus a copyright line) through the ledger's serialized append point.
Roots are signed on the ledger's batch cadence while the run is in
progress. The report rows mirror the nodes / throughput / latency layout
used for the ledger's published performance table.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import os
import platform
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

from .. import digest as _digest
from ..manifest import TypedDigest
from ..pki import EkuPurpose, alliance_layout, generate_test_pki
from .log import Ledger, sign_registration, verify_receipt

REQUIRED_TX_PER_SEC = 11_575  # 1 billion entries/day
SAMPLE_COPYRIGHT = "Copyright (c) CompanyName Corporation. All rights reserved."


@dataclass
class BenchRow:
    nodes: int
    clients: int
    duration_s: float
    entries: int
    tx_per_sec: float
    mean_latency_ms: float
    p99_latency_ms: float
    roots_signed: int


@dataclass
class BenchReport:
    rows: list
    required_tx_per_sec: int = REQUIRED_TX_PER_SEC
    audited_receipts: int = 0
    audit_failures: int = 0
    environment: dict = field(default_factory=dict)

    @property
    def tx_per_sec(self) -> float:
        return self.rows[0].tx_per_sec

    @property
    def mean_latency_ms(self) -> float:
        return self.rows[0].mean_latency_ms

    @property
    def entries(self) -> int:
        return self.rows[0].entries

    @property
    def meets_requirement(self) -> bool:
        return self.tx_per_sec >= self.required_tx_per_sec

    @property
    def shortfall_tx_per_sec(self) -> float:
        return max(0.0, self.required_tx_per_sec - self.tx_per_sec)

    def to_dict(self) -> dict:
        return {
            "tx_per_sec": round(self.tx_per_sec, 1),
            "mean_latency_ms": round(self.mean_latency_ms, 4),
            "entries": self.entries,
            "required_tx_per_sec": self.required_tx_per_sec,
            "meets_requirement": self.meets_requirement,
            "shortfall_tx_per_sec": round(self.shortfall_tx_per_sec, 1),
            "audited_receipts": self.audited_receipts,
            "audit_failures": self.audit_failures,
            "rows": [asdict(r) for r in self.rows],
            "environment": self.environment,
        }


def _bench_identity():
    now = dt.datetime.now(dt.timezone.utc)
    pki = generate_test_pki(alliance_layout(), not_before=now - dt.timedelta(days=1), not_after=now + dt.timedelta(days=1))
    return pki, pki.chain(pki.leaf_names[0])


def benchmark_ingest(
    clients: int = 4,
    duration: float = 2.0,
    *,
    pool_size: int = 512,
    audit_samples: int = 50,
    seed: int = 0,
    ledger: Optional[Ledger] = None,
) -> BenchReport:
    """Hammer one ledger with ``clients`` threads for ``duration`` seconds."""
    rng = random.Random(seed)
    pki, chain = _bench_identity()
    if ledger is None:
        ledger = Ledger(trust_policy=pki.policy(EkuPurpose.MANIFEST_SIGNING))
    # signing is client-side work, so it happens before the clock starts
    pool = []
    for _ in range(pool_size):
        mid = TypedDigest("sha256", _digest.digest(rng.randbytes(32)))
        pool.append((mid, sign_registration(chain, mid, SAMPLE_COPYRIGHT)))
    ledger.append_registration(pool[0][0], SAMPLE_COPYRIGHT, pool[0][1], chain)  # warm the chain cache
    start_size, start_roots = ledger.size, len(ledger.signed_roots)

    latencies: list = [[] for _ in range(clients)]
    barrier = threading.Barrier(clients + 1)
    stop_at = [0.0]

    def client(k: int):
        mine = latencies[k]
        i = k
        barrier.wait()
        deadline = stop_at[0]
        clock = time.perf_counter
        while True:
            t0 = clock()
            if t0 >= deadline:
                return
            mid, sig = pool[i % pool_size]
            ledger.append_registration(mid, SAMPLE_COPYRIGHT, sig, chain)
            mine.append(clock() - t0)
            i += clients

    threads = [threading.Thread(target=client, args=(k,), daemon=True) for k in range(clients)]
    for t in threads:
        t.start()
    stop_at[0] = time.perf_counter() + duration
    t_start = time.perf_counter()
    barrier.wait()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t_start

    entries = ledger.size - start_size
    flat = sorted(x for per in latencies for x in per)
    mean = sum(flat) / len(flat) if flat else 0.0
    p99 = flat[min(len(flat) - 1, int(0.99 * len(flat)))] if flat else 0.0
    row = BenchRow(
        nodes=1, clients=clients, duration_s=round(elapsed, 4), entries=entries,
        tx_per_sec=entries / elapsed if elapsed else 0.0, mean_latency_ms=mean * 1e3,
        p99_latency_ms=p99 * 1e3, roots_signed=len(ledger.signed_roots) - start_roots,
    )

    ledger.sign_root()
    failures = 0
    picks = [rng.randrange(start_size, ledger.size) for _ in range(min(audit_samples, entries))]
    for idx in picks:
        if not verify_receipt(ledger.issue_receipt(idx), ledger.service_public_key):
            failures += 1
    env = {"cpu_count": os.cpu_count(), "python": platform.python_version()}
    return BenchReport([row], audited_receipts=len(picks), audit_failures=failures, environment=env)


def write_report(report: BenchReport, outdir: str, *, plot: bool = True) -> dict:
    """Write report.json, report.csv (and report.png) under ``outdir``; returns the paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"json": os.path.join(outdir, "report.json"), "csv": os.path.join(outdir, "report.csv")}
    with open(paths["json"], "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["nodes", "throughput_tx_per_s", "avg_latency_ms", "entries", "clients", "duration_s"])
        for r in report.rows:
            w.writerow([r.nodes, f"{r.tx_per_sec:.1f}", f"{r.mean_latency_ms:.4f}", r.entries, r.clients, r.duration_s])
    if plot:
        from ..plotting import plot_bench

        paths["png"] = os.path.join(outdir, "report.png")
        plot_bench(report, paths["png"])
    return paths
