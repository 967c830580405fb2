"""Figures for the CLI report paths (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_bench(report, path: str) -> None:
    """Throughput per configuration against the required load line."""
    fig, (ax_tp, ax_lat) = plt.subplots(1, 2, figsize=(9, 3.6))
    labels = [f"{r.nodes} node, {r.clients} clients" for r in report.rows]
    ax_tp.bar(labels, [r.tx_per_sec for r in report.rows], color="#4c72b0")
    ax_tp.axhline(report.required_tx_per_sec, color="#c44e52", linestyle="--",
                  label=f"required {report.required_tx_per_sec:,} tx/s")
    ax_tp.set_ylabel("throughput (tx/s)")
    ax_tp.legend(loc="lower right")
    ax_lat.bar(labels, [r.mean_latency_ms for r in report.rows], color="#55a868")
    ax_lat.set_ylabel("avg latency (ms)")
    fig.suptitle("ledger ingest")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_correlations(correlations, path: str, threshold: float | None = None) -> None:
    """Per-bit detector correlations from a watermark extraction."""
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(range(len(correlations)), correlations, ".", markersize=2)
    if threshold is not None:
        ax.axhline(threshold, color="#c44e52", linewidth=0.8)
        ax.axhline(-threshold, color="#c44e52", linewidth=0.8)
    ax.set_xlabel("bit")
    ax.set_ylabel("normalized correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
