"""Tabular reports and figures for the CLI.

Tables are the primary machine-readable output (CSV); each figure writer
renders the matching PNG next to them. All figure code runs on the Agg
backend so reports work headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .culling import SparsityReport
from .sim import SimMetrics, SimTrace
from .transfer import VolumeReport


def write_sparsity_csv(report: SparsityReport, view_ids: list[int], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view_id", "rho"])
        for vid, rho in zip(view_ids, report.rho):
            w.writerow([vid, f"{rho:.8f}"])
        w.writerow([])
        w.writerow(["mean_rho", f"{report.mean_rho:.8f}"])
        w.writerow(["max_rho", f"{report.max_rho:.8f}"])


def write_volume_csv(report: VolumeReport, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["microbatch", "h2d_bytes", "d2h_bytes", "copy_bytes", "writeback_bytes"])
        rows = zip(report.per_microbatch_h2d, report.per_microbatch_d2h,
                   report.per_microbatch_copy, report.per_microbatch_writeback)
        for i, (h2d, d2h, cp, wb) in enumerate(rows, start=1):
            w.writerow([i, h2d, d2h, cp, wb])
        w.writerow(["total", report.host_to_device_bytes, report.device_to_host_bytes,
                    report.device_copy_bytes, report.writeback_bytes])


def write_compare_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("nothing to compare")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ------------------------------------------------------------------ figures

def fig_sparsity_cdf(report: SparsityReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(report.cdf_x, report.cdf_y, where="post")
    ax.set_xlabel("fraction of Gaussians in frustum (rho)")
    ax.set_ylabel("fraction of views")
    ax.set_title("Sparsity CDF")
    ax.set_xlim(0, max(1e-3, float(np.max(report.cdf_x)) * 1.1))
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_volume_bars(rows: list[dict], path: str | Path) -> None:
    """Grouped transfer-volume bars per strategy row from the compare table."""
    labels = [r["strategy"] for r in rows]
    h2d = [r["h2d_bytes"] / 1e6 for r in rows]
    d2h = [r["d2h_bytes"] / 1e6 for r in rows]
    wb = [r["writeback_bytes"] / 1e6 for r in rows]
    x = np.arange(len(labels))
    width = 0.28

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - width, h2d, width, label="host to device")
    ax.bar(x, d2h, width, label="device to host")
    ax.bar(x + width, wb, width, label="writeback")
    ax.set_xticks(x, labels)
    ax.set_ylabel("MB per batch")
    ax.set_title("Transfer volume by ordering strategy")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_volume_per_microbatch(report: VolumeReport, path: str | Path) -> None:
    b = len(report.per_microbatch_h2d)
    x = np.arange(1, b + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(x, np.asarray(report.per_microbatch_h2d) / 1e6, marker="o", label="load")
    ax.plot(x, np.asarray(report.per_microbatch_d2h) / 1e6, marker="s", label="store")
    ax.plot(x, np.asarray(report.per_microbatch_copy) / 1e6, marker="^", label="device copy")
    ax.set_xlabel("plan entry")
    ax.set_ylabel("MB")
    ax.set_title("Per-microbatch transfer volume")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


_KIND_COLORS = {
    "SCHED": "#888888",
    "FWD": "#4878d0",
    "BWD": "#6acc64",
    "LD": "#d65f5f",
    "ST": "#ee854a",
    "ADAM": "#956cb4",
}


def fig_gantt(trace: SimTrace, path: str | Path) -> None:
    lanes = {"compute": 0, "comm": 1, "host_adam": 2}
    fig, ax = plt.subplots(figsize=(8, 2.8))
    seen = set()
    for e in trace.events:
        y = lanes[e.resource]
        label = e.kind if e.kind not in seen else None
        seen.add(e.kind)
        ax.barh(y, e.end - e.start, left=e.start, height=0.6,
                color=_KIND_COLORS.get(e.kind, "#333333"), label=label,
                edgecolor="white", linewidth=0.3)
    ax.set_yticks(list(lanes.values()), list(lanes.keys()))
    ax.invert_yaxis()
    ax.set_xlabel("seconds")
    ax.set_title(f"Pipeline trace ({trace.mode} mode)")
    ax.legend(fontsize=7, ncol=6, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_idle_cdf(metrics_by_label: dict[str, SimMetrics], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, m in metrics_by_label.items():
        ax.step(m.idle_cdf_x, m.idle_cdf_y, where="post", label=label)
    ax.set_xlabel("compute idle fraction per window")
    ax.set_ylabel("fraction of windows")
    ax.set_title("GPU idle-rate CDF")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
