"""Figures written next to the CSV/Markdown outputs (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import NO_ATTACK, EvalReport  # noqa: E402


def _save(fig, path: Path, note: str) -> Path:
    path = Path(path)
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=110, metadata={"Software": None, "Description": note})
    plt.close(fig)
    return path


def plot_robustness(report: EvalReport, path, kinds=("fgsm", "pgd", "ensemble")) -> Path:
    """BCA against perturbation size, one panel per attack kind, one line per method."""
    present = [k for k in kinds if any(c.attack == k for c in report.cells)]
    fig, axes = plt.subplots(1, max(1, len(present)), figsize=(4.2 * max(1, len(present)), 3.4), sharey=True, squeeze=False)
    for ax, kind in zip(axes[0], present):
        for m in report.methods():
            base = report.get(m, NO_ATTACK).bca
            pts = sorted((c.eps, c.bca) for c in report.cells if c.method == m and c.attack == kind)
            ax.plot([0.0] + [p[0] for p in pts], [base] + [p[1] for p in pts], marker="o", label=m)
        ax.set_title(kind.upper() if kind != "ensemble" else "Ensemble")
        ax.set_xlabel("epsilon (x signal std)")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("BCA")
    axes[0][-1].legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return _save(fig, path, f"config_hash={report.meta.get('config_hash', '')} seed={report.meta.get('seed', '')}")


def plot_online(rows: list[dict], path, cfg_hash: str = "") -> Path:
    """Offline versus streaming-alignment benign BCA per method."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(rows) + 2), 3.4))
    xs = range(len(rows))
    ax.bar([x - 0.2 for x in xs], [r["offline"] for r in rows], width=0.4, label="offline")
    ax.bar([x + 0.2 for x in xs], [r["online"] for r in rows], width=0.4, label="online")
    ax.set_xticks(list(xs), [r["method"] for r in rows], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("BCA")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path, f"config_hash={cfg_hash}")


def plot_sweep(records: list[dict], path, axis: str, cfg_hash: str = "") -> Path:
    """One panel per method: BCA against the swept quantity, one line per epsilon."""
    methods = list(dict.fromkeys(r["method"] for r in records))
    fig, axes = plt.subplots(1, max(1, len(methods)), figsize=(4.2 * max(1, len(methods)), 3.4), sharey=True, squeeze=False)
    for ax, m in zip(axes[0], methods):
        for eps in sorted({r["eps"] for r in records if r["method"] == m}):
            pts = sorted((r["x"], r["bca"]) for r in records if r["method"] == m and r["eps"] == eps)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"eps={eps:g}")
        ax.set_title(m)
        ax.set_xlabel(axis)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("BCA")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path, f"config_hash={cfg_hash}")
