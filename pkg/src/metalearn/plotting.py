"""Static figures written next to the CSV they were drawn from."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {
    "meta_test_loss": "meta-test MSE",
    "ser": "symbol error rate",
    "nmse": "NMSE",
    "hypergrad_norm_sq": r"$\|\nabla F(\theta)\|^2$",
    "bound": "bound",
}


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _floats(rows, key):
    return [float(r[key]) for r in rows]


def _save(fig, csv_path, suffix=""):
    out = Path(csv_path).with_suffix("")
    out = out.with_name(out.name + suffix + ".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_run(csv_path, benchmark):
    """Learning curve (or gap/bound scatter for the bounds benchmark)."""
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if benchmark == "bounds":
        gap, bnd = _floats(rows, "gap"), _floats(rows, "bound")
        mgap, mbnd = _floats(rows, "meta_gap"), _floats(rows, "meta_bound")
        ax.scatter(bnd, gap, s=12, label="single task")
        ax.scatter(mbnd, mgap, s=12, marker="x", label="meta")
        top = max(bnd + mbnd + [1e-3])
        ax.plot([0, top], [0, top], "k--", lw=0.8)
        ax.set_xlabel("bound")
        ax.set_ylabel("enumerated gap")
        ax.legend(frameon=False)
    else:
        metric = list(rows[0].keys())[2] if rows else "value"
        it = _floats(rows, "iteration")
        ax.plot(it, _floats(rows, metric), marker="o", ms=3)
        ax.set_xlabel("iteration")
        ax.set_ylabel(LABELS.get(metric, metric))
        if benchmark == "bilevel_quadratic":
            ax.set_yscale("log")
    ax.set_title(Path(csv_path).stem, fontsize=9)
    return _save(fig, csv_path)


def plot_sweep(csv_path, axis, metric):
    """Final metric of every sweep point against the swept value."""
    rows = read_csv(csv_path)
    last = {}
    for r in rows:
        last[int(r["sweep_index"])] = r
    pts = [last[k] for k in sorted(last)]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([float(r[axis]) for r in pts], [float(r[metric]) for r in pts], marker="o")
    ax.set_xlabel(axis)
    ax.set_ylabel(LABELS.get(metric, metric))
    if axis in ("K", "N") and len(pts) > 1:
        ax.set_xscale("log")
        ax.set_xticks([float(r[axis]) for r in pts], [r[axis] for r in pts])
        ax.minorticks_off()
    ax.ticklabel_format(axis="y", useOffset=False)
    ax.set_title(Path(csv_path).stem, fontsize=9)
    return _save(fig, csv_path)
