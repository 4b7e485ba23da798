"""Render report data to PNG files next to the delimited outputs.

These helpers consume the tables and report dictionaries the CLI writes;
they never compute metrics themselves. The Agg backend keeps rendering
headless, and PNG metadata is pinned so reruns produce stable files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "knnfuse"}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)


def save_knn_heatmap(rows: list[dict], path) -> None:
    """Validation accuracy over the (k, tau) grid, one cell per pair."""
    ks = sorted({str(r["k"]) for r in rows}, key=lambda s: (s == "mean", len(s), s))
    taus = sorted({r["tau"] for r in rows})
    grid = np.full((len(ks), len(taus)), np.nan)
    for r in rows:
        grid[ks.index(str(r["k"])), taus.index(r["tau"])] = r["val_top1"]
    fig, ax = plt.subplots(figsize=(1.2 + 0.5 * len(taus), 1.0 + 0.4 * len(ks)))
    im = ax.imshow(grid, aspect="auto", origin="lower", cmap="viridis")
    ax.set_xticks(range(len(taus)), [f"{t:g}" for t in taus], rotation=45, ha="right")
    ax.set_yticks(range(len(ks)), ks)
    ax.set_xlabel("tau")
    ax.set_ylabel("k")
    ax.set_title("k-NN validation top-1")
    fig.colorbar(im, ax=ax, shrink=0.85)
    _save(fig, path)


def save_joint_summary(rows: list[dict], path) -> None:
    """Two panels: best fused accuracy per alpha, and the lr/wd landscape
    at the winning (factor, gamma, alpha)."""
    ok = [r for r in rows if not r.get("diverged") and math.isfinite(r["val_top1"])]
    if not ok:
        return
    best = max(ok, key=lambda r: r["val_top1"])
    alphas = sorted({r["alpha"] for r in ok})
    per_alpha = [max(r["val_top1"] for r in ok if r["alpha"] == a) for a in alphas]

    sub = [
        r
        for r in ok
        if r["alpha"] == best["alpha"]
        and r["factor"] == best["factor"]
        and r["gamma"] == best["gamma"]
    ]
    lrs = sorted({r["lr"] for r in sub})
    wds = sorted({r["wd"] for r in sub})
    grid = np.full((len(lrs), len(wds)), np.nan)
    for r in sub:
        grid[lrs.index(r["lr"]), wds.index(r["wd"])] = r["val_top1"]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(range(len(alphas)), per_alpha, marker="o")
    ax1.set_xticks(range(len(alphas)), [f"{a:g}" for a in alphas])
    ax1.set_xlabel("alpha")
    ax1.set_ylabel("best fused val top-1")
    ax1.set_title("reweighting strength")
    im = ax2.imshow(grid, aspect="auto", origin="lower", cmap="viridis")
    ax2.set_xticks(range(len(wds)), [f"{w:g}" for w in wds], rotation=45, ha="right")
    ax2.set_yticks(range(len(lrs)), [f"{l:g}" for l in lrs])
    ax2.set_xlabel("weight decay")
    ax2.set_ylabel("base lr")
    ax2.set_title(f"lr/wd at alpha={best['alpha']:g}")
    fig.colorbar(im, ax=ax2, shrink=0.85)
    _save(fig, path)


def save_ablation_curves(points: list[dict], path) -> None:
    """Test accuracy against resource fraction, one panel per sweep."""
    sweeps = sorted({p["sweep"] for p in points})
    fig, axes = plt.subplots(1, len(sweeps), figsize=(4.6 * len(sweeps), 3.4), squeeze=False)
    for ax, sweep in zip(axes[0], sweeps):
        rows = sorted((p for p in points if p["sweep"] == sweep), key=lambda p: p["fraction"])
        xs = [p["fraction"] for p in rows]
        for key, label in (("knn_top1", "k-NN"), ("clf_top1", "classifier"), ("joint_top1", "fused")):
            ax.plot(xs, [p[key] for p in rows], marker="o", label=label)
        ax.set_xlabel(f"{sweep} data fraction")
        ax.set_ylabel("test top-1")
        ax.set_title(f"{sweep} sweep")
        ax.grid(alpha=0.3)
        ax.legend()
    _save(fig, path)


def save_pr_curves(per_class_pr: dict, path) -> None:
    """Precision-recall curves, one line per requested class."""
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    for cls, points in sorted(per_class_pr.items(), key=lambda kv: int(kv[0])):
        recall = [p.recall for p in points]
        precision = [p.precision for p in points]
        ax.plot(recall, precision, marker=".", label=f"class {cls}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title("per-class precision-recall")
    _save(fig, path)
