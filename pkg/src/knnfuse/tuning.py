"""Validation-split grid searches for the retrieval, loss, and fusion knobs.

The search protocol is deliberately staged rather than a full product:
(k, tau) are tuned on standalone k-NN validation accuracy; each
(factor, gamma, alpha, lr, wd) cell costs one training run; and lambda is
swept afterwards on cached per-query distributions, which is exact because
fusion is a pure function of the two cached posterior matrices.

All searches are exhaustive over their declared grids, and the returned
selection always equals the argmax of its report table. Tie-breaking is
toward the smaller value (k first, then tau; smallest lambda; first row in
iteration order for training runs).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, DivergedLoss
from .featurestore import FeatureBank
from .fusion import fuse
from .knn import KnnConfig, Metric, aggregate_posteriors, batch_topk, resolve_k
from .parametric import (
    LossConfig,
    OptimizerConfig,
    forward,
    init_model,
    train,
)
from . import knn as knn_mod
from . import parametric


def _default_tau_grid() -> tuple[float, ...]:
    values = {0.001, 1.0, 10.0}
    values.update(i / 100 for i in range(1, 11))
    values.update(i / 10 for i in range(1, 11))
    return tuple(sorted(values))


@dataclass(frozen=True)
class GridSpec:
    """Search ranges; the defaults are the full default protocol grids."""

    k: tuple = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, knn_mod.MEAN_PER_CLASS)
    tau: tuple = field(default_factory=_default_tau_grid)
    alpha: tuple = (0.01, 0.001, 0.0001)
    lam: tuple = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
    lr: tuple = (0.5, 0.25, 0.1, 0.05, 0.025, 0.01, 0.0025, 0.001)
    wd: tuple = (0.01, 0.001, 0.0001, 0.0)
    factor: tuple = ("nll",)
    gamma: tuple = (0.5, 2.0)

    def __post_init__(self):
        for name in ("k", "tau", "alpha", "lam", "lr", "wd", "factor", "gamma"):
            if not len(getattr(self, name)):
                raise ValueError(f"grid {name!r} must be nonempty")
        if any(t <= 0 for t in self.tau):
            raise ValueError("tau grid values must be positive")
        if any(not 0.0 <= l <= 1.0 for l in self.lam):
            raise ValueError("lambda grid values must lie in [0, 1]")

    @classmethod
    def from_json_dict(cls, data: dict) -> "GridSpec":
        """Build from a grids.json mapping; absent keys keep their defaults."""
        rename = {"lambda": "lam"}
        kwargs = {}
        for key, value in data.items():
            name = rename.get(key, key)
            if name not in cls.__dataclass_fields__:
                raise ValueError(f"unknown grid key {key!r}")
            kwargs[name] = tuple(value)
        return cls(**kwargs)


def _ordered_k(grid: GridSpec) -> list:
    explicit = sorted(k for k in grid.k if not isinstance(k, str))
    return explicit + [k for k in grid.k if isinstance(k, str)]


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(probs.argmax(axis=1) == labels))


@dataclass
class KnnTuneResult:
    k: int | str
    resolved_k: int
    tau: float
    val_top1: float
    rows: list[dict]


def tune_knn(
    train_bank: FeatureBank,
    val_bank: FeatureBank,
    grid: GridSpec,
    metric: Metric = Metric.SQEUCLIDEAN,
    workers: int | None = None,
) -> KnnTuneResult:
    """Exhaustive (k, tau) search by validation top-1.

    Both banks must already be preprocessed. Neighbors are retrieved once
    at the largest feasible k; every smaller k reads a prefix of the same
    ordering, which is exactly what retrieving at that k would return.
    Cells whose resolved k exceeds the bank size are recorded with NaN
    accuracy and never selected. Explicit k values are scanned ascending
    with "mean" last, so accuracy ties resolve to the smaller explicit k,
    then the smaller tau.
    """
    ks = _ordered_k(grid)
    resolved = {k: resolve_k(k, train_bank) for k in ks}
    feasible = [resolved[k] for k in ks if resolved[k] <= train_bank.n]
    if not feasible:
        raise DivergedLoss("no feasible k in grid")  # pragma: no cover
    kmax = max(feasible)
    idx, dist = batch_topk(
        val_bank.features, train_bank, kmax, metric=metric, workers=workers
    )
    neighbor_labels = train_bank.labels[idx]

    rows: list[dict] = []
    best = None
    for k in ks:
        rk = resolved[k]
        for tau in sorted(grid.tau):
            if rk > train_bank.n:
                rows.append({"k": k, "resolved_k": rk, "tau": tau, "val_top1": float("nan")})
                continue
            probs = aggregate_posteriors(
                neighbor_labels[:, :rk], dist[:, :rk], tau, train_bank.class_count
            )
            acc = _accuracy(probs, val_bank.labels)
            rows.append({"k": k, "resolved_k": rk, "tau": tau, "val_top1": acc})
            if best is None or acc > best["val_top1"]:
                best = rows[-1]
    return KnnTuneResult(
        k=best["k"],
        resolved_k=best["resolved_k"],
        tau=best["tau"],
        val_top1=best["val_top1"],
        rows=rows,
    )


def tune_lambda(
    val_knn_dists: np.ndarray,
    val_clf_dists: np.ndarray,
    labels: np.ndarray,
    lam_grid,
) -> tuple[float, list[dict]]:
    """Best interpolation weight on cached per-query distributions.

    Ties resolve to the smallest lambda. Sweeping cached distributions is
    equivalent to recomputing predictions per lambda: fusion depends on
    the inputs only through these two matrices.
    """
    p_knn = np.asarray(val_knn_dists, dtype=np.float64)
    p_clf = np.asarray(val_clf_dists, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p_knn.shape != p_clf.shape or p_knn.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"cached shapes disagree: {p_knn.shape}, {p_clf.shape}, {labels.shape}"
        )
    rows = []
    best_lam, best_acc = None, -1.0
    for lam in sorted(lam_grid):
        acc = _accuracy(fuse(p_knn, p_clf, lam), labels)
        rows.append({"lambda": lam, "val_top1": acc})
        if acc > best_acc:
            best_lam, best_acc = lam, acc
    return best_lam, rows


@dataclass
class JointTuneResult:
    knn: KnnTuneResult
    rows: list[dict]
    best: dict                 # highest fused validation top-1
    best_classifier: dict      # highest classifier-alone validation top-1
    p_gt: np.ndarray


def tune_joint(
    train_bank: FeatureBank,
    val_bank: FeatureBank,
    grid: GridSpec,
    opt_template: OptimizerConfig = OptimizerConfig(),
    metric: Metric = Metric.SQEUCLIDEAN,
    hidden: list[int] | None = None,
    knn_choice: tuple[int | str, float] | None = None,
    full_product: bool = False,
    workers: int | None = None,
) -> JointTuneResult:
    """Staged search over the loss and optimizer grids.

    (k, tau) come from tune_knn unless ``knn_choice`` pins them. Every
    (factor, gamma, alpha, lr, wd) cell trains one model from the same
    seeded init; lambda is then swept on cached validation distributions.
    Runs that diverge are recorded with NaN accuracy and skipped. The row
    with the best fused accuracy is ``best``; ``best_classifier`` tracks
    the best classifier-alone row, because the classifier that fuses best
    is not always the strongest on its own.

    ``full_product=True`` abandons the staging and crosses every feasible
    (k, tau) cell with the training grids; expect |k| * |tau| times the
    training cost.
    """
    if full_product:
        return _tune_joint_full_product(
            train_bank, val_bank, grid, opt_template, metric, hidden, workers
        )
    if knn_choice is None:
        knn_tuned = tune_knn(train_bank, val_bank, grid, metric=metric, workers=workers)
    else:
        k, tau = knn_choice
        knn_tuned = KnnTuneResult(
            k=k, resolved_k=resolve_k(k, train_bank), tau=tau, val_top1=float("nan"), rows=[]
        )
    knn_cfg = KnnConfig(k=knn_tuned.k, tau=knn_tuned.tau, metric=metric)
    _, p_gt = knn_mod.loo_posteriors(train_bank, knn_cfg, workers=workers)

    idx, dist = batch_topk(
        val_bank.features, train_bank, knn_tuned.resolved_k, metric=metric, workers=workers
    )
    val_knn = aggregate_posteriors(
        train_bank.labels[idx], dist, knn_tuned.tau, train_bank.class_count
    )

    rows: list[dict] = []
    best, best_clf = None, None
    for factor in grid.factor:
        gammas = grid.gamma if factor == "focal" else (None,)
        for gamma in gammas:
            for alpha in grid.alpha:
                loss_cfg = LossConfig(
                    alpha=alpha, factor=factor, gamma=gamma if gamma is not None else 2.0
                )
                for lr in grid.lr:
                    for wd in grid.wd:
                        row = {
                            "k": knn_tuned.k,
                            "resolved_k": knn_tuned.resolved_k,
                            "tau": knn_tuned.tau,
                            "factor": factor,
                            "gamma": gamma,
                            "alpha": alpha,
                            "lr": lr,
                            "wd": wd,
                        }
                        opt_cfg = replace(opt_template, base_lr=lr, weight_decay=wd)
                        model = init_model(
                            train_bank.dim,
                            train_bank.class_count,
                            hidden=hidden,
                            seed=opt_cfg.seed,
                            prior_pi=opt_cfg.prior_pi,
                        )
                        started = time.perf_counter()
                        try:
                            model, _ = train(
                                model, train_bank, p_gt, loss_cfg, opt_cfg, val_bank=None
                            )
                        except DivergedLoss:
                            row.update(
                                runtime_s=time.perf_counter() - started,
                                clf_val_top1=float("nan"),
                                **{"lambda": float("nan")},
                                val_top1=float("nan"),
                                diverged=True,
                            )
                            rows.append(row)
                            continue
                        runtime = time.perf_counter() - started
                        _, val_clf = forward(model, val_bank.features.astype(np.float64))
                        lam, _ = tune_lambda(val_knn, val_clf, val_bank.labels, grid.lam)
                        fused_acc = _accuracy(
                            fuse(val_knn, val_clf, lam), val_bank.labels
                        )
                        row.update(
                            runtime_s=runtime,
                            clf_val_top1=_accuracy(val_clf, val_bank.labels),
                            **{"lambda": lam},
                            val_top1=fused_acc,
                            diverged=False,
                        )
                        rows.append(row)
                        if best is None or fused_acc > best["val_top1"]:
                            best = row
                        if best_clf is None or row["clf_val_top1"] > best_clf["clf_val_top1"]:
                            best_clf = row
    if best is None:
        raise DivergedLoss("every grid cell diverged")
    return JointTuneResult(
        knn=knn_tuned, rows=rows, best=best, best_classifier=best_clf, p_gt=p_gt
    )


def _tune_joint_full_product(
    train_bank, val_bank, grid, opt_template, metric, hidden, workers
) -> JointTuneResult:
    rows: list[dict] = []
    best_result = None
    for k in _ordered_k(grid):
        if resolve_k(k, train_bank) > train_bank.n - 1:
            continue  # infeasible for the leave-one-out pass
        for tau in sorted(grid.tau):
            result = tune_joint(
                train_bank,
                val_bank,
                grid,
                opt_template,
                metric=metric,
                hidden=hidden,
                knn_choice=(k, tau),
                workers=workers,
            )
            rows.extend(result.rows)
            if best_result is None or result.best["val_top1"] > best_result.best["val_top1"]:
                best_result = result
    if best_result is None:
        raise DivergedLoss("no feasible (k, tau) cell in the grid")
    best = max(rows, key=lambda r: (not r["diverged"], r.get("val_top1", float("-inf"))))
    best_clf = max(rows, key=lambda r: (not r["diverged"], r.get("clf_val_top1", float("-inf"))))
    return JointTuneResult(
        knn=best_result.knn,
        rows=rows,
        best=best,
        best_classifier=best_clf,
        p_gt=best_result.p_gt,
    )


@dataclass
class BaseTuneResult:
    rows: list[dict]
    best: dict
    model: parametric.LinearModel


def tune_base(
    train_bank: FeatureBank,
    val_bank: FeatureBank,
    grid: GridSpec,
    opt_template: OptimizerConfig = OptimizerConfig(),
    hidden: list[int] | None = None,
) -> BaseTuneResult:
    """Plain-classifier (lr, wd) search; the alpha = 0 corner of the grid."""
    loss_cfg = LossConfig(alpha=0.0)
    rows, best, best_model = [], None, None
    for lr in grid.lr:
        for wd in grid.wd:
            opt_cfg = replace(opt_template, base_lr=lr, weight_decay=wd)
            model = init_model(
                train_bank.dim,
                train_bank.class_count,
                hidden=hidden,
                seed=opt_cfg.seed,
                prior_pi=opt_cfg.prior_pi,
            )
            started = time.perf_counter()
            try:
                model, _ = train(model, train_bank, None, loss_cfg, opt_cfg, val_bank=None)
            except DivergedLoss:
                rows.append(
                    {"lr": lr, "wd": wd, "val_top1": float("nan"),
                     "runtime_s": time.perf_counter() - started, "diverged": True}
                )
                continue
            _, val_clf = forward(model, val_bank.features.astype(np.float64))
            row = {
                "lr": lr,
                "wd": wd,
                "val_top1": _accuracy(val_clf, val_bank.labels),
                "runtime_s": time.perf_counter() - started,
                "diverged": False,
            }
            rows.append(row)
            if best is None or row["val_top1"] > best["val_top1"]:
                best, best_model = row, model
    if best is None:
        raise DivergedLoss("every grid cell diverged")
    return BaseTuneResult(rows=rows, best=best, model=best_model)
