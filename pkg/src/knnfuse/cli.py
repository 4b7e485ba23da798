"""Single entry point: ingest, split, knn, train, predict, grid, eval, ablate.

Every run writes a reproducibility manifest beside each output file. Exit
codes: 0 on success, 2 when the arguments do not match a subcommand
grammar (argparse's convention), 1 on a documented runtime error.

Parallelism policy: BLAS pools are pinned to one thread for the whole
command and speed comes from data-parallel query blocks, so outputs are
byte-identical at any ``--threads`` value (flag, else KNNFUSE_THREADS env
var, else the core count).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import featurestore as fs
from .errors import KnnfuseError, LengthMismatch
from .evalreport import build_report, write_report
from .fusion import FusionConfig, PredictMode, fuse, predict
from .knn import (
    KnnConfig,
    Metric,
    aggregate_posteriors,
    batch_topk,
    loo_posteriors,
    resolve_k,
)
from .manifest import derive_seed, write_manifests
from .parametric import (
    LossConfig,
    OptimizerConfig,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tuning import GridSpec, tune_base, tune_joint, tune_knn


def _parse_k(value: str):
    if value == "mean":
        return "mean"
    return int(value)


def _parse_float_list(value: str) -> list[float]:
    return [float(v) for v in value.split(",") if v != ""]


def _parse_int_list(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v != ""]


def _load_prepped(bank_path, queries_path, recipe, fmt="bin"):
    """Fit preprocessing on the bank, apply it to bank and queries."""
    bank = fs.load_bank(bank_path, fmt)
    stats = fs.fit_preprocess(bank, recipe)
    bank_p = fs.preprocess_bank(bank, stats)
    queries = fs.load_bank(queries_path, fmt)
    queries_p = fs.preprocess_bank(queries, stats)
    return bank_p, queries_p


def _write_preds(path, ids, probs, top1) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sample_id in enumerate(ids):
            fh.write(
                json.dumps(
                    {
                        "id": sample_id,
                        "probs": [float(v) for v in probs[i]],
                        "top1": int(top1[i]),
                    }
                )
                + "\n"
            )


def _read_preds(path):
    ids, probs, top1 = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ids.append(row["id"])
            probs.append(row["probs"])
            top1.append(row["top1"])
    if not ids:
        raise LengthMismatch("predictions file is empty (0 rows)")
    return ids, np.asarray(probs, dtype=np.float64), np.asarray(top1, dtype=np.int64)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    bank = fs.load_bank(args.input, args.format, class_count=args.class_count)
    fs.write_bank(bank, args.out, args.out_format)
    write_manifests(
        "ingest",
        {
            "format": args.format,
            "out_format": args.out_format,
            "class_count": bank.class_count,
            "n": bank.n,
            "dim": bank.dim,
        },
        {"input": args.input},
        [args.out],
    )
    print(f"ingest: n={bank.n} D={bank.dim} C={bank.class_count} -> {args.out}")
    return 0


def _cmd_split(args) -> int:
    bank = fs.load_bank(args.bank, args.format)
    sub_seed = derive_seed(args.seed, "subsample")
    if args.fraction is not None and args.fraction < 1.0:
        bank = fs.subsample(bank, args.fraction, sub_seed)
    fractions = _parse_float_list(args.split)
    if len(fractions) != 2:
        raise LengthMismatch(f"--split needs train,val fractions, got {args.split!r}")
    spec = fs.SplitSpec(
        train_fraction=fractions[0],
        val_fraction=fractions[1],
        seed=derive_seed(args.seed, "split"),
        stratified=not args.no_stratify,
    )
    parts = fs.split(bank, spec)
    outputs = []
    for name, part in zip(("train", "val", "test"), parts):
        if part is None:
            continue
        out = f"{args.out_prefix}.{name}.fbnk"
        fs.write_bank(part, out, "bin")
        outputs.append(out)
        print(f"split: {name} n={part.n}")
    write_manifests(
        "split",
        {
            "split": args.split,
            "seed": args.seed,
            "split_seed": spec.seed,
            "subsample_seed": sub_seed,
            "stratified": spec.stratified,
            "fraction": args.fraction,
        },
        {"bank": args.bank},
        outputs,
    )
    return 0


def _cmd_knn(args) -> int:
    bank_p, queries_p = _load_prepped(args.bank, args.queries, fs.Recipe(args.recipe))
    k = resolve_k(args.k, bank_p)
    idx, dist = batch_topk(queries_p.features, bank_p, k, metric=Metric(args.metric))
    probs = aggregate_posteriors(bank_p.labels[idx], dist, args.tau, bank_p.class_count)
    top1 = probs.argmax(axis=1)
    _write_preds(args.out, queries_p.ids, probs, top1)
    write_manifests(
        "knn",
        {
            "k": args.k,
            "resolved_k": k,
            "tau": args.tau,
            "metric": args.metric,
            "recipe": args.recipe,
        },
        {"bank": args.bank, "queries": args.queries},
        [args.out],
    )
    print(f"knn: wrote {len(queries_p.ids)} predictions -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    recipe = fs.Recipe(args.recipe)
    bank = fs.load_bank(args.bank)
    stats = fs.fit_preprocess(bank, recipe)
    bank_p = fs.preprocess_bank(bank, stats)
    val_p = None
    if args.val:
        val_p = fs.preprocess_bank(fs.load_bank(args.val), stats)

    knn_cfg = KnnConfig(k=args.k, tau=args.tau, metric=Metric(args.metric))
    p_gt = None
    if args.alpha > 0:
        _, p_gt = loo_posteriors(bank_p, knn_cfg)
    loss_cfg = LossConfig(alpha=args.alpha, factor=args.factor, gamma=args.gamma)
    opt_cfg = OptimizerConfig(
        base_lr=args.lr,
        batch_size=args.batch_size,
        momentum=args.momentum,
        weight_decay=args.wd,
        warmup_epochs=args.warmup,
        total_epochs=args.epochs,
        seed=derive_seed(args.seed, "train"),
        prior_pi=args.prior_pi,
    )
    model = init_model(
        bank_p.dim,
        bank_p.class_count,
        hidden=args.hidden,
        seed=derive_seed(args.seed, "init"),
        prior_pi=args.prior_pi,
    )
    model, log = train(model, bank_p, p_gt, loss_cfg, opt_cfg, val_bank=val_p)
    for entry in log.epochs:
        val_part = "" if entry.val_top1 is None else f" val_top1={entry.val_top1:.4f}"
        print(f"epoch {entry.epoch:3d} loss={entry.train_loss:.6f} lr={entry.lr:.6g}{val_part}")

    config = {
        "alpha": args.alpha,
        "factor": args.factor,
        "gamma": args.gamma,
        "k": args.k,
        "tau": args.tau,
        "metric": args.metric,
        "recipe": args.recipe,
        "lr": args.lr,
        "wd": args.wd,
        "epochs": args.epochs,
        "warmup": args.warmup,
        "batch_size": args.batch_size,
        "momentum": args.momentum,
        "prior_pi": args.prior_pi,
        "hidden": args.hidden or [],
        "seed": args.seed,
        "init_seed": derive_seed(args.seed, "init"),
        "train_seed": opt_cfg.seed,
        "class_count": bank_p.class_count,
    }
    save_checkpoint(model, args.out, extra=config)
    inputs = {"bank": args.bank}
    if args.val:
        inputs["val"] = args.val
    write_manifests("train", config, inputs, [args.out])
    return 0


def _cmd_predict(args) -> int:
    mode = PredictMode(args.mode)
    model, extra = (None, {})
    if mode is not PredictMode.KNN:
        if not args.model:
            raise LengthMismatch(f"mode {mode.value} requires --model")
        model, extra = load_checkpoint(args.model)
    recipe = fs.Recipe(args.recipe or extra.get("recipe", "l2-center"))
    metric = Metric(args.metric or extra.get("metric", "sqeuclidean"))
    k = args.k if args.k is not None else extra.get("k", "mean")
    tau = args.tau if args.tau is not None else extra.get("tau", 0.1)

    bank_p, queries_p = _load_prepped(args.bank, args.queries, recipe)
    cfg = FusionConfig(
        lam=args.lam, knn=KnnConfig(k=k, tau=tau, metric=metric), classifier=model
    )
    probs, top1 = predict(queries_p, bank_p, cfg, mode=mode)
    _write_preds(args.out, queries_p.ids, probs, top1)
    inputs = {"bank": args.bank, "queries": args.queries}
    if args.model:
        inputs["model"] = args.model
    write_manifests(
        "predict",
        {
            "mode": mode.value,
            "lambda": args.lam,
            "k": k,
            "tau": tau,
            "metric": metric.value,
            "recipe": recipe.value,
        },
        inputs,
        [args.out],
    )
    print(f"predict[{mode.value}]: wrote {len(queries_p.ids)} predictions -> {args.out}")
    return 0


def _write_rows_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in columns})


def _cmd_grid(args) -> int:
    recipe = fs.Recipe(args.recipe)
    train_bank = fs.load_bank(args.train)
    stats = fs.fit_preprocess(train_bank, recipe)
    train_p = fs.preprocess_bank(train_bank, stats)
    val_p = fs.preprocess_bank(fs.load_bank(args.val), stats)

    if args.grids:
        with open(args.grids, "r", encoding="utf-8") as fh:
            grid = GridSpec.from_json_dict(json.load(fh))
    else:
        grid = GridSpec()
    if args.lambda_include_zero and 0.0 not in grid.lam:
        grid = GridSpec(**{**_grid_dict(grid), "lam": (0.0, *grid.lam)})

    opt_template = OptimizerConfig(
        batch_size=args.batch_size,
        warmup_epochs=args.warmup,
        total_epochs=args.epochs,
        momentum=args.momentum,
        seed=derive_seed(args.seed, "tune"),
        prior_pi=args.prior_pi,
    )
    metric = Metric(args.metric)
    figure_path = None
    summary: dict = {"task": args.task}

    if args.task == "knn":
        result = tune_knn(train_p, val_p, grid, metric=metric)
        columns = ["k", "resolved_k", "tau", "val_top1"]
        _write_rows_csv(args.out, result.rows, columns)
        summary.update(best_k=result.k, best_tau=result.tau, best_val_top1=result.val_top1)
        if not args.no_figures:
            figure_path = str(args.out) + ".heatmap.png"
            from . import figures

            figures.save_knn_heatmap(result.rows, figure_path)
    elif args.task == "base":
        result = tune_base(train_p, val_p, grid, opt_template, hidden=args.hidden)
        columns = ["lr", "wd", "val_top1", "runtime_s", "diverged"]
        _write_rows_csv(args.out, result.rows, columns)
        summary.update(best=result.best)
    else:
        knn_choice = None
        if args.k is not None and args.tau is not None:
            knn_choice = (args.k, args.tau)
        result = tune_joint(
            train_p,
            val_p,
            grid,
            opt_template,
            metric=metric,
            hidden=args.hidden,
            knn_choice=knn_choice,
            full_product=args.full_product,
        )
        columns = [
            "k",
            "resolved_k",
            "tau",
            "factor",
            "gamma",
            "alpha",
            "lr",
            "wd",
            "lambda",
            "clf_val_top1",
            "val_top1",
            "runtime_s",
            "diverged",
        ]
        _write_rows_csv(args.out, result.rows, columns)
        summary.update(best=result.best, best_classifier=result.best_classifier)
        if not args.no_figures:
            figure_path = str(args.out) + ".summary.png"
            from . import figures

            figures.save_joint_summary(result.rows, figure_path)

    outputs = [args.out] + ([figure_path] if figure_path else [])
    write_manifests(
        "grid",
        {
            "task": args.task,
            "grids": _grid_dict(grid),
            "metric": args.metric,
            "recipe": args.recipe,
            "epochs": args.epochs,
            "warmup": args.warmup,
            "batch_size": args.batch_size,
            "seed": args.seed,
            "tune_seed": opt_template.seed,
            "hidden": args.hidden or [],
        },
        {"train": args.train, "val": args.val},
        outputs,
    )
    print(json.dumps(summary, default=_json_default))
    return 0


def _grid_dict(grid: GridSpec) -> dict:
    return {name: list(getattr(grid, name)) for name in grid.__dataclass_fields__}


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)}")


def _cmd_eval(args) -> int:
    ids, probs, _ = _read_preds(args.preds)
    truth = fs.load_bank(args.truth)
    index = {sample_id: i for i, sample_id in enumerate(truth.ids)}
    if len(ids) != truth.n:
        raise LengthMismatch(f"{len(ids)} predictions vs {truth.n} truth samples")
    missing = [i for i in ids if i not in index]
    if missing:
        raise LengthMismatch(f"prediction ids missing from truth bank: {missing[:3]}")
    order = np.asarray([index[i] for i in ids], dtype=np.int64)
    labels = truth.labels[order]
    if probs.shape[1] != truth.class_count:
        raise LengthMismatch(
            f"predictions carry {probs.shape[1]} classes, truth bank {truth.class_count}"
        )
    report = build_report(
        mode=args.mode,
        config={"preds": str(args.preds), "truth": str(args.truth)},
        probs=probs,
        truth=labels,
        class_count=truth.class_count,
        pr_classes=args.pr_classes,
    )
    write_report(report, args.out, args.format)
    outputs = [args.out]
    if args.pr_classes and not args.no_figures and args.format == "json":
        figure_path = str(args.out) + ".pr.png"
        from . import figures

        figures.save_pr_curves(report.per_class_pr, figure_path)
        outputs.append(figure_path)
    write_manifests(
        "eval",
        {"mode": args.mode, "format": args.format, "pr_classes": args.pr_classes or []},
        {"preds": args.preds, "truth": args.truth},
        outputs,
    )
    print(f"eval: top1={report.top1:.4f} n={report.n_eval} -> {args.out}")
    return 0


def ablate_points(
    train_bank,
    val_bank,
    test_bank,
    sweeps: list[str],
    fractions: list[float],
    *,
    knn_k,
    tau: float,
    metric: Metric,
    recipe: fs.Recipe,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    lam: float,
    hidden: list[int] | None,
    seed: int,
    base_fraction: float = 1.0,
) -> list[dict]:
    """Accuracy of k-NN / classifier / fused predictions as data shrinks.

    The "base" sweep subsamples the classifier's training data against the
    full datastore; the "datastore" sweep subsamples the k-NN datastore
    (with the classifier on ``base_fraction`` of the data). Subsampling is
    nested per sweep, so each smaller fraction trains on a subset of the
    larger one's data. Preprocessing is refit on the effective datastore of
    every point.
    """
    points = []
    for sweep in sweeps:
        for fraction in fractions:
            if sweep == "base":
                clf_raw = fs.subsample(
                    train_bank, fraction, derive_seed(seed, "subsample.base")
                )
                store_raw = train_bank
            else:
                store_raw = fs.subsample(
                    train_bank, fraction, derive_seed(seed, "subsample.datastore")
                )
                clf_raw = (
                    fs.subsample(train_bank, base_fraction, derive_seed(seed, "subsample.base"))
                    if base_fraction < 1.0
                    else train_bank
                )
            stats = fs.fit_preprocess(store_raw, recipe)
            store_p = fs.preprocess_bank(store_raw, stats)
            clf_p = fs.preprocess_bank(clf_raw, stats)
            val_p = fs.preprocess_bank(val_bank, stats)
            test_p = fs.preprocess_bank(test_bank, stats)

            k = resolve_k(knn_k, store_p)
            k = min(k, store_p.n - 1)
            idx, dist = batch_topk(test_p.features, store_p, k, metric=metric)
            knn_test = aggregate_posteriors(
                store_p.labels[idx], dist, tau, store_p.class_count
            )

            p_gt = None
            if loss_cfg.alpha > 0:
                store_index = {sample_id: i for i, sample_id in enumerate(store_p.ids)}
                exclude = np.asarray(
                    [store_index.get(sample_id, -1) for sample_id in clf_p.ids],
                    dtype=np.int64,
                )
                idx_t, dist_t = batch_topk(
                    clf_p.features, store_p, k, metric=metric, exclude=exclude
                )
                loo = aggregate_posteriors(
                    store_p.labels[idx_t], dist_t, tau, store_p.class_count
                )
                p_gt = loo[np.arange(clf_p.n), clf_p.labels]

            model = init_model(
                clf_p.dim,
                clf_p.class_count,
                hidden=hidden,
                seed=derive_seed(seed, "init"),
                prior_pi=opt_cfg.prior_pi,
            )
            model, _ = train(model, clf_p, p_gt, loss_cfg, opt_cfg, val_bank=val_p)
            _, clf_test = forward(model, test_p.features.astype(np.float64))
            fused = fuse(knn_test, clf_test, lam)
            points.append(
                {
                    "sweep": sweep,
                    "fraction": fraction,
                    "n_classifier": clf_p.n,
                    "n_datastore": store_p.n,
                    "resolved_k": k,
                    "knn_top1": float(np.mean(knn_test.argmax(axis=1) == test_p.labels)),
                    "clf_top1": float(np.mean(clf_test.argmax(axis=1) == test_p.labels)),
                    "joint_top1": float(np.mean(fused.argmax(axis=1) == test_p.labels)),
                }
            )
    return points


def _cmd_ablate(args) -> int:
    train_bank = fs.load_bank(args.train)
    val_bank = fs.load_bank(args.val)
    test_bank = fs.load_bank(args.test)
    sweeps = ["base", "datastore"] if args.sweep == "both" else [args.sweep]
    fractions = _parse_float_list(args.fractions)
    loss_cfg = LossConfig(alpha=args.alpha, factor=args.factor, gamma=args.gamma)
    opt_cfg = OptimizerConfig(
        base_lr=args.lr,
        batch_size=args.batch_size,
        momentum=args.momentum,
        weight_decay=args.wd,
        warmup_epochs=args.warmup,
        total_epochs=args.epochs,
        seed=derive_seed(args.seed, "train"),
        prior_pi=args.prior_pi,
    )
    points = ablate_points(
        train_bank,
        val_bank,
        test_bank,
        sweeps,
        fractions,
        knn_k=args.k,
        tau=args.tau,
        metric=Metric(args.metric),
        recipe=fs.Recipe(args.recipe),
        loss_cfg=loss_cfg,
        opt_cfg=opt_cfg,
        lam=args.lam,
        hidden=args.hidden,
        seed=args.seed,
        base_fraction=args.base_fraction,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for point in points:
        name = f"report_{point['sweep']}_{point['fraction']:g}.json"
        path = out_dir / name
        path.write_text(json.dumps(point, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(str(path))
    summary = out_dir / "summary.csv"
    _write_rows_csv(
        summary,
        points,
        [
            "sweep",
            "fraction",
            "n_classifier",
            "n_datastore",
            "resolved_k",
            "knn_top1",
            "clf_top1",
            "joint_top1",
        ],
    )
    outputs.append(str(summary))
    if not args.no_figures:
        from . import figures

        figure_path = out_dir / "ablation.png"
        figures.save_ablation_curves(points, figure_path)
        outputs.append(str(figure_path))
    write_manifests(
        "ablate",
        {
            "sweeps": sweeps,
            "fractions": fractions,
            "k": args.k,
            "tau": args.tau,
            "alpha": args.alpha,
            "lambda": args.lam,
            "lr": args.lr,
            "wd": args.wd,
            "epochs": args.epochs,
            "seed": args.seed,
            "base_fraction": args.base_fraction,
        },
        {"train": args.train, "val": args.val, "test": args.test},
        outputs,
    )
    print(f"ablate: {len(points)} points -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common_knn(p, k_default="mean", tau_default=0.1):
    p.add_argument("--k", type=_parse_k, default=k_default, help="neighbor count or 'mean'")
    p.add_argument("--tau", type=float, default=tau_default, help="posterior temperature")
    p.add_argument(
        "--metric", choices=[m.value for m in Metric], default=Metric.SQEUCLIDEAN.value
    )


def _add_recipe(p):
    p.add_argument(
        "--recipe", choices=[r.value for r in fs.Recipe], default=fs.Recipe.L2_THEN_CENTER.value
    )


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.1, help="base learning rate (pre-scaling)")
    p.add_argument("--wd", type=float, default=0.0, help="L2 weight decay")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--prior-pi", type=float, default=0.01)
    p.add_argument("--hidden", type=_parse_int_list, default=None, help="MLP widths, e.g. 64,32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knnfuse",
        description="k-NN + softmax classifier fusion over precomputed feature banks",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker threads (results identical at any value)")
    parser.add_argument("--version", action="version", version=f"knnfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a bank file and convert between formats")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--out", required=True)
    p.add_argument("--out-format", choices=["bin", "csv"], default="bin")
    p.add_argument("--class-count", type=int, default=None)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="partition a bank into train/val/test files")
    p.add_argument("--bank", required=True)
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--split", default="0.9,0.1", help="train,val fractions; rest is test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=None, help="subsample before splitting")
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("knn", help="k-NN posteriors for queries against a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--queries", required=True)
    _add_common_knn(p)
    _add_recipe(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_knn)

    p = sub.add_parser("train", help="train the classifier, optionally k-NN-reweighted")
    p.add_argument("--bank", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--alpha", type=float, default=0.0, help="reweighting strength; 0 = plain")
    p.add_argument("--factor", choices=["nll", "focal"], default="nll")
    p.add_argument("--gamma", type=float, default=2.0)
    _add_common_knn(p)
    _add_recipe(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="predict with base / knn / fused modes")
    p.add_argument("--mode", choices=[m.value for m in PredictMode], default="joint")
    p.add_argument("--model", default=None)
    p.add_argument("--bank", required=True, help="datastore bank (training split)")
    p.add_argument("--queries", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--k", type=_parse_k, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--metric", choices=[m.value for m in Metric], default=None)
    p.add_argument("--recipe", choices=[r.value for r in fs.Recipe], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("grid", help="hyperparameter search on the validation split")
    p.add_argument("--task", choices=["knn", "base", "joint"], default="joint")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--grids", default=None, help="grids.json; defaults to the full protocol")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--metric", choices=[m.value for m in Metric], default="sqeuclidean")
    _add_recipe(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--prior-pi", type=float, default=0.01)
    p.add_argument("--hidden", type=_parse_int_list, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=_parse_k, default=None, help="pin k for --task joint")
    p.add_argument("--tau", type=float, default=None, help="pin tau for --task joint")
    p.add_argument("--full-product", action="store_true",
                   help="cross every (k, tau) cell with the training grids")
    p.add_argument("--lambda-include-zero", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("eval", help="score a predictions file against a truth bank")
    p.add_argument("--preds", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--mode", default="preds", help="label recorded in the report")
    p.add_argument("--pr-classes", type=_parse_int_list, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="data-size sweeps for classifier and datastore")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--sweep", choices=["base", "datastore", "both"], default="both")
    p.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--base-fraction", type=float, default=1.0,
                   help="classifier data fraction during the datastore sweep")
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--factor", choices=["nll", "focal"], default="nll")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    _add_common_knn(p)
    _add_recipe(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        import os

        os.environ["KNNFUSE_THREADS"] = str(args.threads)
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except KnnfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
