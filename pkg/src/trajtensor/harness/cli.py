"""``trajtensor`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from ..datagen import (
    ConfigError,
    DatasetError,
    ScenarioConfig,
    default_scenario,
    generate,
    group_multi_target,
    load_dataset,
    save_dataset,
)
from ..metrics import MetricsReport
from ..nn import load_weights, save_weights
from ..tensor_core import save_tensor
from .config import HEATMAP_SIZES, RunConfig, load_run_config, load_toml
from .experiment import (
    DivergenceError,
    FoldError,
    check_dataset,
    cross_validate,
    evaluate,
    load_predictor,
    make_fold_plan,
    predict_multi_target,
    prepare_for,
    sweep,
    train,
)
from .report import report, report_from_json, write_metrics

log = logging.getLogger("trajtensor")

EXIT_CONFIG = 2
EXIT_DATA = 3


def scenario_from_toml(path: Optional[str], seed: Optional[int]) -> ScenarioConfig:
    body = load_toml(path).get("scenario", {}) if path else {}
    if not isinstance(body, dict):
        raise ConfigError("[scenario] must be a table")
    try:
        if "cameras" in body:
            cfg = ScenarioConfig.from_dict(body)
        else:
            unknown = set(body) - set(ScenarioConfig.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
            cfg = default_scenario(**{k: tuple(v) if isinstance(v, list) else v for k, v in body.items()})
    except TypeError as exc:
        raise ConfigError(f"bad [scenario] section: {exc}") from None
    if seed is not None:
        cfg.seed = seed
    return cfg


def _run_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return load_run_config(args.config, seed=args.seed, model=args.model, task=args.task, dataset=args.dataset)


def _load(cfg: RunConfig):
    if not cfg.dataset:
        raise ConfigError("no dataset path configured ([run] dataset or --dataset)")
    ds = load_dataset(cfg.dataset)
    check_dataset(ds)
    return ds


def cmd_datagen(args) -> int:
    cfg = scenario_from_toml(args.config, args.seed)
    ds = generate(cfg)
    out = save_dataset(ds, args.out, cache_targets=args.cache_targets)
    print(f"wrote {len(ds)} samples over {len(ds.days())} days to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if cfg.is_baseline:
        raise ConfigError("baselines have nothing to train; use crossval")
    data = prepare_for(cfg, _load(cfg))
    plan = make_fold_plan(data.days, cfg.folds, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    folds = range(cfg.folds) if args.fold is None else [args.fold]
    histories = {}
    for fold in folds:
        train_idx, _ = plan.split(data.days, fold)
        pred = train(cfg, data, train_idx, seed=cfg.seed + fold)
        path = out / f"weights-fold{fold}-{cfg.hash()}.ttwt"
        save_weights(path, pred.weight_blocks())
        histories[str(fold)] = {str(k): v for k, v in pred.histories.items()}
        print(f"fold {fold}: wrote {path}")
    (out / f"history-{cfg.hash()}.json").write_text(json.dumps(histories, indent=2, sort_keys=True) + "\n")
    return 0


def _fold_weights(cfg: RunConfig, weights_dir: Path, fold: int) -> Path:
    path = weights_dir / f"weights-fold{fold}-{cfg.hash()}.ttwt"
    if not path.exists():
        raise DatasetError(f"missing weight file {path}")
    return path


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    data = prepare_for(cfg, _load(cfg))
    plan = make_fold_plan(data.days, cfg.folds, cfg.seed)
    weights_dir = Path(args.weights or args.out)
    folds, curves = [], {}
    for fold in range(cfg.folds):
        train_idx, test_idx = plan.split(data.days, fold)
        if cfg.is_baseline:
            pred = train(cfg, data, train_idx, seed=cfg.seed + fold)
        else:
            pred = load_predictor(cfg, data, train_idx, load_weights(_fold_weights(cfg, weights_dir, fold)))
        fm, curve = evaluate(pred, data, test_idx, fold)
        folds.append(fm)
        if curve is not None:
            curves[fold] = curve
    metrics = MetricsReport(folds, cfg.to_dict())
    report(args.out, cfg.hash(), metrics, curves, task=cfg.task)
    print(metrics.to_text(), end="")
    return 0


def cmd_crossval(args, ablate: bool = False) -> int:
    cfg = _run_config(args)
    data = prepare_for(cfg, _load(cfg))
    res = cross_validate(cfg, data, ablate=ablate)
    report(args.out, cfg.hash(), res.report, res.curves, single_view=res.single_view, task=cfg.task)
    print(res.report.to_text(), end="")
    if ablate:
        key = f"ap_{cfg.task}"
        print(f"multi_view.{key} = {res.report.mean(key)!r}")
        print(f"single_view.{key} = {res.single_view.mean(key)!r}")
    return 0


def _parse_sizes(text: str):
    sizes = []
    for part in text.split(","):
        try:
            w, h = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise ConfigError(f"bad heatmap size {part!r}; expected WxH") from None
        if (w, h) not in HEATMAP_SIZES:
            raise ConfigError(f"heatmap size {w}x{h} not one of {HEATMAP_SIZES}")
        sizes.append((w, h))
    return sizes


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    doc = load_toml(args.config).get("sweep", {})
    sizes = _parse_sizes(args.sizes) if args.sizes else [tuple(s) for s in doc.get("sizes", [cfg.heatmap])]
    if args.sigmas:
        try:
            sigmas = [float(v) for v in args.sigmas.split(",")]
        except ValueError:
            raise ConfigError(f"bad sigma list {args.sigmas!r}") from None
    else:
        sigmas = [float(v) for v in doc.get("sigmas", [cfg.sigma])]
    rows = sweep(cfg, _load(cfg), sizes, sigmas)
    report(args.out, cfg.hash(), MetricsReport([], cfg.to_dict()), sweep_rows=rows, task=cfg.task)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_predict_mt(args) -> int:
    cfg = _run_config(args)
    if cfg.is_baseline:
        raise ConfigError("multi-target prediction needs a learned model")
    ds = _load(cfg)
    data = prepare_for(cfg, ds)
    plan = make_fold_plan(data.days, cfg.folds, cfg.seed)
    fold = args.fold or 0
    train_idx, test_idx = plan.split(data.days, fold)
    pred = load_predictor(cfg, data, train_idx, load_weights(_fold_weights(cfg, Path(args.weights or args.out), fold)))
    test_days = set(plan.test_days(fold))
    groups = [g for g in group_multi_target(ds) if g.day in test_days]
    out = Path(args.out) / f"multi-target-fold{fold}-{cfg.hash()}"
    out.mkdir(parents=True, exist_ok=True)
    for g in groups:
        y = predict_multi_target(pred.registry, g, cfg.heatmap, cfg.sigma, fallback=pred.fallback)
        save_tensor(out / f"day{g.day}-bin{g.bin_index}.tten", y)
    print(f"wrote {len(groups)} multi-target predictions to {out}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.source)
    if not src.exists():
        raise DatasetError(f"no such report file {src}")
    try:
        metrics = report_from_json(src)
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{src}: not a metrics report ({exc})") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = src.stem if src.parent.resolve() != out.resolve() else src.stem + "-rendered"
    write_metrics(out, stem, metrics)
    print(metrics.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajtensor", description="Multi-camera trajectory forecasting toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--model", help="model family or baseline (overrides [run] model)")
        p.add_argument("--task", choices=("which", "when", "where"))
        p.add_argument("--dataset", help="dataset directory (overrides [run] dataset)")

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    common(p, config_required=False)
    p.add_argument("--cache-targets", action="store_true", help="also write TTEN target caches")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one model per fold and save weights")
    common(p)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate saved fold weights (or a baseline)")
    common(p)
    p.add_argument("--weights", help="directory with weight files (default: --out)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="train and evaluate all folds")
    common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("sweep", help="cross-validate a heatmap size x sigma grid")
    common(p)
    p.add_argument("--sizes", help="comma list such as 16x9,32x18")
    p.add_argument("--sigmas", help="comma list such as 0,1,2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="multi-view vs single-view inputs")
    common(p)
    p.set_defaults(func=lambda a: cmd_crossval(a, ablate=True))

    p = sub.add_parser("predict-mt", help="batch-stacked multi-target prediction")
    common(p)
    p.add_argument("--weights", help="directory with weight files (default: --out)")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_predict_mt)

    p = sub.add_parser("report", help="re-render a metrics JSON file as text and JSON")
    p.add_argument("--from", dest="source", required=True, help="metrics JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FoldError, DivergenceError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
