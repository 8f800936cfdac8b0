"""Command-line front-end.

Subcommands::

    synth     write a labelled synthetic scene (pc1.csv, pc2.csv, core.csv)
    features  compute the feature matrix of a parameter file
    select    reduce the predictors and write an optimised parameter file
    train     train a forest on labelled core points
    classify  append predicted_class and confidence to the core points
    explain   per-class / per-scale mean absolute Shapley values
    eval      accuracy report and confidence-threshold table
    bench     feature throughput per scale set

Exit codes: 0 success, 1 usage error, 2 data or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .cloud import UNLABELLED, PointCloud, load_cloud, save_cloud
from .dsl import (
    PipelineSpec,
    default_parameter_text,
    parse_feature,
    parse_parameter_file,
    spec_for_predictors,
)
from .errors import DataError
from .explain import DEFAULT_BACKGROUND, background_sample, mean_abs_shapley
from .features import FeatureMatrix, compute_matrix, resolve_core
from .forest import ForestParams, load_model, save_model, train
from .metrics import confidence_filter_table, evaluate, filter_table_text
from .selection import SelectionConfig, optimized_parameter_file, select_predictors
from .synth import SceneParams, generate_scene

logger = logging.getLogger("cloudclass")

DEFAULT_THRESHOLDS = "0,0.5,0.6,0.7,0.8,0.9"
SELECTION_TREES = 50


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- shared plumbing ---------------------------------------------------------------


def _read_spec(args) -> PipelineSpec:
    if args.params:
        text = Path(args.params).read_text(encoding="utf-8")
    else:
        text = default_parameter_text()
    return parse_parameter_file(text)


def _bound_path(spec: PipelineSpec, role: str, flag: Optional[str], params: Optional[str]):
    """Explicit flag, else the parameter-file binding (relative to the file)."""
    if flag:
        return flag
    bound = spec.cloud_bindings.get(role)
    if not bound or not params:
        return None
    p = Path(bound)
    return str(p if p.is_absolute() else Path(params).parent / p)


def _rebase_bindings(spec: PipelineSpec, args, out_dir: Path):
    """Cloud bindings rewritten relative to ``out_dir`` (flags take precedence)."""
    flags = {"PC1": args.pc1, "PC2": args.pc2, "CTX": args.ctx, "CORE": args.core}
    rebased = {}
    for role, bound in spec.cloud_bindings.items():
        if role == "CORE" and spec.core_source()[1] is not None and not args.core:
            rebased[role] = bound
            continue
        path = _bound_path(spec, role, flags.get(role), args.params) or bound
        rebased[role] = os.path.relpath(os.path.abspath(path), os.path.abspath(out_dir))
    for role, flag in flags.items():
        if flag and role not in rebased:
            rebased[role] = os.path.relpath(os.path.abspath(flag), os.path.abspath(out_dir))
    return rebased


def _load_inputs(args, spec: PipelineSpec):
    pc1_path = _bound_path(spec, "PC1", args.pc1, args.params)
    if pc1_path is None:
        raise UsageError("--pc1 is required")
    pc1 = load_cloud(pc1_path, role="PC1")
    pc2_path = _bound_path(spec, "PC2", args.pc2, args.params)
    pc2 = load_cloud(pc2_path, role="PC2") if pc2_path and Path(pc2_path).exists() else None
    if args.pc2 and pc2 is None:
        raise DataError(f"{args.pc2}: no such file")
    ctx_path = _bound_path(spec, "CTX", args.ctx, args.params)
    ctx = load_cloud(ctx_path, role="CTX") if ctx_path else None
    core = None
    if args.core:
        core = load_cloud(args.core, role="CORE")
    elif spec.core_source()[1] is None:
        core_path = _bound_path(spec, "CORE", None, args.params)
        if core_path is None:
            raise UsageError("--core is required")
        core = load_cloud(core_path, role="CORE")
    return pc1, pc2, ctx, resolve_core(spec, pc1, pc2, core)


def _features(args, spec: PipelineSpec, columns=None):
    """Feature matrix (from --features or computed) plus the core cloud."""
    if getattr(args, "features", None):
        fm = FeatureMatrix.from_csv(args.features)
        if columns is not None:
            fm = fm.select(columns)
        core = None
        if args.core or args.pc1 or args.params:
            core = _load_inputs(args, spec)[3]
        return fm, core
    pc1, pc2, ctx, core = _load_inputs(args, spec)
    descs = None if columns is None else [parse_feature(t) for t in columns]
    fm = compute_matrix(spec, pc1, pc2, ctx, core, threads=args.threads, columns=descs)
    return fm, core


def _labels(fm: FeatureMatrix, core: Optional[PointCloud]) -> np.ndarray:
    if core is None or core.classification is None:
        raise DataError("labelled core points (classification column) are required")
    if len(fm.core_ids) and fm.core_ids.max() >= len(core):
        raise DataError("feature rows refer to core points outside the core cloud")
    return core.classification[fm.core_ids]


def _labelled(fm: FeatureMatrix, y: np.ndarray):
    keep = y != UNLABELLED
    if not keep.any():
        raise DataError("no labelled core point")
    return fm.rows(np.flatnonzero(keep)), y[keep]


def _forest_params(args, default_trees: int) -> ForestParams:
    return ForestParams(n_trees=args.trees or default_trees, max_depth=args.max_depth,
                        mtry=args.mtry)


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out or "scene")
    out.mkdir(parents=True, exist_ok=True)
    params = SceneParams(seed=args.seed, extent=(args.extent, args.extent),
                         core_spacing=args.core_spacing)
    scene = generate_scene(params)
    save_cloud(scene.pc1, out / "pc1.csv")
    save_cloud(scene.pc2, out / "pc2.csv")
    save_cloud(scene.core, out / "core.csv")
    logger.info("scene written to %s", out)
    return 0


def cmd_features(args) -> int:
    spec = _read_spec(args)
    fm, _ = _features(args, spec)
    fm.to_csv(_out(args, "features.csv"))
    return 0


def cmd_train(args) -> int:
    spec = _read_spec(args)
    fm, core = _features(args, spec)
    fm, y = _labelled(fm, _labels(fm, core))
    model = train(fm.values, y, _forest_params(args, 150), seed=args.seed,
                  columns=fm.tokens, threads=args.threads)
    save_model(model, _out(args, "model.json"))
    logger.info("trained %d trees on %d points, OOB %.4f", model.n_trees, len(y), model.oob_score)
    return 0


def cmd_select(args) -> int:
    spec = _read_spec(args)
    fm, core = _features(args, spec)
    fm, y = _labelled(fm, _labels(fm, core))
    cfg = SelectionConfig(eval_scale=args.eval_scale, corr_threshold=args.corr_threshold,
                          window=args.window, oob_drop_threshold=args.drop_threshold)
    report = select_predictors(fm, y, cfg, _forest_params(args, SELECTION_TREES),
                               seed=args.seed, threads=args.threads)
    out = Path(args.out or "selection")
    out.mkdir(parents=True, exist_ok=True)
    (out / "elimination_trace.csv").write_text(report.trace_csv(), encoding="utf-8")
    summary = {
        "kept_features": report.kept_features,
        "kept_scales": report.kept_scales,
        "candidates": report.candidates,
        "ig_scores": report.ig_scores,
        "correlated": [list(c) for c in report.correlated],
        "chosen_iteration": report.chosen_iteration,
        "chosen_predictors": report.chosen_predictors,
    }
    (out / "selection_report.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    (out / "optimized_params.txt").write_text(
        optimized_parameter_file(report, _rebase_bindings(spec, args, out)), encoding="utf-8")
    logger.info("%d predictors chosen", len(report.chosen_predictors))
    return 0


def cmd_classify(args) -> int:
    if not args.model:
        raise UsageError("--model is required")
    model = load_model(args.model)
    spec = _read_spec(args)
    if not getattr(args, "features", None):
        spec = spec_for_predictors([parse_feature(t) for t in model.columns], spec.cloud_bindings)
    fm, core = _features(args, spec, columns=list(model.columns))
    if core is None:
        raise DataError("core points are required to write the classified cloud")
    labels, conf = model.predict(fm.values, columns=fm.tokens, threads=args.threads)
    pred = np.zeros(len(core), np.int64)
    cf = np.full(len(core), np.nan)
    pred[fm.core_ids] = labels
    cf[fm.core_ids] = conf
    save_cloud(core.with_columns(predicted_class=pred, confidence=cf), _out(args, "classified.csv"))
    return 0


def cmd_explain(args) -> int:
    if not args.model:
        raise UsageError("--model is required")
    model = load_model(args.model)
    spec = _read_spec(args)
    if not getattr(args, "features", None):
        spec = spec_for_predictors([parse_feature(t) for t in model.columns], spec.cloud_bindings)
    fm, _ = _features(args, spec, columns=list(model.columns))
    if args.background:
        bg = background_sample(FeatureMatrix.from_csv(args.background).select(model.columns),
                               args.background_size, args.seed)
    else:
        bg = background_sample(fm.values, args.background_size, args.seed)
    X = fm.values
    if args.max_rows and len(X) > args.max_rows:
        # seeded subset keeps the summary cost bounded on large core sets
        X = X[np.sort(np.random.default_rng(args.seed).choice(len(X), args.max_rows, replace=False))]
    labels, _ = model.predict(X, threads=args.threads)
    summary = mean_abs_shapley(model, X, labels, background=bg, method=args.method,
                               seed=args.seed, threads=args.threads)
    _out(args, "shapley.csv").write_text(summary.to_csv(), encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    path = args.classified or args.core
    if not path:
        raise UsageError("--classified (or --core) with predicted_class is required")
    cloud = load_cloud(path, role="CORE")
    extra = cloud.extra
    if cloud.classification is None or "predicted_class" not in extra:
        raise DataError(f"{path}: needs classification and predicted_class columns")
    y = cloud.classification
    pred = extra["predicted_class"].astype(np.int64)
    conf = extra.get("confidence")
    keep = (y != UNLABELLED) & (pred != UNLABELLED)
    if conf is not None:
        keep &= ~np.isnan(conf)
    y, pred = y[keep], pred[keep]
    conf = conf[keep] if conf is not None else np.ones(len(y))
    report = evaluate(y, pred, conf)
    try:
        thresholds = [float(t) for t in args.confidence_thresholds.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad --confidence-thresholds {args.confidence_thresholds!r}") from None
    table = confidence_filter_table(y, pred, conf, thresholds)
    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_text(), encoding="utf-8")
    (out / "confidence_filter.csv").write_text(filter_table_text(table), encoding="utf-8")
    print(f"OA {report.oa:.4f} on {report.n} points")
    return 0


def run_bench(spec: PipelineSpec, pc1, pc2, core, scale_sets: Sequence[Sequence[float]],
              threads: Sequence[int], repeat: int = 1) -> List[tuple]:
    """``(scale set, threads, n_core, seconds, points/second)`` per configuration.

    Every descriptor of ``spec`` is evaluated at each scale of the set; the best
    of ``repeat`` runs is reported.
    """
    rows = []
    for scales in scale_sets:
        s = PipelineSpec(dict(spec.cloud_bindings), sorted(scales), list(spec.knn_values),
                         list(spec.descriptors))
        for t in threads:
            best = float("inf")
            for _ in range(max(1, repeat)):
                t0 = time.perf_counter()
                compute_matrix(s, pc1, pc2, None, core, threads=t)
                best = min(best, time.perf_counter() - t0)
            rows.append((tuple(scales), t, len(core), best, len(core) / best))
    return rows


def cmd_bench(args) -> int:
    spec = _read_spec(args)
    if args.pc1 or args.params:
        pc1, pc2, _, core = _load_inputs(args, spec)
    else:
        scene = generate_scene(SceneParams(seed=args.seed, extent=(args.extent, args.extent)))
        pc1, pc2, core = scene.pc1, scene.pc2, scene.core
    if args.n_core and args.n_core < len(core):
        core = core.subset(np.arange(args.n_core))
    try:
        sets = [[float(v) for v in grp.split(",")] for grp in args.scale_sets.split(";")]
        threads = [int(v) for v in args.bench_threads.split(",")]
    except ValueError:
        raise UsageError("bad --scale-sets or --bench-threads") from None
    # compile the kernels outside the timed runs
    compute_matrix(spec, pc1, pc2, None, core.subset(np.arange(min(len(core), 8))), threads=1)
    rows = run_bench(spec, pc1, pc2, core, sets, threads, args.repeat)
    lines = ["scales,threads,n_core,seconds,points_per_second"]
    for scales, t, n, sec, pps in rows:
        lines.append(f"{' '.join(f'{s:g}' for s in scales)},{t},{n},{sec:.3f},{pps:.1f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _out(args, "bench.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--params", help="parameter file (default: the bundled universe)")
    common.add_argument("--pc1", help="first cloud (overrides the parameter file)")
    common.add_argument("--pc2", help="second cloud")
    common.add_argument("--ctx", help="context cloud")
    common.add_argument("--core", help="core points (default: CORE binding of the parameter file)")
    common.add_argument("--model", help="model file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, default=42, help="master seed (default 42)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: all CPUs; results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    forest = _Parser(add_help=False)
    forest.add_argument("--features", help="precomputed feature table (CSV)")
    forest.add_argument("--trees", type=int, default=None,
                        help="trees per forest (default 150; 50 for select)")
    forest.add_argument("--max-depth", type=int, default=25)
    forest.add_argument("--mtry", type=int, default=None, help="default floor(sqrt(f))")

    p = _Parser(prog="cloudclass", description="Multi-scale multi-cloud point classification.")
    p.add_argument("--version", action="version", version=f"cloudclass {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    s.add_argument("--extent", type=float, default=60.0, help="scene side in metres")
    s.add_argument("--core-spacing", type=float, default=1.0)

    sub.add_parser("features", parents=[common], help="compute the feature matrix")
    sub.add_parser("train", parents=[common, forest], help="train a forest")

    s = sub.add_parser("select", parents=[common, forest], help="predictor selection")
    s.add_argument("--corr-threshold", type=float, default=0.85)
    s.add_argument("--eval-scale", type=float, default=2.0)
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--drop-threshold", type=float, default=0.005)

    sub.add_parser("classify", parents=[common, forest], help="classify core points")

    s = sub.add_parser("explain", parents=[common, forest], help="Shapley summaries")
    s.add_argument("--background", help="feature table the background rows are drawn from")
    s.add_argument("--background-size", type=int, default=DEFAULT_BACKGROUND)
    s.add_argument("--method", choices=("exact", "permutation"), default="exact")
    s.add_argument("--max-rows", type=int, default=2000,
                   help="explain a seeded random subset of at most this many core points (0 = all)")

    s = sub.add_parser("eval", parents=[common], help="evaluate a classified cloud")
    s.add_argument("--classified", help="output of classify (defaults to --core)")
    s.add_argument("--confidence-thresholds", default=DEFAULT_THRESHOLDS)

    s = sub.add_parser("bench", parents=[common], help="feature throughput")
    s.add_argument("--scale-sets", default="1;1,2,4;1,2,4,8",
                   help="';'-separated scale sets, each a ','-separated list of diameters")
    s.add_argument("--bench-threads", default="1", help="thread counts to time, e.g. 1,4")
    s.add_argument("--n-core", type=int, default=None)
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--extent", type=float, default=60.0, help="synthetic scene side")
    return p


COMMANDS = {
    "synth": cmd_synth, "features": cmd_features, "train": cmd_train, "select": cmd_select,
    "classify": cmd_classify, "explain": cmd_explain, "eval": cmd_eval, "bench": cmd_bench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("cloudclass: error: a subcommand is required")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                             format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"cloudclass: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
