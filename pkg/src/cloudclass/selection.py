"""Predictor reduction: correlation pruning, scale voting, backward elimination.

1. Every feature family (descriptor without its scale) is scored at one
   evaluation scale by information gain; families are kept greedily in IG
   order unless strongly correlated with an already kept one.
2. For each kept family the same greedy rule runs over its scales; each kept
   scale earns one vote and the most voted scales survive.
3. The surviving family x scale columns are pruned once more, then forests
   are retrained while the least important predictor is removed, and the
   iteration with the best OOB score (latest on ties) is chosen.

Point-based and kNN predictors have no spherical scale; they skip steps 1-2
and join the candidates for step 3 directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsl import (
    FeatureDescriptor,
    format_feature,
    parse_feature,
    spec_for_predictors,
    write_parameter_file,
)
from .errors import ConfigurationError
from .features import FeatureMatrix
from .forest import ForestParams, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    eval_scale: float = 2.0
    corr_threshold: float = 0.85
    max_scales: int = 10
    window: int = 10
    oob_drop_threshold: float = 0.005
    ig_bins: int = 32

    def __post_init__(self):
        if not 0 < self.corr_threshold <= 1:
            raise ValueError("corr_threshold must be in (0, 1]")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.max_scales < 1 or self.ig_bins < 1:
            raise ValueError("max_scales and ig_bins must be >= 1")


def _entropy(codes: np.ndarray) -> float:
    if len(codes) == 0:
        return 0.0
    p = np.bincount(codes) / len(codes)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def information_gain(col, y, bins: int = 32) -> float:
    """H(y) - H(y | col binned into equal-frequency bins), in bits.

    Rows where ``col`` is missing are ignored. Tied values always share a bin.
    """
    col = np.asarray(col, dtype=np.float64)
    keep = ~np.isnan(col)
    v = col[keep]
    m = len(v)
    if m == 0 or v.min() == v.max():
        return 0.0
    _, codes = np.unique(np.asarray(y)[keep], return_inverse=True)
    codes = codes.reshape(-1)
    if codes.max() == 0:
        return 0.0
    srt = np.sort(v)
    b = np.searchsorted(srt, v, side="left") * bins // m
    h_cond = 0.0
    for k in np.unique(b):
        sel = codes[b == k]
        h_cond += len(sel) / m * _entropy(sel)
    return max(0.0, _entropy(codes) - h_cond)


def pearson(a, b) -> Tuple[float, bool]:
    """Pearson r over rows where both are present, plus a degeneracy flag.

    Fewer than two complete pairs gives ``(nan, True)``; a zero-variance
    input gives ``(0.0, True)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    keep = ~(np.isnan(a) | np.isnan(b))
    if keep.sum() < 2:
        return float("nan"), True
    da = a[keep] - a[keep].mean()
    db = b[keep] - b[keep].mean()
    sa = float(da @ da)
    sb = float(db @ db)
    if sa == 0.0 or sb == 0.0:
        return 0.0, True
    r = float(da @ db) / math.sqrt(sa * sb)
    return max(-1.0, min(1.0, r)), False


def _is_constant(col) -> bool:
    v = col[~np.isnan(col)]
    return len(v) == 0 or v.min() == v.max()


def redundancy(a, b) -> float:
    """|r| used by the greedy keep; identical or jointly constant columns count as 1."""
    if np.array_equal(a, b, equal_nan=True) or (_is_constant(a) and _is_constant(b)):
        return 1.0
    r, _ = pearson(a, b)
    return 0.0 if r != r else abs(r)


@dataclass
class PruneResult:
    kept: List[int]
    ig: np.ndarray
    dropped: List[Tuple[int, int, float]]  # (column, kept column it duplicates, |r|)


def prune_columns(X, y, corr_threshold: float = 0.85, bins: int = 32,
                  ig: Optional[np.ndarray] = None) -> PruneResult:
    """Greedy keep in descending IG order (column order breaks ties)."""
    X = np.asarray(X, dtype=np.float64)
    f = X.shape[1]
    if ig is None:
        ig = np.array([information_gain(X[:, j], y, bins) for j in range(f)])
    order = np.lexsort((np.arange(f), -ig))
    kept: List[int] = []
    dropped = []
    for j in order:
        for k in kept:
            r = redundancy(X[:, j], X[:, k])
            if r > corr_threshold:
                dropped.append((int(j), int(k), r))
                break
        else:
            kept.append(int(j))
    return PruneResult(kept, ig, dropped)


def prune_features(X_eval, y, cfg: SelectionConfig = SelectionConfig()) -> List[int]:
    """Indices of the columns kept by the IG/correlation greedy rule, in keep order."""
    return prune_columns(X_eval, y, cfg.corr_threshold, cfg.ig_bins).kept


def vote_scales(per_feature: Dict[str, np.ndarray], scales: Sequence[float], y,
                cfg: SelectionConfig = SelectionConfig()) -> List[float]:
    """Scales most often kept when each feature is pruned across its own scales.

    Args:
        per_feature: feature name -> ``(n_core, n_scales)`` values, columns in
            the order of ``scales``.
        scales: candidate diameters.
        y: labels.
        cfg: thresholds and ``max_scales``.

    Returns:
        The winning scales in ascending order (ties favour smaller scales).
    """
    scales = list(scales)
    votes = np.zeros(len(scales), np.int64)
    for name, mat in per_feature.items():
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape[1] != len(scales):
            raise ValueError(f"{name}: expected {len(scales)} scale columns")
        for k in prune_features(mat, y, cfg):
            votes[k] += 1
    order = sorted(range(len(scales)), key=lambda k: (-votes[k], scales[k]))
    win = [scales[k] for k in order[:cfg.max_scales] if votes[k] > 0]
    return sorted(win)


@dataclass
class SelectionReport:
    ig_scores: Dict[str, float] = field(default_factory=dict)
    kept_features: List[str] = field(default_factory=list)
    kept_scales: List[float] = field(default_factory=list)
    candidates: List[str] = field(default_factory=list)
    correlated: List[Tuple[str, str, float]] = field(default_factory=list)
    # (iteration, predictor removed after this iteration or "", oob, n_predictors)
    elimination_trace: List[Tuple[int, str, float, int]] = field(default_factory=list)
    chosen_iteration: int = 0
    chosen_predictors: List[str] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iteration,removed,oob,n_predictors"]
        for it, tok, oob, k in self.elimination_trace:
            lines.append(f"{it},{tok},{oob!r},{k}")
        return "\n".join(lines) + "\n"


def backward_eliminate(X, y, cfg: SelectionConfig = SelectionConfig(),
                       rf_params: ForestParams = ForestParams(), seed: int = 42,
                       columns: Optional[Sequence[str]] = None,
                       threads: Optional[int] = None,
                       report: Optional[SelectionReport] = None) -> SelectionReport:
    """Drop the least important predictor per iteration while monitoring OOB.

    Stops when one predictor is left, or when the best OOB of the last
    ``window`` iterations sits more than ``oob_drop_threshold`` below the best
    OOB seen so far.
    """
    X = np.asarray(X, dtype=np.float64)
    columns = list(columns) if columns is not None else [f"c{j}" for j in range(X.shape[1])]
    report = report or SelectionReport()
    active = list(range(X.shape[1]))
    history: List[Tuple[List[int], float]] = []
    it = 0
    while True:
        model = train(X[:, active], y, rf_params, seed=seed,
                      columns=[columns[j] for j in active], threads=threads)
        oob = model.oob_score
        history.append((list(active), oob))
        scores = np.array([h[1] for h in history])
        best = np.nanmax(scores)
        recent = np.nanmax(scores[-cfg.window:])
        stop = len(active) == 1 or (len(history) > cfg.window and best - recent > cfg.oob_drop_threshold)
        if stop:
            report.elimination_trace.append((it, "", oob, len(active)))
            break
        # first minimum = lowest importance, earlier column on ties
        worst = int(np.argmin(model.importance))
        removed = active.pop(worst)
        report.elimination_trace.append((it, columns[removed], oob, len(active) + 1))
        logger.info("iteration %d: oob %.4f, removing %s", it, oob, columns[removed])
        it += 1
    scores = np.array([h[1] for h in history])
    scores = np.where(np.isnan(scores), -np.inf, scores)
    chosen = int(len(scores) - 1 - np.argmax(scores[::-1]))
    report.chosen_iteration = chosen
    report.chosen_predictors = [columns[j] for j in history[chosen][0]]
    return report


def select_predictors(fm: FeatureMatrix, y, cfg: SelectionConfig = SelectionConfig(),
                      rf_params: ForestParams = ForestParams(), seed: int = 42,
                      threads: Optional[int] = None) -> SelectionReport:
    """Full reduction of a multi-scale feature matrix to an optimised predictor list."""
    y = np.asarray(y)
    report = SelectionReport()
    families: Dict[FeatureDescriptor, Dict[float, int]] = {}
    bypass: List[int] = []
    for j, d in enumerate(fm.columns):
        if d.is_spherical:
            families.setdefault(d.family(), {})[d.diameter] = j
        else:
            bypass.append(j)

    fam_list = list(families)
    eval_cols = []
    for fam in fam_list:
        if cfg.eval_scale not in families[fam]:
            raise ConfigurationError(
                f"{format_feature(fam)} is not available at the evaluation scale {cfg.eval_scale:g}")
        eval_cols.append(families[fam][cfg.eval_scale])
    kept_fams: List[FeatureDescriptor] = []
    if fam_list:
        res = prune_columns(fm.values[:, eval_cols], y, cfg.corr_threshold, cfg.ig_bins)
        for i, fam in enumerate(fam_list):
            report.ig_scores[format_feature(fam)] = float(res.ig[i])
        for j, k, r in res.dropped:
            report.correlated.append((format_feature(fam_list[j]), format_feature(fam_list[k]), r))
        kept_fams = [fam_list[i] for i in res.kept]
        report.kept_features = [format_feature(f) for f in kept_fams]

        all_scales = sorted({s for f in kept_fams for s in families[f]})
        per_feature = {}
        for fam in kept_fams:
            if set(families[fam]) != set(all_scales):
                raise ConfigurationError(f"{format_feature(fam)} is not computed at every scale")
            per_feature[format_feature(fam)] = fm.values[:, [families[fam][s] for s in all_scales]]
        report.kept_scales = vote_scales(per_feature, all_scales, y, cfg)

    spherical = [families[f][s] for f in kept_fams for s in report.kept_scales]
    if spherical:
        res = prune_columns(fm.values[:, spherical], y, cfg.corr_threshold, cfg.ig_bins)
        spherical = [spherical[i] for i in sorted(res.kept)]
    cand = spherical + bypass
    if not cand:
        raise ConfigurationError("no predictor left to select from")
    report.candidates = [format_feature(fm.columns[j]) for j in cand]
    logger.info("%d families kept, scales %s, %d candidates",
                len(kept_fams), report.kept_scales, len(cand))
    backward_eliminate(fm.values[:, cand], y, cfg, rf_params, seed,
                       report.candidates, threads, report)
    return report


def optimized_parameter_file(report: SelectionReport, bindings: Dict[str, str]) -> str:
    """Parameter file that computes exactly the chosen predictors."""
    descs = [parse_feature(t) for t in report.chosen_predictors]
    return write_parameter_file(spec_for_predictors(descs, bindings))
