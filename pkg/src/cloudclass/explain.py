"""Interventional Shapley values of the forest's class-probability output.

The explained output for a target class is the fraction of trees voting for
it. For a feature subset ``S`` the value of the game is the mean output over
background rows ``z`` of the hybrid row taking ``x`` on ``S`` and ``z``
elsewhere.

The exact method walks every tree once per (row, background row) pair. A
feature is committed to the ``x`` side or the ``z`` side only where the two
choices would route differently, surrogate splits included. Each leaf
reached then contributes the closed-form Shapley value of the game
"all features of A taken from x and none of B", which is

    +v (|A|-1)! |B|! / (|A|+|B|)!   for features in A
    -v |A|! (|B|-1)! / (|A|+|B|)!   for features in B

The result equals brute-force enumeration of all 2^f subsets while costing
time proportional to the paths explored, so it is used at any predictor
count. Monte-Carlo permutation sampling is available as a cross-check.

Missing entries of ``x`` are never taken from ``x``: the feature always
comes from the background row and its attribution is 0.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from numba import njit

from .dsl import parse_feature
from .errors import FeatureSyntaxError, SchemaError
from .features import FeatureMatrix
from .forest import ForestModel, tree_seed

logger = logging.getLogger(__name__)

DEFAULT_BACKGROUND = 200
DEFAULT_PERMUTATIONS = 2000


@dataclass
class ShapleyRow:
    """Attribution of one row. ``base_value + phi.sum() == prediction``.

    ``prediction`` is the model output for the row with its missing entries
    averaged over the background (the plain model output when nothing is
    missing).
    """

    base_value: float
    phi: np.ndarray
    prediction: float
    target_class: object = None


def background_sample(X, n: int = DEFAULT_BACKGROUND, seed: int = 42) -> np.ndarray:
    """Seeded subsample of at most ``n`` rows (all rows when fewer)."""
    X = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if len(X) <= n:
        return np.ascontiguousarray(X, dtype=np.float64)
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size=n, replace=False))
    return np.ascontiguousarray(X[idx], dtype=np.float64)


def _weights(max_len: int):
    """Leaf weight tables indexed by (|A|, |B|)."""
    L = max_len + 1
    wpos = np.zeros((L, L))
    wneg = np.zeros((L, L))
    for a in range(L):
        for b in range(L):
            if a + b == 0 or a + b > max_len:
                continue
            lt = math.lgamma(a + b + 1)
            if a > 0:
                wpos[a, b] = math.exp(math.lgamma(a) + math.lgamma(b + 1) - lt)
            if b > 0:
                wneg[a, b] = math.exp(math.lgamma(a + 1) + math.lgamma(b) - lt)
    return wpos, wneg


@njit(nogil=True, cache=True)
def _side(v, t, rev):
    """0 missing, 1 left, 2 right."""
    if v != v:
        return 0
    gl = v <= t
    if rev:
        gl = not gl
    return 1 if gl else 2


@njit(nogil=True, cache=True)
def _tree_phi(X, targets, Z, feat, thr, left, right, dleft, sfeat, sthr, srev, nsur,
              leaf_class, wpos, wneg, phi, stack_cap):
    """Add one tree's exact contributions (summed over background rows) to ``phi``."""
    n_x, f = X.shape
    n_z = Z.shape[0]
    trail_f = np.empty(f, np.int64)
    trail_s = np.empty(f, np.int64)  # 1 = taken from x, 0 = from z
    where = np.full(f, -1, np.int64)  # position in the trail or -1
    st_node = np.empty(stack_cap, np.int64)
    st_base = np.empty(stack_cap, np.int64)
    st_nnew = np.empty(stack_cap, np.int64)
    st_f = np.empty((stack_cap, 6), np.int64)
    st_s = np.empty((stack_cap, 6), np.int64)
    # per-node enumeration of routing outcomes
    q_pos = np.empty(128, np.int64)
    q_bits = np.empty(128, np.int64)
    q_vals = np.empty(128, np.int64)
    seq_f = np.empty(6, np.int64)
    seq_t = np.empty(6)
    seq_r = np.empty(6, np.bool_)
    for i in range(n_x):
        x = X[i]
        target = targets[i]
        for b in range(n_z):
            z = Z[b]
            n_trail = 0
            sp = 1
            st_node[0] = 0
            st_base[0] = 0
            st_nnew[0] = 0
            while sp > 0:
                sp -= 1
                node = st_node[sp]
                # restore the trail of this entry
                for k in range(st_base[sp], n_trail):
                    where[trail_f[k]] = -1
                n_trail = st_base[sp]
                for k in range(st_nnew[sp]):
                    g = st_f[sp, k]
                    trail_f[n_trail] = g
                    trail_s[n_trail] = st_s[sp, k]
                    where[g] = n_trail
                    n_trail += 1
                if left[node] < 0:
                    if leaf_class[node] == target and n_trail > 0:
                        a = 0
                        for k in range(n_trail):
                            a += trail_s[k]
                        bb = n_trail - a
                        wp = wpos[a, bb]
                        wn = wneg[a, bb]
                        for k in range(n_trail):
                            if trail_s[k] == 1:
                                phi[i, trail_f[k]] += wp
                            else:
                                phi[i, trail_f[k]] -= wn
                    continue
                ns = nsur[node]
                seq_f[0] = feat[node]
                seq_t[0] = thr[node]
                seq_r[0] = False
                for k in range(ns):
                    seq_f[k + 1] = sfeat[node, k]
                    seq_t[k + 1] = sthr[node, k]
                    seq_r[k + 1] = srev[node, k]
                n_seq = ns + 1
                qn = 1
                q_pos[0] = 0
                q_bits[0] = 0
                q_vals[0] = 0
                while qn > 0:
                    qn -= 1
                    pos = q_pos[qn]
                    bits = q_bits[qn]
                    vals = q_vals[qn]
                    go = -1
                    while pos < n_seq:
                        g = seq_f[pos]
                        if (bits >> pos) & 1:
                            from_x = (vals >> pos) & 1
                            v = x[g] if from_x == 1 else z[g]
                            o = _side(v, seq_t[pos], seq_r[pos])
                        elif where[g] >= 0:
                            v = x[g] if trail_s[where[g]] == 1 else z[g]
                            o = _side(v, seq_t[pos], seq_r[pos])
                        else:
                            oz = _side(z[g], seq_t[pos], seq_r[pos])
                            vx = x[g]
                            ox = oz if vx != vx else _side(vx, seq_t[pos], seq_r[pos])
                            if ox != oz:
                                # branch: commit g to the z side here, queue the x side
                                q_pos[qn] = pos
                                q_bits[qn] = bits | (1 << pos)
                                q_vals[qn] = vals | (1 << pos)
                                qn += 1
                                bits = bits | (1 << pos)
                            o = oz
                        if o == 0:
                            pos += 1
                            continue
                        go = 1 if o == 1 else 0
                        break
                    if go < 0:
                        go = 1 if dleft[node] else 0
                    child = left[node] if go == 1 else right[node]
                    st_node[sp] = child
                    st_base[sp] = n_trail
                    nn = 0
                    for p in range(n_seq):
                        if (bits >> p) & 1:
                            st_f[sp, nn] = seq_f[p]
                            st_s[sp, nn] = (vals >> p) & 1
                            nn += 1
                    st_nnew[sp] = nn
                    sp += 1
            for k in range(n_trail):
                where[trail_f[k]] = -1


@njit(nogil=True, cache=True)
def _forest_output(h, offsets, feat, thr, left, right, dleft, sfeat, sthr, srev, nsur,
                   leaf_class, target):
    """Number of trees voting ``target`` for row ``h`` (packed forest arrays)."""
    hits = 0
    for t in range(offsets.shape[0] - 1):
        node = offsets[t]
        base = offsets[t]
        while left[node] >= 0:
            v = h[feat[node]]
            if v == v:
                gl = v <= thr[node]
            else:
                gl = dleft[node]
                for j in range(nsur[node]):
                    sv = h[sfeat[node, j]]
                    if sv == sv:
                        gl = (sv > sthr[node, j]) if srev[node, j] else (sv <= sthr[node, j])
                        break
            node = base + (left[node] if gl else right[node])
        if leaf_class[node] == target:
            hits += 1
    return hits


@njit(nogil=True, cache=True)
def _permutation_phi(X, targets, Z, n_perm, seeds, offsets, feat, thr, left, right, dleft,
                     sfeat, sthr, srev, nsur, leaf_class, phi):
    n_x, f = X.shape
    n_z = Z.shape[0]
    perm = np.empty(f, np.int64)
    h = np.empty(f)
    for i in range(n_x):
        x = X[i]
        state = seeds[i]
        for k in range(n_perm):
            for j in range(f):
                perm[j] = j
            # Fisher-Yates with splitmix64
            for j in range(f - 1, 0, -1):
                state += np.uint64(0x9E3779B97F4A7C15)
                r = state
                r = (r ^ (r >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
                r = (r ^ (r >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
                r = r ^ (r >> np.uint64(31))
                u = int(r % np.uint64(j + 1))
                tmp = perm[j]
                perm[j] = perm[u]
                perm[u] = tmp
            z = Z[k % n_z]
            for j in range(f):
                h[j] = z[j]
            prev = _forest_output(h, offsets, feat, thr, left, right, dleft, sfeat, sthr,
                                  srev, nsur, leaf_class, targets[i])
            for j in range(f):
                g = perm[j]
                if x[g] != x[g]:
                    continue
                h[g] = x[g]
                cur = _forest_output(h, offsets, feat, thr, left, right, dleft, sfeat, sthr,
                                     srev, nsur, leaf_class, targets[i])
                phi[i, g] += cur - prev
                prev = cur


def _pack(model: ForestModel):
    """Concatenate all trees; child indices stay tree-local."""
    trees = model.trees
    sizes = [t.n_nodes for t in trees]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    width = max(t.sur_feature.shape[1] for t in trees)

    def pad(a, fill):
        out = np.full((a.shape[0], width), fill, dtype=a.dtype)
        out[:, :a.shape[1]] = a
        return out

    return (offsets,
            np.concatenate([t.feature for t in trees]),
            np.concatenate([t.threshold for t in trees]),
            np.concatenate([t.left for t in trees]),
            np.concatenate([t.right for t in trees]),
            np.concatenate([t.default_left for t in trees]),
            np.concatenate([pad(t.sur_feature, -1) for t in trees]),
            np.concatenate([pad(t.sur_threshold, 0.0) for t in trees]),
            np.concatenate([pad(t.sur_reversed, False) for t in trees]),
            np.concatenate([t.n_surrogates for t in trees]),
            np.concatenate([t.leaf_class for t in trees]))


class Explainer:
    """Shapley attributions for one model against a fixed background set.

    Args:
        model: trained forest.
        background: ``(n_bg, f)`` rows or a :class:`FeatureMatrix`; use
            :func:`background_sample` to draw the default 200 training rows.
        method: ``"exact"`` or ``"permutation"``.
        n_permutations: Monte-Carlo sample count (permutation method only).
        seed: seed of the permutation streams.
        threads: row-parallel workers.
    """

    def __init__(self, model: ForestModel, background, method: str = "exact",
                 n_permutations: int = DEFAULT_PERMUTATIONS, seed: int = 42,
                 threads: Optional[int] = None):
        if method not in ("exact", "permutation"):
            raise ValueError(f"unknown method {method!r}")
        if isinstance(background, FeatureMatrix):
            if background.tokens != list(model.columns):
                raise SchemaError("background columns do not match the model")
            background = background.values
        Z = np.ascontiguousarray(np.asarray(background, dtype=np.float64))
        if Z.ndim != 2 or len(Z) == 0:
            raise ValueError("background must be a non-empty 2-D array")
        self.model = model
        self.Z = model._check(Z, None)
        self.method = method
        self.n_permutations = int(n_permutations)
        self.seed = seed
        self.threads = threads
        f = len(model.columns)
        depth = max((t.depth() for t in model.trees), default=0)
        self._stack_cap = 64 * (depth + 2)
        self._w = _weights(f)
        self._packed = _pack(model) if model.trees else None
        self.base_proba = model.predict_proba(self.Z, threads=threads).mean(axis=0)

    def _target_codes(self, X, target_class) -> np.ndarray:
        classes = list(self.model.classes)
        if target_class is None:
            counts = self.model.vote_counts(X, threads=self.threads)
            return np.argmax(counts, axis=1).astype(np.int64)
        labels = np.broadcast_to(np.asarray(target_class, dtype=object), (len(X),))
        try:
            return np.array([classes.index(c) for c in labels], np.int64)
        except ValueError:
            raise SchemaError(f"target class not in the model classes {classes}") from None

    def _chunk(self, X, codes) -> np.ndarray:
        phi = np.zeros(X.shape)
        if self.method == "exact":
            wpos, wneg = self._w
            for t in self.model.trees:
                _tree_phi(X, codes, self.Z, t.feature, t.threshold, t.left, t.right,
                          t.default_left, t.sur_feature, t.sur_threshold, t.sur_reversed,
                          t.n_surrogates, t.leaf_class, wpos, wneg, phi, self._stack_cap)
            return phi / (len(self.model.trees) * len(self.Z))
        return phi

    def shap_values(self, X, target_class=None, row_ids: Optional[Sequence[int]] = None):
        """Attributions for every row of ``X``.

        Args:
            X: ``(n, f)`` rows (or a FeatureMatrix with the model's columns).
            target_class: class label explained for all rows, a per-row
                sequence, or None for each row's predicted class.
            row_ids: stable row identifiers seeding the permutation streams
                (defaults to the row positions).

        Returns:
            ``(phi, base, prediction, codes)``: ``(n, f)`` attributions, the
            ``(n,)`` base values, outputs, and explained class indices.
        """
        if isinstance(X, FeatureMatrix):
            if X.tokens != list(self.model.columns):
                raise SchemaError("row columns do not match the model")
            X = X.values
        X = self.model._check(np.atleast_2d(np.asarray(X, dtype=np.float64)), None)
        codes = self._target_codes(X, target_class)
        n = len(X)
        ids = np.arange(n) if row_ids is None else np.asarray(row_ids, np.int64)
        workers = self.threads or os.cpu_count() or 1
        bounds = list(range(0, n, 64)) + [n]
        parts = [(bounds[k], bounds[k + 1]) for k in range(len(bounds) - 1)]

        if self.method == "exact":
            def work(se):
                s, e = se
                return self._chunk(np.ascontiguousarray(X[s:e]), codes[s:e])
        else:
            packed = self._packed
            seeds = np.array([tree_seed(self.seed, int(i)) for i in ids], np.uint64)

            def work(se):
                s, e = se
                phi = np.zeros((e - s, X.shape[1]))
                _permutation_phi(np.ascontiguousarray(X[s:e]), codes[s:e], self.Z,
                                 self.n_permutations, seeds[s:e], *packed, phi)
                return phi / (self.n_permutations * len(self.model.trees))

        if workers > 1 and len(parts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                chunks = list(pool.map(work, parts))
        else:
            chunks = [work(p) for p in parts]
        phi = np.concatenate(chunks) if chunks else np.zeros((0, X.shape[1]))
        base = self.base_proba[codes]
        if self.method == "exact":
            pred = base + phi.sum(axis=1)
        else:
            pred = self._completed_output(X, codes)
        return phi, base, pred, codes

    def _completed_output(self, X, codes) -> np.ndarray:
        """Output with missing entries of each row averaged over the background."""
        out = np.empty(len(X))
        for i, x in enumerate(X):
            H = self.Z.copy()
            ok = ~np.isnan(x)
            H[:, ok] = x[ok]
            out[i] = self.model.predict_proba(H, threads=1)[:, codes[i]].mean()
        return out

    def explain(self, x, target_class=None) -> ShapleyRow:
        phi, base, pred, codes = self.shap_values(np.asarray(x, dtype=np.float64).reshape(1, -1),
                                                  target_class)
        return ShapleyRow(float(base[0]), phi[0], float(pred[0]), self.model.classes[codes[0]])


def shapley_values(model: ForestModel, x, background, target_class=None,
                   method: str = "exact", n_permutations: int = DEFAULT_PERMUTATIONS,
                   seed: int = 42) -> ShapleyRow:
    """Shapley attribution of one row for ``target_class`` (default: its prediction)."""
    return Explainer(model, background, method, n_permutations, seed).explain(x, target_class)


def scale_label(token: str) -> str:
    try:
        return parse_feature(token).scale_label()
    except FeatureSyntaxError:
        return "unknown"


@dataclass
class ShapleySummary:
    classes: List
    columns: List[str]
    per_class: np.ndarray  # (n_classes, f), NaN for classes never predicted
    scale_labels: List[str]
    per_scale: np.ndarray  # (n_classes, n_scales)
    n_rows: np.ndarray  # rows predicted per class

    def to_csv(self) -> str:
        lines = ["class," + ",".join(self.columns)]
        for c, row in zip(self.classes, self.per_class):
            lines.append(f"{c}," + ",".join("NaN" if v != v else repr(float(v)) for v in row))
        lines.append("")
        lines.append("class," + ",".join(self.scale_labels))
        for c, row in zip(self.classes, self.per_scale):
            lines.append(f"{c}," + ",".join("NaN" if v != v else repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def _scale_key(label: str):
    if label == "point":
        return (0, 0.0)
    if label.endswith("NN"):
        return (1, float(label[:-2]))
    try:
        return (2, float(label))
    except ValueError:
        return (3, 0.0)


def summarize(classes, columns: Sequence[str], phi: np.ndarray, pred_codes: np.ndarray) -> ShapleySummary:
    """Per-class mean |phi| over the rows predicted as that class, plus per-scale sums."""
    columns = list(columns)
    nc = len(classes)
    per_class = np.full((nc, len(columns)), np.nan)
    counts = np.zeros(nc, np.int64)
    for c in range(nc):
        sel = pred_codes == c
        counts[c] = int(sel.sum())
        if counts[c]:
            per_class[c] = np.abs(phi[sel]).mean(axis=0)
    labels = [scale_label(t) for t in columns]
    uniq = sorted(set(labels), key=_scale_key)
    per_scale = np.zeros((nc, len(uniq)))
    for k, lab in enumerate(uniq):
        cols = [j for j, l in enumerate(labels) if l == lab]
        per_scale[:, k] = per_class[:, cols].sum(axis=1)
    return ShapleySummary(list(classes), columns, per_class, uniq, per_scale, counts)


def mean_abs_shapley(model: ForestModel, X, y_pred, background=None,
                     method: str = "exact", seed: int = 42,
                     threads: Optional[int] = None) -> ShapleySummary:
    """Mean absolute Shapley value per class (over rows predicted as it) and per scale.

    Each row is explained for its own predicted class ``y_pred``. The
    background defaults to a seeded 200-row sample of ``X``.
    """
    Xv = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    y_pred = np.asarray(y_pred)
    if len(y_pred) != len(Xv):
        raise SchemaError("one predicted label per row is required")
    if background is None:
        background = background_sample(Xv, DEFAULT_BACKGROUND, seed)
    ex = Explainer(model, background, method=method, seed=seed, threads=threads)
    phi, _, _, codes = ex.shap_values(Xv, list(y_pred))
    return summarize(model.classes, model.columns, phi, codes)
