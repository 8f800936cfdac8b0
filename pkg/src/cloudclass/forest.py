"""Bagged Gini decision trees with surrogate splits for missing values.

Each tree draws its own splitmix64 stream from ``(master_seed, tree index)``
and is grown by a ``nogil`` kernel, so trees can be trained on any number of
threads and still come out identical.

Split search at a node looks at the rows whose candidate value is present and
scales the Gini decrease by the fraction of node rows that are present. Rows
missing the chosen predictor are routed by the first usable surrogate split
(surrogates are searched among the other candidate predictors of the node and
kept only when they beat the majority-direction baseline), else by the
majority direction of the present rows.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numba import njit

from .errors import ModelFormatError, SchemaError, TrainingError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_SURROGATES = 5
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 150
    max_depth: int = 25
    mtry: Optional[int] = None  # floor(sqrt(f)) when None
    min_leaf: int = 1
    max_surrogates: int = MAX_SURROGATES

    def resolved_mtry(self, f: int) -> int:
        return max(1, min(f, self.mtry if self.mtry else int(math.isqrt(f))))


def _splitmix(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def tree_seed(master_seed: int, tree_index: int) -> int:
    """Initial PRNG state of one tree; depends only on the master seed and index."""
    return _splitmix(_splitmix(master_seed & _MASK64) ^ (tree_index & _MASK64))


@njit(nogil=True, cache=True)
def _next(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(nogil=True, cache=True)
def _randint(state, n):
    """Uniform integer in [0, n)."""
    u = (_next(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    j = int(u * n)
    return j if j < n else n - 1


@njit(nogil=True, cache=True)
def _gini(counts, total):
    if total == 0:
        return 0.0
    acc = 0.0
    for c in range(counts.shape[0]):
        p = counts[c] / total
        acc += p * p
    return 1.0 - acc


@njit(nogil=True, cache=True)
def _best_threshold(XT, y, rows, s, e, col, n_classes, min_leaf, vals, cls, cl, ct):
    """Best Gini split of one column over the present rows of ``rows[s:e]``.

    Returns (decrease, threshold, n_present, constant_flag).
    """
    k = 0
    xc = XT[col]
    for i in range(s, e):
        v = xc[rows[i]]
        if v == v:
            vals[k] = v
            cls[k] = y[rows[i]]
            k += 1
    if k < 2:
        return -1.0, 0.0, k, True
    order = np.argsort(vals[:k])
    if vals[order[0]] == vals[order[k - 1]]:
        return -1.0, 0.0, k, True
    ct[:] = 0
    for i in range(k):
        ct[cls[i]] += 1
    g_parent = _gini(ct, k)
    frac = k / (e - s)
    cl[:] = 0
    best = -1.0
    thr = 0.0
    for i in range(k - 1):
        cl[cls[order[i]]] += 1
        a = vals[order[i]]
        b = vals[order[i + 1]]
        if a == b:
            continue
        nl = i + 1
        nr = k - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        sl = 0.0
        sq = 0.0
        for c in range(n_classes):
            p = cl[c] / nl
            sl += p * p
            q = (ct[c] - cl[c]) / nr
            sq += q * q
        gl = 1.0 - sl
        gr = 1.0 - sq
        dec = frac * (g_parent - (nl / k) * gl - (nr / k) * gr)
        if dec > best:
            best = dec
            t = a + (b - a) / 2.0
            thr = t if t < b else a
    return best, thr, k, False


@njit(nogil=True, cache=True)
def _best_threshold_sweep(XT, y, rows, s, e, col, n_classes, min_leaf, node_counts,
                          order, n_present, mult, cl, ct):
    """Same result as :func:`_best_threshold`, scanning the forest-wide sorted
    order of the column instead of sorting the node rows (faster for big nodes).

    ``mult[r]`` holds how many times row ``r`` occurs in the node.
    """
    xc = XT[col]
    for c in range(n_classes):
        ct[c] = node_counts[c]
    k = e - s
    for i in range(s, e):
        r = rows[i]
        if xc[r] != xc[r]:
            ct[y[r]] -= 1
            k -= 1
    if k < 2:
        return -1.0, 0.0, k, True
    g_parent = _gini(ct, k)
    frac = k / (e - s)
    cl[:] = 0
    best = -1.0
    thr = 0.0
    nl = 0
    prev = 0.0
    distinct = 0
    oc = order[col]
    for j in range(n_present[col]):
        r = oc[j]
        w = mult[r]
        if w == 0:
            continue
        v = xc[r]
        if distinct > 0 and v != prev:
            nr = k - nl
            if nl >= min_leaf and nr >= min_leaf:
                sl = 0.0
                sq = 0.0
                for c in range(n_classes):
                    p = cl[c] / nl
                    sl += p * p
                    q = (ct[c] - cl[c]) / nr
                    sq += q * q
                gl = 1.0 - sl
                gr = 1.0 - sq
                dec = frac * (g_parent - (nl / k) * gl - (nr / k) * gr)
                if dec > best:
                    best = dec
                    t = prev + (v - prev) / 2.0
                    thr = t if t < v else prev
        if distinct == 0 or v != prev:
            distinct += 1
            prev = v
        cl[y[r]] += w
        nl += w
    if distinct < 2:
        return -1.0, 0.0, k, True
    return best, thr, k, False


@njit(nogil=True, cache=True)
def _surrogate(XT, rows, s, e, col, pcol, pthr, vals, side):
    """Best single-threshold mimic of the primary split ``pcol <= pthr``.

    Returns (agreement, threshold, reversed, baseline); agreement is -1 when
    no threshold separates the jointly present rows.
    """
    k = 0
    for i in range(s, e):
        r = rows[i]
        pv = XT[pcol, r]
        v = XT[col, r]
        if pv == pv and v == v:
            vals[k] = v
            side[k] = 1 if pv <= pthr else 0
            k += 1
    if k == 0:
        return -1.0, 0.0, False, 1.0
    n_left = 0
    for i in range(k):
        n_left += side[i]
    baseline = max(n_left, k - n_left) / k
    order = np.argsort(vals[:k])
    best = -1.0
    thr = 0.0
    rev = False
    left_l = 0
    left_r = 0
    for i in range(k - 1):
        if side[order[i]] == 1:
            left_l += 1
        else:
            left_r += 1
        a = vals[order[i]]
        b = vals[order[i + 1]]
        if a == b:
            continue
        # same orientation: value <= t goes left
        same = (left_l + (k - n_left - left_r)) / k
        other = 1.0 - same
        if same > best or other > best:
            t = a + (b - a) / 2.0
            thr = t if t < b else a
            if same >= other:
                best = same
                rev = False
            else:
                best = other
                rev = True
    return best, thr, rev, baseline


@njit(nogil=True, cache=True)
def go_left(x, feat, thr, dleft, sfeat, sthr, srev, nsur, node):
    v = x[feat[node]]
    if v == v:
        return v <= thr[node]
    for j in range(nsur[node]):
        sv = x[sfeat[node, j]]
        if sv == sv:
            left = sv <= sthr[node, j]
            return (not left) if srev[node, j] else left
    return dleft[node]


@njit(nogil=True, cache=True)
def _grow_tree(XT, y, n_classes, usable, mtry, max_depth, min_leaf, max_sur, seed,
               order, n_present):
    """Grow one tree on a bootstrap sample; ``XT`` is the ``(f, n)`` transposed matrix."""
    f, n = XT.shape
    state = np.empty(1, np.uint64)
    state[0] = seed
    rows = np.empty(n, np.int64)
    inbag = np.zeros(n, np.int64)
    for i in range(n):
        r = _randint(state, n)
        rows[i] = r
        inbag[r] += 1

    cap = 2 * n + 1
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    dleft = np.ones(cap, np.bool_)
    sfeat = np.full((cap, max_sur if max_sur > 0 else 1), -1, np.int64)
    sthr = np.zeros((cap, max_sur if max_sur > 0 else 1))
    srev = np.zeros((cap, max_sur if max_sur > 0 else 1), np.bool_)
    sagree = np.zeros((cap, max_sur if max_sur > 0 else 1))
    nsur = np.zeros(cap, np.int64)
    value = np.zeros((cap, n_classes), np.int64)
    n_node = np.zeros(cap, np.int64)
    decrease = np.zeros(cap)

    vals = np.empty(n)
    cls = np.empty(n, np.int64)
    side = np.empty(n, np.int64)
    cl = np.zeros(n_classes, np.int64)
    ct = np.zeros(n_classes, np.int64)
    cand_feats = np.empty(f, np.int64)
    pool = np.empty(f, np.int64)
    n_pool = 0
    for j in range(f):
        if usable[j]:
            pool[n_pool] = j
            n_pool += 1
    tmp = np.empty(n, np.int64)
    mult = np.zeros(n, np.int64)
    sur_f = np.empty(f, np.int64)
    sur_t = np.empty(f)
    sur_r = np.empty(f, np.bool_)
    sur_a = np.empty(f)

    st_node = np.empty(cap, np.int64)
    st_s = np.empty(cap, np.int64)
    st_e = np.empty(cap, np.int64)
    st_d = np.empty(cap, np.int64)
    sp = 1
    st_node[0] = 0
    st_s[0] = 0
    st_e[0] = n
    st_d[0] = 0
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_s[sp]
        e = st_e[sp]
        depth = st_d[sp]
        m = e - s
        n_node[node] = m
        for i in range(s, e):
            value[node, y[rows[i]]] += 1
        pure = False
        for c in range(n_classes):
            if value[node, c] == m:
                pure = True
        if pure or depth >= max_depth or m < 2 * min_leaf:
            continue
        big = 4 * m >= n
        if big:
            for i in range(s, e):
                mult[rows[i]] += 1

        # lazy Fisher-Yates draw of candidate predictors
        for j in range(n_pool):
            cand_feats[j] = pool[j]
        best_dec = -1.0
        best_col = -1
        best_thr = 0.0
        n_tried = 0
        n_cand = 0
        i = 0
        while i < n_pool and n_tried < mtry:
            j = i + _randint(state, n_pool - i)
            t = cand_feats[i]
            cand_feats[i] = cand_feats[j]
            cand_feats[j] = t
            col = cand_feats[i]
            i += 1
            if big:
                dec, th, k, const = _best_threshold_sweep(XT, y, rows, s, e, col, n_classes,
                                                          min_leaf, value[node], order,
                                                          n_present, mult, cl, ct)
            else:
                dec, th, k, const = _best_threshold(XT, y, rows, s, e, col, n_classes,
                                                    min_leaf, vals, cls, cl, ct)
            if const:
                continue
            n_tried += 1
            # the consumed prefix doubles as the list of evaluated candidates
            cand_feats[n_cand] = col
            n_cand += 1
            if dec > best_dec:
                best_dec = dec
                best_col = col
                best_thr = th
        if big:
            for i in range(s, e):
                mult[rows[i]] = 0
        if best_col < 0:
            continue

        # majority direction of present rows, then surrogates
        n_l = 0
        n_r = 0
        for i2 in range(s, e):
            v = XT[best_col, rows[i2]]
            if v == v:
                if v <= best_thr:
                    n_l += 1
                else:
                    n_r += 1
        feat[node] = best_col
        thr[node] = best_thr
        dleft[node] = n_l >= n_r
        decrease[node] = best_dec
        ns = 0
        if n_l + n_r < m and max_sur > 0:
            for c2 in range(n_cand):
                col = cand_feats[c2]
                if col == best_col:
                    continue
                agree, sth, rev, base = _surrogate(XT, rows, s, e, col, best_col, best_thr, vals, side)
                if agree > base:
                    sur_f[ns] = col
                    sur_t[ns] = sth
                    sur_r[ns] = rev
                    sur_a[ns] = agree
                    ns += 1
            # stable sort by agreement, descending
            sorder = np.argsort(-sur_a[:ns], kind="mergesort")
            ns = min(ns, max_sur)
            for q in range(ns):
                sfeat[node, q] = sur_f[sorder[q]]
                sthr[node, q] = sur_t[sorder[q]]
                srev[node, q] = sur_r[sorder[q]]
                sagree[node, q] = sur_a[sorder[q]]
        nsur[node] = ns

        # partition rows[s:e] into left then right, keeping relative order
        bx = XT[best_col]
        nl = 0
        for i2 in range(s, e):
            r = rows[i2]
            v = bx[r]
            if v == v:
                gl = v <= best_thr
            else:
                gl = dleft[node]
                for q in range(ns):
                    sv = XT[sfeat[node, q], r]
                    if sv == sv:
                        gl = (sv > sthr[node, q]) if srev[node, q] else (sv <= sthr[node, q])
                        break
            side[i2 - s] = 1 if gl else 0
            if gl:
                tmp[nl] = r
                nl += 1
        nr = 0
        for i2 in range(s, e):
            if side[i2 - s] == 0:
                tmp[nl + nr] = rows[i2]
                nr += 1
        for i2 in range(m):
            rows[s + i2] = tmp[i2]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[node] = lid
        right[node] = rid
        # push right first so the left subtree is expanded first
        st_node[sp] = rid
        st_s[sp] = s + nl
        st_e[sp] = e
        st_d[sp] = depth + 1
        sp += 1
        st_node[sp] = lid
        st_s[sp] = s
        st_e[sp] = s + nl
        st_d[sp] = depth + 1
        sp += 1

    k = n_nodes
    return (feat[:k].copy(), thr[:k].copy(), left[:k].copy(), right[:k].copy(),
            dleft[:k].copy(), sfeat[:k].copy(), sthr[:k].copy(), srev[:k].copy(),
            sagree[:k].copy(), nsur[:k].copy(), value[:k].copy(), n_node[:k].copy(),
            decrease[:k].copy(), inbag == 0)


@njit(nogil=True, cache=True)
def leaf_of(x, feat, thr, left, right, dleft, sfeat, sthr, srev, nsur):
    node = 0
    while left[node] >= 0:
        v = x[feat[node]]
        if v == v:
            gl = v <= thr[node]
        else:
            gl = dleft[node]
            for j in range(nsur[node]):
                sv = x[sfeat[node, j]]
                if sv == sv:
                    gl = (sv > sthr[node, j]) if srev[node, j] else (sv <= sthr[node, j])
                    break
        node = left[node] if gl else right[node]
    return node


@njit(nogil=True, cache=True)
def _tree_votes(X, feat, thr, left, right, dleft, sfeat, sthr, srev, nsur, leaf_class, out):
    for i in range(X.shape[0]):
        node = 0
        while left[node] >= 0:
            v = X[i, feat[node]]
            if v == v:
                gl = v <= thr[node]
            else:
                gl = dleft[node]
                for j in range(nsur[node]):
                    sv = X[i, sfeat[node, j]]
                    if sv == sv:
                        gl = (sv > sthr[node, j]) if srev[node, j] else (sv <= sthr[node, j])
                        break
            node = left[node] if gl else right[node]
        out[i] = leaf_class[node]


def presort(XT: np.ndarray):
    """Per column, the rows with a present value in ascending value order."""
    order = np.argsort(XT, axis=1, kind="stable")  # NaN sorts last
    n_present = (~np.isnan(XT)).sum(axis=1).astype(np.int64)
    return np.ascontiguousarray(order.astype(np.int64)), n_present


def _leaf_class(value: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lower class index on ties
    return np.argmax(value, axis=1).astype(np.int64)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    sur_feature: np.ndarray
    sur_threshold: np.ndarray
    sur_reversed: np.ndarray
    sur_agreement: np.ndarray
    n_surrogates: np.ndarray
    value: np.ndarray
    n_node: np.ndarray
    decrease: np.ndarray

    def __post_init__(self):
        self.leaf_class = _leaf_class(self.value)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def routing(self):
        return (self.feature, self.threshold, self.left, self.right, self.default_left,
                self.sur_feature, self.sur_threshold, self.sur_reversed, self.n_surrogates)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, np.int64)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return int(d.max())

    def votes(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), np.int64)
        f, t, l, r, dl, sf, st, sr, ns = self.routing()
        _tree_votes(X, f, t, l, r, dl, sf, st, sr, ns, self.leaf_class, out)
        return out


@dataclass
class ForestModel:
    trees: List[Tree]
    classes: np.ndarray
    columns: List[str]
    params: ForestParams
    importance: np.ndarray
    oob_score: float
    master_seed: int
    oob_masks: np.ndarray = field(repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check(self, X, columns):
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise SchemaError(f"expected {len(self.columns)} predictor columns, got {X.shape}")
        if columns is not None and list(columns) != list(self.columns):
            raise SchemaError("predictor columns do not match the model")
        return X

    def vote_counts(self, X, columns: Optional[Sequence[str]] = None,
                    threads: Optional[int] = None) -> np.ndarray:
        """``(n, n_classes)`` number of trees voting for each class."""
        X = self._check(X, columns)
        counts = np.zeros((len(X), len(self.classes)), np.int64)
        rows = np.arange(len(X))

        def work(tree):
            return tree.votes(X)

        workers = threads or os.cpu_count() or 1
        if workers > 1 and len(self.trees) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                all_votes = list(pool.map(work, self.trees))
        else:
            all_votes = [work(t) for t in self.trees]
        for v in all_votes:
            counts[rows, v] += 1
        return counts

    def predict_proba(self, X, columns=None, threads=None) -> np.ndarray:
        return self.vote_counts(X, columns, threads) / self.n_trees

    def predict(self, X, columns=None, threads=None):
        """Plurality labels and their vote fraction."""
        counts = self.vote_counts(X, columns, threads)
        k = np.argmax(counts, axis=1)
        conf = counts[np.arange(len(k)), k] / self.n_trees
        return self.classes[k], conf


def _encode_labels(y):
    y = np.asarray(y)
    classes, codes = np.unique(y, return_inverse=True)
    return classes, codes.astype(np.int64).reshape(-1)


def oob_from_masks(trees: Sequence[Tree], masks: np.ndarray, X: np.ndarray, codes: np.ndarray,
                   n_classes: int) -> float:
    """Majority-vote accuracy over rows that were out of bag for at least one tree."""
    votes = np.zeros((len(X), n_classes), np.int64)
    rows = np.arange(len(X))
    for tree, mask in zip(trees, masks):
        idx = rows[mask]
        if len(idx):
            votes[idx, tree.votes(X[idx])] += 1
    seen = votes.sum(axis=1) > 0
    if not seen.any():
        logger.warning("no sample was ever out of bag; OOB score undefined")
        return float("nan")
    pred = np.argmax(votes[seen], axis=1)
    return float(np.mean(pred == codes[seen]))


def train(X, y, params: ForestParams = ForestParams(), seed: int = 42,
          columns: Optional[Sequence[str]] = None, threads: Optional[int] = None) -> ForestModel:
    """Grow a forest on ``X`` (NaN = missing) and labels ``y``.

    Args:
        X: ``(n, f)`` predictor matrix.
        y: ``n`` class labels (any sortable values).
        params: forest hyper-parameters.
        seed: master seed; tree ``t`` uses a stream derived from ``(seed, t)``.
        columns: predictor names stored in the model (default ``c0, c1, ...``).
        threads: worker threads; the model does not depend on it.
    """
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim != 2:
        raise TrainingError("X must be two-dimensional")
    n, f = X.shape
    if len(np.asarray(y)) != n:
        raise TrainingError(f"{len(y)} labels for {n} rows")
    classes, codes = _encode_labels(y)
    if len(classes) < 2:
        raise TrainingError("at least two classes are needed to train")
    columns = list(columns) if columns is not None else [f"c{j}" for j in range(f)]
    if len(columns) != f:
        raise TrainingError("one column name per predictor is required")
    usable = ~np.all(np.isnan(X), axis=0)
    for j in np.flatnonzero(~usable):
        logger.warning("ignoring predictor %s: no value present", columns[j])
    if not usable.any():
        raise TrainingError("every predictor is entirely missing")
    mtry = params.resolved_mtry(int(usable.sum()))
    XT = np.ascontiguousarray(X.T)
    order, n_present = presort(XT)

    def grow(t):
        return _grow_tree(XT, codes, len(classes), usable, mtry, params.max_depth,
                          params.min_leaf, params.max_surrogates, np.uint64(tree_seed(seed, t)),
                          order, n_present)

    workers = threads or os.cpu_count() or 1
    if workers > 1 and params.n_trees > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grown = list(pool.map(grow, range(params.n_trees)))
    else:
        grown = [grow(t) for t in range(params.n_trees)]
    trees = [Tree(*g[:13]) for g in grown]
    masks = np.stack([g[13] for g in grown])
    importance = importance_from_trees(trees, f)
    oob = oob_from_masks(trees, masks, X, codes, len(classes))
    return ForestModel(trees, classes, columns, params, importance, oob, int(seed), masks)


def importance_from_trees(trees: Sequence[Tree], f: int) -> np.ndarray:
    """Mean over trees of the reach-weighted Gini decrease, normalised to sum 1."""
    imp = np.zeros(f)
    for t in trees:
        inner = t.left >= 0
        w = t.n_node[inner] / t.n_node[0] * t.decrease[inner]
        np.add.at(imp, t.feature[inner], w)
    total = imp.sum()
    return imp / total if total > 0 else imp


def oob_trace(model: ForestModel, X=None, y=None) -> float:
    """OOB accuracy; recomputed from the stored bootstrap masks when data is given."""
    if X is None:
        return model.oob_score
    X = model._check(X, None)
    codes = np.searchsorted(model.classes, np.asarray(y))
    return oob_from_masks(model.trees, model.oob_masks, X, codes, len(model.classes))


# -- persistence -----------------------------------------------------------------


def _pack_mask(mask: np.ndarray) -> str:
    return np.packbits(mask.astype(np.uint8)).tobytes().hex()


def _unpack_mask(text: str, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(bytes.fromhex(text), np.uint8))[:n].astype(bool)


def _class_value(c):
    return c.item() if hasattr(c, "item") else c


def model_to_dict(model: ForestModel) -> Dict:
    trees = []
    for t in model.trees:
        trees.append({
            "feature": t.feature.tolist(),
            "threshold": t.threshold.tolist(),
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "default_left": t.default_left.astype(int).tolist(),
            "n_surrogates": t.n_surrogates.tolist(),
            "sur_feature": t.sur_feature.tolist(),
            "sur_threshold": t.sur_threshold.tolist(),
            "sur_reversed": t.sur_reversed.astype(int).tolist(),
            "sur_agreement": t.sur_agreement.tolist(),
            "value": t.value.tolist(),
            "n_node": t.n_node.tolist(),
            "decrease": t.decrease.tolist(),
        })
    p = model.params
    return {
        "format": "cloudclass-forest",
        "format_version": FORMAT_VERSION,
        "params": {"n_trees": p.n_trees, "max_depth": p.max_depth, "mtry": p.mtry,
                   "min_leaf": p.min_leaf, "max_surrogates": p.max_surrogates},
        "classes": [_class_value(c) for c in model.classes],
        "columns": list(model.columns),
        "master_seed": model.master_seed,
        "importance": model.importance.tolist(),
        "oob_score": None if model.oob_score != model.oob_score else model.oob_score,
        "n_train": int(model.oob_masks.shape[1]),
        "oob_masks": [_pack_mask(m) for m in model.oob_masks],
        "trees": trees,
    }


def model_from_dict(d: Dict) -> ForestModel:
    if d.get("format") != "cloudclass-forest":
        raise ModelFormatError("not a forest model file")
    if d.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {d.get('format_version')!r}")
    try:
        trees = []
        for t in d["trees"]:
            trees.append(Tree(
                np.array(t["feature"], np.int64), np.array(t["threshold"], np.float64),
                np.array(t["left"], np.int64), np.array(t["right"], np.int64),
                np.array(t["default_left"], bool),
                np.array(t["sur_feature"], np.int64).reshape(len(t["feature"]), -1),
                np.array(t["sur_threshold"], np.float64).reshape(len(t["feature"]), -1),
                np.array(t["sur_reversed"], bool).reshape(len(t["feature"]), -1),
                np.array(t["sur_agreement"], np.float64).reshape(len(t["feature"]), -1),
                np.array(t["n_surrogates"], np.int64),
                np.array(t["value"], np.int64).reshape(len(t["feature"]), -1),
                np.array(t["n_node"], np.int64), np.array(t["decrease"], np.float64)))
        n_train = int(d["n_train"])
        masks = np.stack([_unpack_mask(m, n_train) for m in d["oob_masks"]]) if trees else \
            np.zeros((0, n_train), bool)
        oob = d["oob_score"]
        model = ForestModel(trees, np.array(d["classes"]), list(d["columns"]),
                            ForestParams(**d["params"]), np.array(d["importance"], np.float64),
                            float("nan") if oob is None else float(oob), int(d["master_seed"]), masks)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    if len(model.trees) != model.params.n_trees:
        raise ModelFormatError("tree count does not match the stored parameters")
    return model


def save_model(model: ForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> ForestModel:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: truncated or invalid model file ({exc})") from None
    return model_from_dict(d)
