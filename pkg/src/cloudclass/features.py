"""Feature extraction at core points.

Every spherical neighbourhood is summarised into a fixed block of 64 slots:
dimensionality, geometry and height features followed by the six statistics
of each per-point attribute. A column of the final matrix is either one slot
of one (cloud, scale) block, a combination of the same slot in two clouds, a
nearest-point attribute, or a kNN distance.

Rows are computed in fixed-size chunks by ``nogil`` numba kernels, so a pool
of threads can share the work. Each cell is produced by serial arithmetic on
one neighbourhood, which makes the output independent of the worker count.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from . import spatial
from .cloud import PointCloud, filter_by_class, subsample_grid
from .dsl import (
    ATTRIBUTE_KINDS,
    GEOMETRIC_KINDS,
    KNN,
    DualOp,
    FeatureDescriptor,
    PipelineSpec,
    Stat,
    expand_scales,
    format_feature,
    parse_feature,
)
from .errors import ConfigurationError, SchemaError
from .spatial import Scale, SpatialIndex

logger = logging.getLogger(__name__)

N_SLOTS = 64
N_STATS = 6
STAT_ORDER = tuple(Stat)
MODE_BINS = 64
CHUNK_ROWS = 512

# geometric slots share their position with GEOMETRIC_KINDS
SLOT = {name: i for i, name in enumerate(GEOMETRIC_KINDS)}
(PCA1, PCA2, PCA3, SPHERICITY, LINEARITY, PLANARITY, VERTICALITY, ROUGHNESS,
 CURVATURE, NBPOINTS, ANISOTROPY, FOM, DIP, ZRANGE, ZMIN, ZMAX) = range(16)
STAT_BASE = 16

MIN_EIGEN = 3
MIN_CURVATURE = 6
MIN_STAT = {Stat.MEAN: 1, Stat.MODE: 1, Stat.MEDIAN: 1, Stat.RANGE: 1, Stat.STD: 2, Stat.SKEW: 3}


def stat_slot(attribute: str, stat: Stat) -> int:
    return STAT_BASE + ATTRIBUTE_KINDS.index(attribute) * N_STATS + STAT_ORDER.index(stat)


def descriptor_slot(d: FeatureDescriptor) -> int:
    if d.stat is None:
        return SLOT[d.kind]
    return stat_slot(d.kind, d.stat)


def attribute_table(cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    """``(8, n)`` attribute rows in ATTRIBUTE_KINDS order plus availability flags."""
    n = len(cloud)
    table = np.full((len(ATTRIBUTE_KINDS), n), np.nan)
    have = np.zeros(len(ATTRIBUTE_KINDS), dtype=np.bool_)
    cols = {
        "Z": cloud.xyz[:, 2],
        "INTENSITY": cloud.intensity,
        "RETURNNUMBER": cloud.return_number,
        "NUMBEROFRETURNS": cloud.number_of_returns,
        "ECHORATIO": cloud.echo_ratio,
    }
    rgb = cloud.rgb
    for i, ch in enumerate("RGB"):
        cols[ch] = None if rgb is None else rgb[:, i]
    for a, name in enumerate(ATTRIBUTE_KINDS):
        if cols[name] is not None:
            table[a] = cols[name]
            have[a] = True
    return table, have


# -- per-neighbourhood kernels ----------------------------------------------


@njit(nogil=True, cache=True)
def _mode(v, m):
    vmin = v[0]
    vmax = v[0]
    for i in range(1, m):
        if v[i] < vmin:
            vmin = v[i]
        if v[i] > vmax:
            vmax = v[i]
    w = (vmax - vmin) / 64.0
    if w == 0.0:
        return vmin
    counts = np.zeros(64, np.int64)
    for i in range(m):
        b = int((v[i] - vmin) / w)
        if b > 63:
            b = 63
        counts[b] += 1
    best = 0
    for b in range(1, 64):
        if counts[b] > counts[best]:
            best = b
    return vmin + (best + 0.5) * w


@njit(nogil=True, cache=True)
def _stats(v, m, want, base, out):
    """Six statistics of ``v[:m]`` into ``out[base:base+6]`` where requested."""
    if m < 1:
        return
    s = 0.0
    vmin = v[0]
    vmax = v[0]
    for i in range(m):
        s += v[i]
        if v[i] < vmin:
            vmin = v[i]
        if v[i] > vmax:
            vmax = v[i]
    mean = s / m
    if want[base]:
        out[base] = mean
    if want[base + 1]:
        out[base + 1] = _mode(v, m)
    if want[base + 2]:
        srt = np.sort(v[:m])
        h = m // 2
        if m % 2 == 1:
            out[base + 2] = srt[h]
        else:
            out[base + 2] = (srt[h - 1] + srt[h]) / 2.0
    if want[base + 4]:
        out[base + 4] = vmax - vmin
    if (want[base + 3] and m >= 2) or (want[base + 5] and m >= 3):
        m2 = 0.0
        m3 = 0.0
        for i in range(m):
            d = v[i] - mean
            m2 += d * d
            m3 += d * d * d
        m2 /= m
        m3 /= m
        if want[base + 3] and m >= 2:
            out[base + 3] = math.sqrt(m2)
        if want[base + 5] and m >= 3:
            out[base + 5] = 0.0 if m2 == 0.0 else m3 / m2 ** 1.5


@njit(nogil=True, cache=True)
def _quadric_mean_curvature(X, m, c, e1, e2, nrm, core, r):
    a = np.empty((m, 6))
    w = np.empty(m)
    for i in range(m):
        dx = X[i, 0] - c[0]
        dy = X[i, 1] - c[1]
        dz = X[i, 2] - c[2]
        u = (dx * e1[0] + dy * e1[1] + dz * e1[2]) / r
        v = (dx * e2[0] + dy * e2[1] + dz * e2[2]) / r
        a[i, 0] = u * u
        a[i, 1] = u * v
        a[i, 2] = v * v
        a[i, 3] = u
        a[i, 4] = v
        a[i, 5] = 1.0
        w[i] = (dx * nrm[0] + dy * nrm[1] + dz * nrm[2]) / r
    coef, _, rank, _ = np.linalg.lstsq(a, w, 1e-10)
    if rank < 6:
        return np.nan
    dx = core[0] - c[0]
    dy = core[1] - c[1]
    dz = core[2] - c[2]
    u0 = (dx * e1[0] + dy * e1[1] + dz * e1[2]) / r
    v0 = (dx * e2[0] + dy * e2[1] + dz * e2[2]) / r
    hu = 2.0 * coef[0] * u0 + coef[1] * v0 + coef[3]
    hv = coef[1] * u0 + 2.0 * coef[2] * v0 + coef[4]
    huu = 2.0 * coef[0]
    huv = coef[1]
    hvv = 2.0 * coef[2]
    g = 1.0 + hu * hu + hv * hv
    h = ((1.0 + hv * hv) * huu - 2.0 * hu * hv * huv + (1.0 + hu * hu) * hvv) / (2.0 * g ** 1.5)
    # the fit ran in coordinates divided by r
    return h / r


@njit(nogil=True, cache=True)
def neighbourhood_features(X, m, vals, core, r, want, out):
    """Fill the 64-slot block ``out`` for the points ``X[:m]``.

    Args:
        X: ``(>=m, 3)`` neighbour coordinates, in ascending point-index order.
        m: neighbourhood size.
        vals: ``(8, >=m)`` neighbour attribute values.
        core: core point coordinates.
        r: sphere radius.
        want: 64 flags; unrequested slots are left untouched.
        out: destination block, expected to be pre-filled with NaN.
    """
    if want[NBPOINTS]:
        out[NBPOINTS] = m
    if m >= 1:
        cx = 0.0
        cy = 0.0
        cz = 0.0
        zmin = X[0, 2]
        zmax = X[0, 2]
        for i in range(m):
            cx += X[i, 0]
            cy += X[i, 1]
            cz += X[i, 2]
            if X[i, 2] < zmin:
                zmin = X[i, 2]
            if X[i, 2] > zmax:
                zmax = X[i, 2]
        c = np.array([cx / m, cy / m, cz / m])
        if want[ZRANGE]:
            out[ZRANGE] = zmax - zmin
        if want[ZMIN]:
            out[ZMIN] = core[2] - zmin
        if want[ZMAX]:
            out[ZMAX] = zmax - core[2]
        if want[ANISOTROPY]:
            ax = c[0] - core[0]
            ay = c[1] - core[1]
            az = c[2] - core[2]
            out[ANISOTROPY] = math.sqrt(ax * ax + ay * ay + az * az) / r

        need_eigen = False
        for s in range(16):
            if want[s] and s != NBPOINTS and s != ANISOTROPY and s < ZRANGE:
                need_eigen = True
        if need_eigen and m >= 3:
            cov = np.zeros((3, 3))
            for i in range(m):
                d0 = X[i, 0] - c[0]
                d1 = X[i, 1] - c[1]
                d2 = X[i, 2] - c[2]
                cov[0, 0] += d0 * d0
                cov[0, 1] += d0 * d1
                cov[0, 2] += d0 * d2
                cov[1, 1] += d1 * d1
                cov[1, 2] += d1 * d2
                cov[2, 2] += d2 * d2
            cov[1, 0] = cov[0, 1]
            cov[2, 0] = cov[0, 2]
            cov[2, 1] = cov[1, 2]
            cov /= m
            lam, vec = np.linalg.eigh(cov)
            l1 = max(lam[2], 0.0)
            l2 = max(lam[1], 0.0)
            l3 = max(lam[0], 0.0)
            if l1 > 0.0:
                tot = l1 + l2 + l3
                ratios = (l1 / tot, l2 / tot, l3 / tot, l3 / l1, (l1 - l2) / l1, (l2 - l3) / l1)
                for s in range(6):
                    if want[s]:
                        out[s] = ratios[s]
                e1 = vec[:, 2].copy()
                e2 = vec[:, 1].copy()
                nrm = vec[:, 0].copy()
                flip = nrm[2] < 0.0 or (nrm[2] == 0.0 and (
                    nrm[1] < 0.0 or (nrm[1] == 0.0 and nrm[0] < 0.0)))
                if flip:
                    nrm = -nrm
                nz = min(abs(nrm[2]), 1.0)
                if want[VERTICALITY]:
                    out[VERTICALITY] = 1.0 - nz
                if want[DIP]:
                    out[DIP] = math.acos(nz) * 180.0 / math.pi
                if want[ROUGHNESS]:
                    dist = np.empty(m)
                    mu = 0.0
                    for i in range(m):
                        dist[i] = ((X[i, 0] - c[0]) * nrm[0] + (X[i, 1] - c[1]) * nrm[1]
                                   + (X[i, 2] - c[2]) * nrm[2])
                        mu += dist[i]
                    mu /= m
                    acc = 0.0
                    for i in range(m):
                        acc += (dist[i] - mu) * (dist[i] - mu)
                    out[ROUGHNESS] = math.sqrt(acc / m)
                if want[FOM]:
                    acc = 0.0
                    for i in range(m):
                        acc += ((X[i, 0] - core[0]) * e1[0] + (X[i, 1] - core[1]) * e1[1]
                                + (X[i, 2] - core[2]) * e1[2])
                    out[FOM] = abs(acc) / (m * r)
                if want[CURVATURE] and m >= 6:
                    out[CURVATURE] = _quadric_mean_curvature(X, m, c, e1, e2, nrm, core, r)

    for a in range(vals.shape[0]):
        base = 16 + a * 6
        anyw = False
        for s in range(6):
            if want[base + s]:
                anyw = True
        if anyw:
            _stats(vals[a], m, want, base, out)


@njit(nogil=True, cache=True)
def _sphere_chunk(pts, perm, start, end, left, right, lo, hi,
                  xyz, attrs, core, radii, want, out):
    """Blocks for every core row and every radius (ascending) of one cloud."""
    n = xyz.shape[0]
    n_attr = attrs.shape[0]
    idx = np.empty(n, np.int64)
    stack = np.empty(start.shape[0] + 1, np.int64)
    d2 = np.empty(n)
    X = np.empty((n, 3))
    vals = np.empty((n_attr, n))
    rmax = radii[radii.shape[0] - 1]
    for row in range(core.shape[0]):
        cx = core[row, 0]
        cy = core[row, 1]
        cz = core[row, 2]
        cnt = spatial.radius_search(pts, perm, start, end, left, right, lo, hi,
                                    cx, cy, cz, rmax * rmax, idx, stack)
        for j in range(cnt):
            p = idx[j]
            dx = xyz[p, 0] - cx
            dy = xyz[p, 1] - cy
            dz = xyz[p, 2] - cz
            d2[j] = dx * dx + dy * dy + dz * dz
        for s in range(radii.shape[0]):
            r = radii[s]
            r2 = r * r
            m = 0
            for j in range(cnt):
                if d2[j] <= r2:
                    p = idx[j]
                    X[m, 0] = xyz[p, 0]
                    X[m, 1] = xyz[p, 1]
                    X[m, 2] = xyz[p, 2]
                    for a in range(n_attr):
                        vals[a, m] = attrs[a, p]
                    m += 1
            neighbourhood_features(X, m, vals, core[row], r, want[s], out[row, s])


@njit(nogil=True, cache=True)
def _nearest_chunk(pts, perm, start, end, left, right, lo, hi, attrs, core, out):
    stack = np.empty(start.shape[0] + 1, np.int64)
    d2 = np.empty(1)
    bi = np.empty(1, np.int64)
    for row in range(core.shape[0]):
        cnt = spatial.knn_search(pts, perm, start, end, left, right, lo, hi,
                                 core[row, 0], core[row, 1], core[row, 2], 1, d2, bi, stack)
        if cnt == 1:
            for a in range(attrs.shape[0]):
                out[row, a] = attrs[a, bi[0]]


@njit(nogil=True, cache=True)
def _knn_chunk(pts, perm, start, end, left, right, lo, hi, xyz, core, ks, out_dz, out_dh):
    """Mean signed vertical and mean horizontal distance to the k nearest points."""
    kmax = ks[ks.shape[0] - 1]
    if kmax > xyz.shape[0]:
        kmax = xyz.shape[0]
    stack = np.empty(start.shape[0] + 1, np.int64)
    d2 = np.empty(kmax)
    bi = np.empty(kmax, np.int64)
    for row in range(core.shape[0]):
        cx = core[row, 0]
        cy = core[row, 1]
        cz = core[row, 2]
        cnt = spatial.knn_search(pts, perm, start, end, left, right, lo, hi,
                                 cx, cy, cz, kmax, d2, bi, stack)
        for t in range(ks.shape[0]):
            k = min(ks[t], cnt)
            if k == 0:
                continue
            sz = 0.0
            sh = 0.0
            for j in range(k):
                p = bi[j]
                sz += cz - xyz[p, 2]
                dx = xyz[p, 0] - cx
                dy = xyz[p, 1] - cy
                sh += math.sqrt(dx * dx + dy * dy)
            out_dz[row, t] = sz / k
            out_dh[row, t] = sh / k


# -- single-neighbourhood API -------------------------------------------------


def _block(neigh, core, r, want_slots, vals=None):
    X = np.ascontiguousarray(np.asarray(neigh, dtype=np.float64).reshape(-1, 3))
    m = len(X)
    if vals is None:
        vals = np.full((len(ATTRIBUTE_KINDS), m), np.nan)
        vals[0] = X[:, 2]
    want = np.zeros(N_SLOTS, dtype=np.bool_)
    want[list(want_slots)] = True
    out = np.full(N_SLOTS, np.nan)
    core = np.asarray(core, dtype=np.float64).reshape(3)
    neighbourhood_features(X, m, np.ascontiguousarray(vals), core, float(r), want, out)
    return out


def eigen_features(neigh) -> Tuple[float, ...]:
    """PCA1, PCA2, PCA3, sphericity, linearity, planarity (NaN when undefined)."""
    neigh = np.asarray(neigh, dtype=np.float64).reshape(-1, 3)
    core = neigh.mean(axis=0) if len(neigh) else np.zeros(3)
    out = _block(neigh, core, 1.0, range(6))
    return tuple(float(v) for v in out[:6])


def geometry_features(neigh, core, scale: Scale) -> Tuple[float, ...]:
    """Verticality, roughness, curvature, point count, anisotropy, first-order moment."""
    slots = (VERTICALITY, ROUGHNESS, CURVATURE, NBPOINTS, ANISOTROPY, FOM)
    out = _block(neigh, core, scale.radius, slots)
    return tuple(float(out[s]) for s in slots)


def dip_angle(neigh) -> float:
    """Angle in degrees between the fitted plane and the horizontal."""
    neigh = np.asarray(neigh, dtype=np.float64).reshape(-1, 3)
    return float(_block(neigh, np.zeros(3), 1.0, [DIP])[DIP])


def height_features(neigh_z, core_z: float) -> Tuple[float, float, float]:
    """(Zmax - Zmin, z - Zmin, Zmax - z) over the neighbourhood."""
    z = np.asarray(neigh_z, dtype=np.float64).reshape(-1)
    neigh = np.zeros((len(z), 3))
    neigh[:, 2] = z
    out = _block(neigh, (0.0, 0.0, core_z), 1.0, (ZRANGE, ZMIN, ZMAX))
    return float(out[ZRANGE]), float(out[ZMIN]), float(out[ZMAX])


def stat_operator(values, stat: Stat) -> float:
    v = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(-1))
    want = np.zeros(N_SLOTS, dtype=np.bool_)
    want[STAT_BASE + STAT_ORDER.index(Stat(stat))] = True
    out = np.full(N_SLOTS, np.nan)
    _stats(v, len(v), want, STAT_BASE, out)
    return float(out[STAT_BASE + STAT_ORDER.index(Stat(stat))])


def dual_combine(a, b, op: DualOp):
    """Elementwise ``a op b``; NaN propagates and non-finite results become NaN."""
    op = DualOp(op)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(all="ignore"):
        if op is DualOp.MINUS:
            res = a - b
        elif op is DualOp.PLUS:
            res = a + b
        elif op is DualOp.MULTIPLY:
            res = a * b
        else:
            res = np.where(b == 0.0, np.nan, a / np.where(b == 0.0, 1.0, b))
    res = np.where(np.isfinite(res), res, np.nan)
    return float(res) if res.ndim == 0 else res


def context_distance(core, target: PointCloud, ctx_class: Optional[int], k: int,
                     axis: str = "VERTICAL") -> float:
    """Mean vertical (signed, core minus neighbour) or horizontal kNN distance."""
    if ctx_class is not None:
        target = filter_by_class(target, ctx_class)
    if len(target) == 0:
        return float("nan")
    idx = SpatialIndex(target.xyz)
    core = np.asarray(core, dtype=np.float64).reshape(1, 3)
    dz = np.full((1, 1), np.nan)
    dh = np.full((1, 1), np.nan)
    _knn_chunk(*idx.arrays, target.xyz, core, np.array([int(k)]), dz, dh)
    return float(dz[0, 0] if axis.upper().startswith("V") else dh[0, 0])


# -- whole matrix ---------------------------------------------------------------


@dataclass
class FeatureMatrix:
    """Core points x predictors; missing cells are NaN."""

    columns: List[FeatureDescriptor]
    values: np.ndarray
    core_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise SchemaError("value array does not match the column list")
        self.core_ids = np.asarray(self.core_ids, dtype=np.int64).reshape(-1)
        if len(self.core_ids) != self.values.shape[0]:
            raise SchemaError("one core id per row is required")

    @property
    def tokens(self) -> List[str]:
        return [format_feature(d) for d in self.columns]

    @property
    def n_core(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def column(self, token: str) -> np.ndarray:
        return self.values[:, self.tokens.index(token)]

    def select(self, tokens: Sequence[str]) -> "FeatureMatrix":
        pos = {t: i for i, t in enumerate(self.tokens)}
        missing = [t for t in tokens if t not in pos]
        if missing:
            raise SchemaError(f"matrix lacks columns: {', '.join(missing)}")
        ix = [pos[t] for t in tokens]
        return FeatureMatrix([self.columns[i] for i in ix], self.values[:, ix], self.core_ids)

    def rows(self, index) -> "FeatureMatrix":
        return FeatureMatrix(self.columns, self.values[index], self.core_ids[index])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["core_id"] + self.tokens) + "\n")
            for cid, row in zip(self.core_ids, self.values):
                cells = ["NaN" if v != v else repr(float(v)) for v in row]
                fh.write(str(int(cid)) + "," + ",".join(cells) + "\n")

    @classmethod
    def from_csv(cls, path) -> "FeatureMatrix":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if not header or header[0] != "core_id":
                raise SchemaError(f"{path}: first column must be core_id")
            cols = [parse_feature(t) for t in header[1:]]
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if any(len(r) != len(header) for r in rows):
            raise SchemaError(f"{path}: ragged feature table")
        arr = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        return cls(cols, arr.reshape(len(rows), len(cols)), ids)


def resolve_core(spec: PipelineSpec, pc1: PointCloud, pc2: Optional[PointCloud] = None,
                 core: Optional[PointCloud] = None) -> PointCloud:
    """The explicit core cloud, or the grid subsample named by ``CORE = PC#@spacing``."""
    if core is not None:
        return core
    src, spacing = spec.core_source()
    if spacing is None:
        raise ConfigurationError(f"core cloud {src!r} must be loaded and passed explicitly")
    base = pc1 if src == "PC1" else pc2
    if base is None:
        raise ConfigurationError(f"CORE refers to {src}, which is not available")
    return base.subset(subsample_grid(base, spacing), role="CORE")


class _Plan:
    """Which blocks, nearest-point lookups and kNN searches the columns need."""

    def __init__(self, columns, clouds, have):
        self.columns = columns
        self.sphere: Dict[str, List[float]] = {}
        want: Dict[Tuple[str, float], np.ndarray] = {}
        self.nearest = set()
        self.knn: Dict[Tuple[str, Optional[int]], List[int]] = {}
        self.dead = np.zeros(len(columns), dtype=bool)
        for j, d in enumerate(columns):
            for role in d.roles:
                if clouds.get(role) is None:
                    raise ConfigurationError(f"{format_feature(d)} needs cloud {role}, which is not bound")
            if d.is_context:
                self.knn.setdefault((d.cloud_a, d.ctx_class), []).append(d.scale.k)
                continue
            if d.kind in ATTRIBUTE_KINDS:
                a = ATTRIBUTE_KINDS.index(d.kind)
                if not all(have[r][a] for r in d.roles):
                    self.dead[j] = True
                    continue
            if d.is_pointwise:
                self.nearest.add(d.cloud_a)
                continue
            slot = descriptor_slot(d)
            for role in d.roles:
                w = want.setdefault((role, d.diameter), np.zeros(N_SLOTS, dtype=np.bool_))
                w[slot] = True
        for (role, diam) in want:
            self.sphere.setdefault(role, []).append(diam)
        self.want = {}
        for role, diams in self.sphere.items():
            diams.sort()
            self.want[role] = np.stack([want[(role, d)] for d in diams])
        for key in self.knn:
            self.knn[key] = sorted(set(self.knn[key]))


def _chunk_bounds(n, size):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def compute_matrix(spec: PipelineSpec, pc1: PointCloud, pc2: Optional[PointCloud] = None,
                   ctx: Optional[PointCloud] = None, core: Optional[PointCloud] = None,
                   threads: Optional[int] = None, columns=None) -> FeatureMatrix:
    """Evaluate every expanded descriptor of ``spec`` at every core point.

    Args:
        spec: parsed parameter file.
        pc1, pc2, ctx: the bound clouds (``pc2``/``ctx`` optional).
        core: core points; defaults to the subsample requested by ``spec``.
        threads: worker threads (default: all CPUs). Output does not depend on it.
        columns: explicit descriptor list overriding the expansion of ``spec``.

    Returns:
        FeatureMatrix with one row per core point.
    """
    if pc1 is None or len(pc1) == 0:
        raise ConfigurationError("PC1 is required and must be non-empty")
    columns = list(expand_scales(spec) if columns is None else columns)
    clouds = {"PC1": pc1, "PC2": pc2, "CTX": ctx}
    have = {r: attribute_table(c) if c is not None else None for r, c in clouds.items()}
    plan = _Plan(columns, clouds, {r: h[1] for r, h in have.items() if h is not None})
    core = resolve_core(spec, pc1, pc2, core)
    core_xyz = np.ascontiguousarray(core.xyz)
    n = len(core_xyz)
    values = np.full((n, len(columns)), np.nan)

    workers = threads or os.cpu_count() or 1
    builds = {role: clouds[role].xyz for role in sorted(set(plan.sphere) | plan.nearest)}
    for role, cls in plan.knn:
        target = clouds[role] if cls is None else filter_by_class(clouds[role], cls)
        builds[(role, cls)] = target.xyz
    nonempty = [k for k, xyz in builds.items() if len(xyz)]
    # the index builds release the GIL, so they overlap like the chunk work
    if workers > 1 and len(nonempty) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = dict(zip(nonempty, pool.map(lambda k: SpatialIndex(builds[k]), nonempty)))
    else:
        built = {k: SpatialIndex(builds[k]) for k in nonempty}
    indices: Dict[str, SpatialIndex] = {k: v for k, v in built.items() if isinstance(k, str)}
    targets = {key: (built[key], builds[key]) if key in built else None for key in plan.knn}
    radii = {role: np.array([d / 2.0 for d in diams]) for role, diams in plan.sphere.items()}

    def work(bounds):
        lo, hi = bounds
        c = core_xyz[lo:hi]
        m = hi - lo
        blocks = {}
        for role in plan.sphere:
            out = np.full((m, len(radii[role]), N_SLOTS), np.nan)
            _sphere_chunk(*indices[role].arrays, clouds[role].xyz, have[role][0], c,
                          radii[role], plan.want[role], out)
            blocks[role] = out
        nearest = {}
        for role in plan.nearest:
            out = np.full((m, len(ATTRIBUTE_KINDS)), np.nan)
            _nearest_chunk(*indices[role].arrays, have[role][0], c, out)
            nearest[role] = out
        knn = {}
        for key, ks in plan.knn.items():
            dz = np.full((m, len(ks)), np.nan)
            dh = np.full((m, len(ks)), np.nan)
            if targets[key] is not None:
                idx, txyz = targets[key]
                _knn_chunk(*idx.arrays, txyz, c, np.array(ks, dtype=np.int64), dz, dh)
            knn[key] = (dz, dh)
        dest = values[lo:hi]
        for j, d in enumerate(columns):
            if plan.dead[j]:
                continue
            if d.is_context:
                dz, dh = knn[(d.cloud_a, d.ctx_class)]
                t = plan.knn[(d.cloud_a, d.ctx_class)].index(d.scale.k)
                dest[:, j] = (dz if d.kind == "DZ" else dh)[:, t]
            elif d.is_pointwise:
                dest[:, j] = nearest[d.cloud_a][:, ATTRIBUTE_KINDS.index(d.kind)]
            else:
                slot = descriptor_slot(d)
                a = blocks[d.cloud_a][:, plan.sphere[d.cloud_a].index(d.diameter), slot]
                if d.is_dual:
                    b = blocks[d.cloud_b][:, plan.sphere[d.cloud_b].index(d.diameter), slot]
                    a = dual_combine(a, b, d.dual_op)
                dest[:, j] = a

    bounds = _chunk_bounds(n, CHUNK_ROWS)
    if workers == 1 or len(bounds) <= 1:
        for b in bounds:
            work(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, bounds))
    ids = core.extra.get("core_id")
    ids = np.arange(n) if ids is None else ids.astype(np.int64)
    logger.info("computed %d x %d feature matrix", n, len(columns))
    return FeatureMatrix(columns, values, ids)
