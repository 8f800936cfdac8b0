"""Synthetic paired green / NIR lidar scenes on a mosaic of class tiles.

The scene is a grid of square tiles, each holding one land-cover type:

* ground: a flat surface sampled identically (up to noise) by both channels;
* vegetation: ground plus tree crowns hit by pulses with up to three returns;
* building: a flat roof with vertical walls, surrounded by a ground margin;
* water: the green channel sees a thin volume layer under the surface and the
  bottom at ``-water_depth``; the NIR channel only returns sparse surface echoes.

Each (class, channel) pair draws intensities from its own normal profile.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .cloud import PointCloud, subsample_grid

logger = logging.getLogger(__name__)

GROUND, VEGETATION, BUILDING, WATER = 2, 5, 6, 9
CLASS_NAMES = {GROUND: "ground", VEGETATION: "vegetation", BUILDING: "building", WATER: "water"}
TILE_CLASSES = (GROUND, VEGETATION, BUILDING, WATER)

# (mean, spread) of the intensity per (class, channel); "bottom" is the water bed.
DEFAULT_INTENSITY = {
    ("ground", "green"): (40.0, 8.0), ("ground", "nir"): (50.0, 10.0),
    ("vegetation", "green"): (25.0, 8.0), ("vegetation", "nir"): (80.0, 15.0),
    ("building", "green"): (60.0, 10.0), ("building", "nir"): (55.0, 10.0),
    ("water", "green"): (12.0, 4.0), ("water", "nir"): (6.0, 2.0),
    ("bottom", "green"): (18.0, 5.0),
}


@dataclass(frozen=True)
class SceneParams:
    extent: Tuple[float, float] = (60.0, 60.0)
    tile: float = 15.0
    densities: Dict[int, float] = field(default_factory=lambda: {
        GROUND: 8.0, VEGETATION: 8.0, BUILDING: 8.0, WATER: 8.0})
    nir_water_factor: float = 0.05
    water_depth: float = 2.0
    volume_fraction: float = 0.35
    volume_thickness: float = 0.6
    canopy_height: float = 8.0
    building_height: Tuple[float, float] = (4.0, 10.0)
    building_margin: float = 2.0
    wall_density: float = 6.0
    noise_sigma: float = 0.03
    intensity: Dict[Tuple[str, str], Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_INTENSITY))
    core_spacing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if any(d < 0 for d in self.densities.values()):
            raise ValueError("densities must be >= 0")
        if not any(self.densities.get(c, 0.0) > 0 for c in TILE_CLASSES):
            raise ValueError("at least one class needs a positive density")
        if self.tile <= 0 or min(self.extent) < self.tile:
            raise ValueError("extent must hold at least one tile")


@dataclass
class Scene:
    pc1: PointCloud  # green
    pc2: PointCloud  # NIR
    core: PointCloud
    tile_class: np.ndarray  # (ny, nx) class of each tile
    params: SceneParams

    def tile_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        ix = np.clip((xy[:, 0] // self.params.tile).astype(int), 0, self.tile_class.shape[1] - 1)
        iy = np.clip((xy[:, 1] // self.params.tile).astype(int), 0, self.tile_class.shape[0] - 1)
        return self.tile_class[iy, ix]

    def border_distance(self, xy) -> np.ndarray:
        """Horizontal distance to the nearest tile edge."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        t = self.params.tile
        fx = np.mod(xy[:, 0], t)
        fy = np.mod(xy[:, 1], t)
        return np.minimum(np.minimum(fx, t - fx), np.minimum(fy, t - fy))


class _Buffer:
    def __init__(self):
        self.parts = []

    def add(self, xyz, rn, nr, cls, intensity):
        n = len(xyz)
        if n == 0:
            return
        self.parts.append((np.asarray(xyz, float).reshape(n, 3), np.broadcast_to(rn, n).astype(np.int64),
                           np.broadcast_to(nr, n).astype(np.int64), np.full(n, cls, np.int64),
                           np.asarray(intensity, float)))

    def cloud(self, role):
        if not self.parts:
            return PointCloud(np.zeros((0, 3)), intensity=np.zeros(0), return_number=np.zeros(0),
                              number_of_returns=np.zeros(0), classification=np.zeros(0), role=role)
        xyz, rn, nr, cls, inten = (np.concatenate(c) for c in zip(*self.parts))
        return PointCloud(xyz, intensity=inten, return_number=rn, number_of_returns=nr,
                          classification=cls, role=role)


def _intensity(rng, params, kind, channel, n):
    mu, sd = params.intensity[(kind, channel)]
    return np.maximum(rng.normal(mu, sd, n), 0.0)


def _uniform_xy(rng, x0, y0, w, h, density):
    n = rng.poisson(density * w * h)
    return np.column_stack([x0 + rng.random(n) * w, y0 + rng.random(n) * h])


def _ground(buf, rng, params, channel, x0, y0, w, h, density):
    xy = _uniform_xy(rng, x0, y0, w, h, density)
    z = rng.normal(0.0, params.noise_sigma, len(xy))
    buf.add(np.column_stack([xy, z]), 1, 1, GROUND, _intensity(rng, params, "ground", channel, len(xy)))


def _vegetation_tile(buf, rng, params, channel, x0, y0, crowns, density):
    t = params.tile
    xy = _uniform_xy(rng, x0, y0, t, t, density)
    sig = params.noise_sigma
    # height of the crown surface above each pulse (0 when no crown)
    top = np.zeros(len(xy))
    base = np.zeros(len(xy))
    for cx, cy, rad, h in crowns:
        d2 = (xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2
        inside = d2 < rad * rad
        cap = h + np.sqrt(np.maximum(rad * rad - d2, 0.0)) * 0.6
        lower = h - np.sqrt(np.maximum(rad * rad - d2, 0.0)) * 0.6
        better = inside & (cap > top)
        top[better] = cap[better]
        base[better] = lower[better]
    veg = top > 0
    gx = xy[~veg]
    buf.add(np.column_stack([gx, rng.normal(0.0, sig, len(gx))]), 1, 1, GROUND,
            _intensity(rng, params, "ground", channel, len(gx)))
    vx = xy[veg]
    vt = top[veg]
    vb = base[veg]
    n = len(vx)
    nr = rng.choice([1, 2, 3], size=n, p=[0.2, 0.35, 0.45])
    # first return: near the crown surface
    z1 = vt - rng.random(n) * 0.5
    buf.add(np.column_stack([vx, z1]), 1, nr, VEGETATION, _intensity(rng, params, "vegetation", channel, n))
    two = nr >= 2
    z2 = vb[two] + rng.random(two.sum()) * (vt[two] - vb[two])
    buf.add(np.column_stack([vx[two], z2]), 2, nr[two], VEGETATION,
            _intensity(rng, params, "vegetation", channel, two.sum()))
    three = nr == 3
    # third return reaches the ground
    z3 = rng.normal(0.0, sig, three.sum())
    buf.add(np.column_stack([vx[three], z3]), 3, 3, GROUND,
            _intensity(rng, params, "ground", channel, three.sum()))


def _building_tile(buf, rng, params, channel, x0, y0, height, density):
    t = params.tile
    m = params.building_margin
    sig = params.noise_sigma
    xy = _uniform_xy(rng, x0, y0, t, t, density)
    fx = xy[:, 0] - x0
    fy = xy[:, 1] - y0
    roof = (fx > m) & (fx < t - m) & (fy > m) & (fy < t - m)
    gx = xy[~roof]
    buf.add(np.column_stack([gx, rng.normal(0.0, sig, len(gx))]), 1, 1, GROUND,
            _intensity(rng, params, "ground", channel, len(gx)))
    rx = xy[roof]
    buf.add(np.column_stack([rx, height + rng.normal(0.0, sig, len(rx))]), 1, 1, BUILDING,
            _intensity(rng, params, "building", channel, len(rx)))
    # four walls, sampled per square meter of facade
    side = t - 2 * m
    for k in range(4):
        nw = rng.poisson(params.wall_density * side * height)
        s = rng.random(nw) * side
        z = rng.random(nw) * height
        off = rng.normal(0.0, sig, nw)
        if k == 0:
            px, py = x0 + m + s, y0 + m + off
        elif k == 1:
            px, py = x0 + m + s, y0 + t - m + off
        elif k == 2:
            px, py = x0 + m + off, y0 + m + s
        else:
            px, py = x0 + t - m + off, y0 + m + s
        buf.add(np.column_stack([px, py, z]), 1, 1, BUILDING,
                _intensity(rng, params, "building", channel, nw))


def _water_tile(buf, rng, params, channel, x0, y0, density):
    t = params.tile
    sig = params.noise_sigma
    if channel == "nir":
        xy = _uniform_xy(rng, x0, y0, t, t, density * params.nir_water_factor)
        buf.add(np.column_stack([xy, rng.normal(0.0, sig, len(xy))]), 1, 1, WATER,
                _intensity(rng, params, "water", channel, len(xy)))
        return
    xy = _uniform_xy(rng, x0, y0, t, t, density)
    n = len(xy)
    vol = rng.random(n) < params.volume_fraction
    zv = -rng.random(vol.sum()) * params.volume_thickness
    buf.add(np.column_stack([xy[vol], zv]), 1, 2, WATER, _intensity(rng, params, "water", channel, vol.sum()))
    bx = xy[~vol]
    zb = -params.water_depth + rng.normal(0.0, sig, len(bx))
    buf.add(np.column_stack([bx, zb]), 1, 1, WATER, _intensity(rng, params, "bottom", channel, len(bx)))


def tile_layout(params: SceneParams, rng) -> np.ndarray:
    """Balanced, shuffled class assignment over the tile grid."""
    nx = int(params.extent[0] // params.tile)
    ny = int(params.extent[1] // params.tile)
    classes = [c for c in TILE_CLASSES if params.densities.get(c, 0.0) > 0]
    layout = np.array([classes[i % len(classes)] for i in range(nx * ny)])
    rng.shuffle(layout)
    return layout.reshape(ny, nx)


def generate_scene(params: SceneParams = SceneParams()) -> Scene:
    """Build the green cloud (PC1), NIR cloud (PC2) and labelled core points."""
    rng = np.random.default_rng(params.seed)
    layout = tile_layout(params, rng)
    ny, nx = layout.shape
    tile_seeds = rng.integers(0, 2**63 - 1, size=(ny, nx, 2))
    clouds = {"green": _Buffer(), "nir": _Buffer()}
    for iy in range(ny):
        for ix in range(nx):
            cls = int(layout[iy, ix])
            x0, y0 = ix * params.tile, iy * params.tile
            dens = params.densities[cls]
            # scene geometry is shared by both channels; sampling is not
            geo = np.random.default_rng(tile_seeds[iy, ix, 0])
            crowns = []
            if cls == VEGETATION:
                for _ in range(geo.integers(4, 8)):
                    rad = geo.uniform(2.0, 3.5)
                    crowns.append((x0 + geo.uniform(0, params.tile), y0 + geo.uniform(0, params.tile),
                                   rad, params.canopy_height * geo.uniform(0.7, 1.2)))
            height = geo.uniform(*params.building_height)
            for ci, channel in enumerate(("green", "nir")):
                trng = np.random.default_rng([int(tile_seeds[iy, ix, 1]), ci])
                buf = clouds[channel]
                if cls == GROUND:
                    _ground(buf, trng, params, channel, x0, y0, params.tile, params.tile, dens)
                elif cls == VEGETATION:
                    _vegetation_tile(buf, trng, params, channel, x0, y0, crowns, dens)
                elif cls == BUILDING:
                    _building_tile(buf, trng, params, channel, x0, y0, height, dens)
                else:
                    _water_tile(buf, trng, params, channel, x0, y0, dens)
    pc1 = clouds["green"].cloud("PC1")
    pc2 = clouds["nir"].cloud("PC2")
    core = pc1.subset(subsample_grid(pc1, params.core_spacing), role="CORE")
    logger.info("scene seed %d: %d green, %d NIR, %d core points",
                params.seed, len(pc1), len(pc2), len(core))
    return Scene(pc1, pc2, core, layout, params)


def sample_balanced(labels, n_per_class: int, seed: int, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Up to ``n_per_class`` random indices per labelled class (ascending order)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    ok = labels != 0 if mask is None else (labels != 0) & mask
    out = []
    for c in np.unique(labels[ok]):
        idx = np.flatnonzero(ok & (labels == c))
        take = min(n_per_class, len(idx))
        out.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(out)) if out else np.zeros(0, np.int64)
