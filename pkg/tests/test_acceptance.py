"""Acceptance suite: one test per numbered criterion.

Each test records a one-line detail; ``conftest.py`` prints a PASS/FAIL line
per criterion in the terminal summary.
"""

from __future__ import annotations

import filecmp
import os
import time

import numpy as np
import pytest

from cloudclass.cli import run
from cloudclass.cloud import load_cloud, save_cloud
from cloudclass.dsl import (ATTRIBUTE_KINDS, GEOMETRIC_KINDS, PipelineSpec, Stat, default_parameter_text,
                            default_spec, expand_scales, parse_parameter_file)
from cloudclass.explain import Explainer
from cloudclass.features import (N_SLOTS, compute_matrix, dip_angle, eigen_features,
                                 geometry_features, neighbourhood_features, stat_operator, stat_slot)
from cloudclass.forest import ForestParams, train
from cloudclass.metrics import confidence_filter_table
from cloudclass.selection import SelectionConfig, backward_eliminate, prune_columns, select_predictors
from cloudclass.spatial import Scale, SpatialIndex
from cloudclass.synth import GROUND, WATER, SceneParams, generate_scene, sample_balanced

import oracles

# Desk-scale universe for the end-to-end criteria: every default feature,
# scales 1..7 m instead of 1..15 m in 0.5 m steps.
DESK_PARAMS = default_parameter_text().replace("range = 1.0:15.0:0.5", "range = 1.0:7.0:1.0")
SELECTION_TREES = 50
TRAIN_SEED_SCENE, TEST_SEED_SCENE = 1, 2
PURE_TRAIN_DISTANCE = 3.5  # half the largest desk scale: training spheres stay inside one tile


def report(record_property, n, ok, detail):
    record_property("detail", detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- 1 ----------------------------------------------------------------------------


def test_criterion_01_universe_count(record_property):
    t0 = time.perf_counter()
    n = len(expand_scales(default_spec()))
    dt = time.perf_counter() - t0
    ok = n == 2011 and dt < 1.0
    report(record_property, 1, ok, f"{n} predictors in {dt:.3f} s")
    assert n == 2011
    assert dt < 1.0


# -- 2 ----------------------------------------------------------------------------


def _close(got, want):
    if np.isnan(want):
        return bool(np.isnan(got))
    return abs(got - want) <= 1e-9 * max(abs(want), 1e-3)


def test_criterion_02_feature_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    checked = mismatches = 0
    for _ in range(50):
        m = int(rng.integers(6, 150))
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        pts = (rng.normal(size=(m, 3)) * rng.uniform(0.05, 1.0, 3)) @ rot.T + rng.uniform(-50, 50, 3)
        core = pts[rng.integers(m)]
        r = float(np.linalg.norm(pts - core, axis=1).max())
        vals = rng.normal(size=(len(ATTRIBUTE_KINDS), m)) * 20
        vals[0] = pts[:, 2]
        out = np.full(N_SLOTS, np.nan)
        neighbourhood_features(pts, m, vals, core, r, np.ones(N_SLOTS, np.bool_), out)
        ref = oracles.geometric(pts, core, r)
        for slot, kind in enumerate(GEOMETRIC_KINDS):
            checked += 1
            mismatches += not _close(out[slot], ref[kind])
        for a, attr in enumerate(ATTRIBUTE_KINDS):
            st = oracles.statistics(vals[a])
            for s in Stat:
                checked += 1
                mismatches += not _close(out[stat_slot(attr, s)], st[s.value])
    t = np.linspace(-2, 2, 31)
    line = np.column_stack([t, t, t]) * [1.0, 0.0, 0.0]
    g = np.stack(np.meshgrid(np.arange(6.0), np.arange(6.0)), -1).reshape(-1, 2)
    plane = np.column_stack([g, np.full(len(g), 2.0)])
    analytic = {
        "line linearity": eigen_features(line)[4] == 1.0,
        "plane planarity": eigen_features(plane)[5] == 1.0,
        "symmetric skew": stat_operator([-2.0, -1.0, 0.0, 1.0, 2.0], Stat.SKEW) == 0.0,
        "horizontal verticality": geometry_features(plane, plane.mean(0), Scale(20.0))[0] == 0.0,
        "horizontal dip": dip_angle(plane) == 0.0,
    }
    dt = time.perf_counter() - t0
    bad = [k for k, v in analytic.items() if not v]
    ok = mismatches == 0 and not bad and dt < 10
    report(record_property, 2, ok,
           f"{checked - mismatches}/{checked} oracle values within 1e-9 rel; analytic failures {bad}; {dt:.1f} s")
    assert mismatches == 0
    assert not bad
    assert dt < 10


# -- 3 ----------------------------------------------------------------------------


def test_criterion_03_spatial_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    xyz = rng.uniform(0, 100, (100_000, 3))
    xyz[:1000] = np.round(xyz[:1000])  # lattice points create exact distance ties
    index = SpatialIndex(xyz)
    bad_r = bad_k = 0
    for i in range(1000):
        c = np.round(rng.uniform(0, 100, 3)) if i % 4 == 0 else rng.uniform(-5, 105, 3)
        d = float(rng.choice([1.0, 2.0, 4.0, rng.uniform(0.5, 10)]))
        bad_r += not np.array_equal(index.radius_query(c, Scale(d)), oracles.radius_scan(xyz, c, d / 2))
        k = int(rng.integers(1, 60))
        idx, dist = index.knn_query(c, k)
        ref_idx, ref_dist = oracles.knn_scan(xyz, c, k)
        bad_k += not (np.array_equal(idx, ref_idx) and np.array_equal(dist, ref_dist))
    dt = time.perf_counter() - t0
    ok = bad_r == 0 and bad_k == 0 and dt < 30
    report(record_property, 3, ok, f"radius mismatches {bad_r}/1000, kNN mismatches {bad_k}/1000, {dt:.1f} s")
    assert bad_r == 0 and bad_k == 0
    assert dt < 30


# -- 4, 5, 9 ------------------------------------------------------------------------


def _end_to_end(n_per_class):
    """Select on seed A, retrain on the chosen predictors, score on seed B."""
    t0 = time.perf_counter()
    spec = parse_parameter_file(DESK_PARAMS)
    a = generate_scene(SceneParams(seed=TRAIN_SEED_SCENE, core_spacing=0.5))
    b = generate_scene(SceneParams(seed=TEST_SEED_SCENE))
    interior = a.border_distance(a.core.xyz[:, :2]) >= PURE_TRAIN_DISTANCE
    ia = sample_balanced(a.core.classification, n_per_class, 0, interior)
    ib = sample_balanced(b.core.classification, 500, 1)
    fa = compute_matrix(spec, a.pc1, a.pc2, core=a.core.subset(ia, role="CORE"))
    ya = a.core.classification[ia]
    yb = b.core.classification[ib]
    rep = select_predictors(fa, ya, SelectionConfig(), ForestParams(n_trees=SELECTION_TREES), seed=42)
    chosen = rep.chosen_predictors
    model = train(fa.select(chosen).values, ya, ForestParams(), seed=42, columns=chosen)
    fb = compute_matrix(spec, b.pc1, b.pc2, core=b.core.subset(ib, role="CORE"),
                        columns=[fa.columns[fa.tokens.index(t)] for t in chosen])
    pred, conf = model.predict(fb.values)
    oa = float(np.mean(pred == yb))
    return dict(oa=oa, chosen=chosen, seconds=time.perf_counter() - t0, yb=yb, pred=pred,
                conf=conf, oob=model.oob_score, n_train=len(ya), n_candidates=len(rep.candidates))


@pytest.fixture(scope="module")
def run500():
    return _end_to_end(500)


def test_criterion_04_end_to_end(record_property, run500):
    r = run500
    ok = r["oa"] >= 0.95 and len(r["chosen"]) <= 20 and r["seconds"] < 120
    report(record_property, 4, ok,
           f"OA {r['oa']:.4f} with {len(r['chosen'])} predictors {r['chosen']} "
           f"(from {r['n_candidates']} candidates), {r['seconds']:.0f} s")
    assert r["oa"] >= 0.95
    assert len(r["chosen"]) <= 20
    assert r["seconds"] < 120


def test_criterion_05_small_training(record_property, run500):
    r = _end_to_end(100)
    drop = run500["oa"] - r["oa"]
    ok = drop <= 0.05 and r["seconds"] < 120
    report(record_property, 5, ok,
           f"OA {r['oa']:.4f} at 100/class vs {run500['oa']:.4f} at 500/class (drop {drop:.4f}), "
           f"{len(r['chosen'])} predictors, {r['seconds']:.0f} s")
    assert drop <= 0.05
    assert r["seconds"] < 120


# -- 6 ----------------------------------------------------------------------------

WEAK_PARAMS = """[clouds]
PC1 = pc1.csv
[scales]
values = 1
[features]
PCA1_SC1_PC1
SPHERICITY_SC1_PC1
INTENSITY_SC1_STD_PC1
"""


def test_criterion_06_oob_vs_test(record_property):
    arms = {"desk universe": parse_parameter_file(DESK_PARAMS),
            "weak 3-predictor set": parse_parameter_file(WEAK_PARAMS)}
    worst = {}
    lines = []
    for name, spec in arms.items():
        gaps = []
        for s in range(10):
            a = generate_scene(SceneParams(seed=100 + s))
            b = generate_scene(SceneParams(seed=200 + s))
            ia = sample_balanced(a.core.classification, 500, s)
            ib = sample_balanced(b.core.classification, 500, s + 50)
            fa = compute_matrix(spec, a.pc1, a.pc2, core=a.core.subset(ia, role="CORE"))
            fb = compute_matrix(spec, b.pc1, b.pc2, core=b.core.subset(ib, role="CORE"))
            model = train(fa.values, a.core.classification[ia], ForestParams(), seed=s)
            oa = float(np.mean(model.predict(fb.values)[0] == b.core.classification[ib]))
            gaps.append(model.oob_score - oa)
        worst[name] = float(np.max(np.abs(gaps)))
        lines.append(f"{name}: max |OOB-OA| {worst[name]:.4f} (mean gap {np.mean(gaps):+.4f})")
    ok = all(v <= 0.05 for v in worst.values())
    report(record_property, 6, ok, "; ".join(lines) + " over 10 seeds")
    assert ok


# -- 7 ----------------------------------------------------------------------------


def test_criterion_07_selection(record_property):
    hits = 0
    single_copy = 0
    for s in range(10):
        rng = np.random.default_rng(s)
        X = rng.normal(size=(1000, 10))
        y = (X[:, :5].sum(axis=1) > 0).astype(int)  # columns 0-4 informative, 5-9 noise
        dup = int(rng.integers(0, 10))
        X = np.column_stack([X, X[:, dup]])
        kept = sorted(prune_columns(X, y, 0.85, 32).kept)
        single_copy += sum(k in (dup, 10) for k in kept) == 1
        rep = backward_eliminate(X[:, kept], y, SelectionConfig(), ForestParams(n_trees=100), seed=s,
                                 columns=[str(k) for k in kept])
        chosen = [int(c) for c in rep.chosen_predictors]
        informative = sum(1 for c in chosen if c < 5 or (c == 10 and dup < 5))
        hits += informative >= 4
    ok = hits >= 9 and single_copy == 10
    report(record_property, 7, ok,
           f">=4 informative chosen in {hits}/10 seeds; exactly one duplicate copy kept in {single_copy}/10")
    assert hits >= 9
    assert single_copy == 10


# -- 8 ----------------------------------------------------------------------------


def test_criterion_08_shapley_exact(record_property):
    worst_oracle = worst_local = 0.0
    rows = 0
    for f in range(2, 9):
        rng = np.random.default_rng(f)
        X = rng.normal(size=(300, f))
        score = X[:, 0] + X[:, 1 % f] * X[:, (f - 1)] + 0.5 * np.sin(3 * X[:, f // 2])
        y = np.digitize(score, np.quantile(score, [0.33, 0.66]))
        X[rng.random(X.shape) < 0.1] = np.nan
        model = train(X, y, ForestParams(n_trees=20), seed=f)
        Z = X[:16]
        phi, base, pred, codes = Explainer(model, Z).shap_values(X[200:300])
        for i in range(0, 100, 10):
            x = X[200 + i]
            ref, v0, v1 = oracles.subset_shapley(oracles.interventional_value(model, x, Z, codes[i]), f)
            worst_oracle = max(worst_oracle, float(np.abs(phi[i] - ref).max()),
                               abs(base[i] - v0), abs(pred[i] - v1))
        # local accuracy on every row: base + sum(phi) equals the explained output
        for i, x in enumerate(X[200:300]):
            out = oracles.interventional_value(model, x, Z, codes[i])(frozenset(range(f)))
            worst_local = max(worst_local, abs(base[i] + phi[i].sum() - out))
            rows += 1
    ok = worst_oracle <= 1e-6 and worst_local <= 1e-6
    report(record_property, 8, ok,
           f"max |phi - 2^f oracle| {worst_oracle:.1e} (f = 2..8); max local-accuracy error "
           f"{worst_local:.1e} over {rows} rows")
    assert worst_oracle <= 1e-6
    assert worst_local <= 1e-6


# -- 9 ----------------------------------------------------------------------------


def test_criterion_09_confidence_filter(record_property, run500):
    r = run500
    rows = confidence_filter_table(r["yb"], r["pred"], r["conf"], [0.0, 0.5, 0.6, 0.7, 0.8, 0.9])
    oa = {t: o for t, o, _ in rows}
    kept = [k for _, _, k in rows]
    monotone = all(b <= a for a, b in zip(kept, kept[1:]))
    ok = oa[0.8] >= oa[0.0] and monotone
    table = ", ".join(f"{t:g}: OA {o:.4f} kept {k:.3f}" for t, o, k in rows)
    report(record_property, 9, ok, table)
    assert oa[0.8] >= oa[0.0]
    assert monotone


# -- 10 ---------------------------------------------------------------------------


def test_criterion_10_dual_cloud(record_property):
    spec = parse_parameter_file("[clouds]\nPC1 = a\nPC2 = b\n[scales]\nvalues = 5\n"
                                "[features]\nZ_SC5_MODE_PC1_PC2_MINUS\n")
    lines = []
    ok = True
    for seed in (11, 12, 13):
        s = generate_scene(SceneParams(seed=seed))
        xy = s.core.xyz[:, :2]
        tile = s.tile_of(xy)
        interior = s.border_distance(xy) >= 2.5  # 5 m spheres stay inside their tile
        d = compute_matrix(spec, s.pc1, s.pc2, core=s.core).values[:, 0]
        ground = d[interior & (tile == GROUND)]
        ground = ground[~np.isnan(ground)]
        water_all = d[interior & (tile == WATER)]
        water = water_all[~np.isnan(water_all)]
        sem = ground.std() / np.sqrt(len(ground))
        g_ok = abs(ground.mean()) <= 3 * sem
        w_ok = len(water) > 0 and bool(np.all(water < 0))
        ok &= g_ok and w_ok
        lines.append(f"seed {seed}: ground mean {ground.mean():+.4f} (3 s.e. {3 * sem:.4f}, n {len(ground)}), "
                     f"water max {water.max():+.3f} (n {len(water)}, {len(water_all) - len(water)} without NIR)")
    report(record_property, 10, ok, "; ".join(lines))
    assert ok


# -- 11 ---------------------------------------------------------------------------

PIPELINE_PARAMS = """[clouds]
PC1 = pc1.csv
PC2 = pc2.csv
CORE = core.csv
[scales]
values = 1, 2, 3
knn = 2
[features]
PCA1_SCx_PC1
PLANARITY_SCx_PC1
VERTICALITY_SCx_PC1
ZRANGE_SCx_PC1
CURVATURE_SCx_PC1
NUMBEROFRETURNS_SCx_MEAN_PC1
INTENSITY_SCx_MODE_PC1
Z_SCx_MODE_PC1_PC2_MINUS
INTENSITY_SC0_PC1
DZ2_SC0_PC2
"""


def _pipeline(root, threads):
    root.mkdir()
    t = ["--threads", str(threads), "--seed", "7"]
    assert run(["synth", "--out", str(root), "--extent", "45", *t]) == 0
    (root / "params.txt").write_text(PIPELINE_PARAMS)
    p = ["--params", str(root / "params.txt"), *t]
    steps = [
        ["features", *p, "--out", str(root / "features.csv")],
        ["select", *p, "--features", str(root / "features.csv"), "--trees", "30", "--out", str(root / "sel")],
        ["train", "--params", str(root / "sel" / "optimized_params.txt"), *t, "--out", str(root / "model.json")],
        ["classify", "--params", str(root / "sel" / "optimized_params.txt"), *t,
         "--model", str(root / "model.json"), "--out", str(root / "classified.csv")],
        ["explain", "--params", str(root / "sel" / "optimized_params.txt"), *t,
         "--model", str(root / "model.json"), "--max-rows", "300", "--out", str(root / "shapley.csv")],
        ["eval", "--classified", str(root / "classified.csv"), *t, "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_criterion_11_determinism(record_property, tmp_path):
    files_a = _pipeline(tmp_path / "a", 1)
    files_b = _pipeline(tmp_path / "b", 4)
    same = files_a == files_b
    differ = [f for f in files_a if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    ok = same and not differ
    report(record_property, 11, ok,
           f"{len(files_a)} output files compared (threads 1 vs 4), differing: {differ or 'none'}")
    assert same
    assert not differ


# -- 12 ---------------------------------------------------------------------------


def test_criterion_12_throughput(record_property):
    n_core = 1_000_000
    scene = generate_scene(SceneParams(seed=21, extent=(330.0, 330.0)))
    assert len(scene.pc1) >= n_core
    base = default_spec()
    spec = PipelineSpec(dict(base.cloud_bindings), [1.0], list(base.knn_values), list(base.descriptors))
    core = scene.pc1.subset(np.arange(n_core), role="CORE")
    compute_matrix(spec, scene.pc1, scene.pc2, core=core.subset(np.arange(16)), threads=1)  # compile
    seconds = {}
    for threads in (1, 4):
        t0 = time.perf_counter()
        compute_matrix(spec, scene.pc1, scene.pc2, core=core, threads=threads)
        seconds[threads] = time.perf_counter() - t0
    speedup = seconds[1] / seconds[4]
    cpus = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    ok = speedup >= 2.0
    report(record_property, 12, ok,
           f"{n_core} core points, {len(expand_scales(spec))} predictors at 1 m: "
           f"{seconds[1]:.1f} s at 1 worker, {seconds[4]:.1f} s at 4 workers, speedup {speedup:.2f}x "
           f"on {cpus} available CPU(s)")
    assert speedup >= 2.0
