from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudclass.cloud import PointCloud
from cloudclass.dsl import (ATTRIBUTE_KINDS, DualOp, GEOMETRIC_KINDS, Stat, parse_feature,
                            parse_parameter_file)
from cloudclass.errors import ConfigurationError, SchemaError
from cloudclass.features import (FeatureMatrix, N_SLOTS, compute_matrix, context_distance,
                                 dip_angle, dual_combine, eigen_features, geometry_features,
                                 height_features, neighbourhood_features, stat_operator,
                                 stat_slot)
from cloudclass.spatial import Scale

import oracles


def random_neighbourhood(rng):
    m = int(rng.integers(6, 120))
    axes = rng.uniform(0.05, 1.0, 3)
    rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    pts = (rng.normal(size=(m, 3)) * axes) @ rot.T + rng.normal(size=3) * 10
    core = pts[rng.integers(m)] + rng.normal(size=3) * 0.05
    r = float(np.max(np.linalg.norm(pts - core, axis=1))) * rng.uniform(1.0, 1.3)
    vals = rng.normal(size=(len(ATTRIBUTE_KINDS), m)) * rng.uniform(0.5, 50)
    vals[2] = rng.integers(1, 4, m)  # integer-valued like return numbers
    vals[0] = pts[:, 2]
    return pts, core, r, vals


def full_block(pts, core, r, vals):
    out = np.full(N_SLOTS, np.nan)
    neighbourhood_features(np.ascontiguousarray(pts), len(pts), np.ascontiguousarray(vals),
                           np.asarray(core, float), float(r), np.ones(N_SLOTS, np.bool_), out)
    return out


def assert_close(got, want, label):
    if math.isnan(want):
        assert math.isnan(got), label
    else:
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12), label


def test_fifty_random_neighbourhoods_match_oracle():
    rng = np.random.default_rng(2024)
    for case in range(50):
        pts, core, r, vals = random_neighbourhood(rng)
        block = full_block(pts, core, r, vals)
        ref = oracles.geometric(pts, core, r)
        for slot, kind in enumerate(GEOMETRIC_KINDS):
            assert_close(block[slot], ref[kind], f"case {case} {kind}")
        for a, attr in enumerate(ATTRIBUTE_KINDS):
            ref_stats = oracles.statistics(vals[a])
            for stat in Stat:
                assert_close(block[stat_slot(attr, stat)], ref_stats[stat.value],
                             f"case {case} {attr} {stat.value}")


def test_line_has_linearity_one():
    t = np.linspace(-1, 1, 21)
    line = np.column_stack([t, 2 * t, -t])
    pca1, pca2, pca3, sph, lin, pla = eigen_features(line)
    assert lin == 1.0
    assert pca1 == 1.0
    assert pla == pytest.approx(0.0, abs=1e-12) and sph == pytest.approx(0.0, abs=1e-12)


def test_plane_has_planarity_one():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    # x and y spread equally so lambda1 == lambda2
    plane = np.column_stack([g, np.full(len(g), 3.0)])
    _, _, pca3, sph, lin, pla = eigen_features(plane)
    assert pla == 1.0
    assert pca3 == pytest.approx(0.0, abs=1e-12) and lin == pytest.approx(0.0, abs=1e-12)


def test_horizontal_plane_verticality_and_dip_zero():
    g = np.stack(np.meshgrid(np.arange(4.0), np.arange(6.0)), -1).reshape(-1, 2)
    plane = np.column_stack([g, np.full(len(g), -1.5)])
    vert, rough, curv, nb, aniso, fom = geometry_features(plane, plane.mean(0), Scale(10.0))
    assert vert == 0.0
    assert rough == 0.0
    assert nb == len(plane)
    assert dip_angle(plane) == 0.0


def test_vertical_wall_is_vertical():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    wall = np.column_stack([g[:, 0], np.zeros(len(g)), g[:, 1]])
    vert = geometry_features(wall, wall.mean(0), Scale(10.0))[0]
    assert vert == pytest.approx(1.0, abs=1e-12)
    assert dip_angle(wall) == pytest.approx(90.0, abs=1e-9)


def test_symmetric_values_have_zero_skew():
    v = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    assert stat_operator(v, Stat.SKEW) == 0.0
    assert stat_operator(np.full(7, 2.5), Stat.SKEW) == 0.0


def test_sphere_curvature():
    rng = np.random.default_rng(5)
    R = 4.0
    theta = np.arccos(rng.uniform(np.cos(0.1), 1.0, 400))
    phi = rng.uniform(0, 2 * np.pi, 400)
    cap = R * np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    core = np.array([0.0, 0.0, R])
    curv = geometry_features(cap, core, Scale(2 * 2.0))[2]
    # a sphere has |H| = 1/R; a quadric over a narrow cap is within a percent
    assert abs(curv) == pytest.approx(1 / R, rel=1e-2)


def test_minimum_counts_give_nan():
    two = np.array([[0.0, 0, 0], [1, 1, 1]])
    assert all(math.isnan(v) for v in eigen_features(two))
    assert math.isnan(stat_operator([1.0], Stat.STD))
    assert math.isnan(stat_operator([1.0, 2.0], Stat.SKEW))
    five = np.random.default_rng(0).normal(size=(5, 3))
    assert math.isnan(geometry_features(five, five[0], Scale(9.0))[2])
    nb = geometry_features(np.zeros((0, 3)), np.zeros(3), Scale(1.0))[3]
    assert nb == 0


def test_coincident_points_are_missing():
    pts = np.ones((10, 3))
    assert all(math.isnan(v) for v in eigen_features(pts))


def test_height_features():
    assert height_features([1.0, 4.0, 2.0], 2.0) == (3.0, 1.0, 2.0)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60))
@settings(max_examples=200, deadline=None)
def test_stat_operator_matches_numpy(values):
    ref = oracles.statistics(values)
    for stat in Stat:
        got = stat_operator(values, stat)
        want = ref[stat.value]
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9 * (1 + max(abs(x) for x in values)))


def test_mode_returns_bin_center_and_constant_value():
    v = np.array([0.0, 0.1, 0.1, 0.1, 6.4])
    # 64 bins of width 0.1; the three 0.1 values share bin 1
    assert stat_operator(v, Stat.MODE) == pytest.approx(0.15)
    assert stat_operator([7.0, 7.0], Stat.MODE) == 7.0


def test_dual_combine():
    a = np.array([1.0, 2.0, np.nan, 4.0])
    b = np.array([0.5, 0.0, 1.0, 2.0])
    assert np.array_equal(dual_combine(a, b, DualOp.MINUS), [0.5, 2.0, np.nan, 2.0], equal_nan=True)
    assert np.array_equal(dual_combine(a, b, DualOp.DIVIDE), [2.0, np.nan, np.nan, 2.0], equal_nan=True)
    assert dual_combine(3.0, 2.0, "MULTIPLY") == 6.0
    assert dual_combine(3.0, 2.0, "PLUS") == 5.0


def test_context_distance_vertical_and_horizontal():
    target = PointCloud(np.array([[0.0, 0, 0], [3, 4, 1], [10, 0, 2]]),
                        classification=np.array([2, 2, 5]))
    core = [0.0, 0.0, 5.0]
    assert context_distance(core, target, None, 1) == 5.0
    assert context_distance(core, target, None, 2, "HORIZONTAL") == 2.5
    assert context_distance(core, target, 5, 1) == 3.0
    assert math.isnan(context_distance(core, target, 9, 1))


PARAMS = """
[clouds]
PC1 = a
PC2 = b
[scales]
values = 1.5, 3
knn = 2
[features]
PCA1_SCx_PC1
CURVATURE_SC3_PC1
Z_SCx_MODE_PC1_PC2_MINUS
INTENSITY_SC3_SKEW_PC2
INTENSITY_SC0_PC1
R_SC3_MEAN_PC1
DZ2_SC0_PC2
DH2_SC0_PC1_CTX4
"""


def small_scene(seed=0, n=800):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, 6, (n, 3)) * [1, 1, 0.4]
    pc1 = PointCloud(xyz, intensity=rng.uniform(0, 100, n),
                     classification=rng.choice([2, 4], n))
    xyz2 = rng.uniform(0, 6, (n // 2, 3)) * [1, 1, 0.4]
    pc2 = PointCloud(xyz2, role="PC2", intensity=rng.uniform(0, 100, n // 2))
    core = PointCloud(rng.uniform(0.5, 5.5, (40, 3)) * [1, 1, 0.4], role="CORE")
    return pc1, pc2, core


def test_compute_matrix_matches_brute_force():
    pc1, pc2, core = small_scene()
    spec = parse_parameter_file(PARAMS)
    fm = compute_matrix(spec, pc1, pc2, core=core, threads=1)
    assert fm.tokens[:3] == ["PCA1_SC1.5_PC1", "PCA1_SC3_PC1", "CURVATURE_SC3_PC1"]
    for i, c in enumerate(core.xyz):
        for d in (1.5, 3.0):
            n1 = oracles.radius_scan(pc1.xyz, c, d / 2)
            g = oracles.geometric(pc1.xyz[n1], c, d / 2)
            tok = f"PCA1_SC{d:g}_PC1"
            assert_close(fm.column(tok)[i], g["PCA1"], tok)
            n2 = oracles.radius_scan(pc2.xyz, c, d / 2)
            za = oracles.statistics(pc1.xyz[n1, 2])["MODE"]
            zb = oracles.statistics(pc2.xyz[n2, 2])["MODE"]
            assert_close(fm.column(f"Z_SC{d:g}_MODE_PC1_PC2_MINUS")[i], za - zb, "dual")
        n1 = oracles.radius_scan(pc1.xyz, c, 1.5)
        assert_close(fm.column("CURVATURE_SC3_PC1")[i],
                     oracles.geometric(pc1.xyz[n1], c, 1.5)["CURVATURE"], "curv")
        n2 = oracles.radius_scan(pc2.xyz, c, 1.5)
        assert_close(fm.column("INTENSITY_SC3_SKEW_PC2")[i],
                     oracles.statistics(pc2.intensity[n2])["SKEW"], "skew")
        nearest = oracles.knn_scan(pc1.xyz, c, 1)[0][0]
        assert fm.column("INTENSITY_SC0_PC1")[i] == pc1.intensity[nearest]
        k2 = oracles.knn_scan(pc2.xyz, c, 2)[0]
        assert fm.column("DZ2_SC0_PC2")[i] == pytest.approx(np.mean(c[2] - pc2.xyz[k2, 2]), rel=1e-12)
        ctx = pc1.xyz[pc1.classification == 4]
        k4 = oracles.knn_scan(ctx, c, 2)[0]
        dh = np.mean(np.linalg.norm(ctx[k4, :2] - c[:2], axis=1))
        assert fm.column("DH2_SC0_PC1_CTX4")[i] == pytest.approx(dh, rel=1e-12)
    # no RGB in the clouds: the column exists and is entirely missing
    assert np.isnan(fm.column("R_SC3_MEAN_PC1")).all()


def test_compute_matrix_is_thread_independent():
    pc1, pc2, core = small_scene(1, 3000)
    core = PointCloud(np.random.default_rng(3).uniform(0, 6, (1500, 3)) * [1, 1, 0.4], role="CORE")
    spec = parse_parameter_file(PARAMS)
    a = compute_matrix(spec, pc1, pc2, core=core, threads=1).values
    b = compute_matrix(spec, pc1, pc2, core=core, threads=4).values
    assert np.array_equal(a, b, equal_nan=True)


def test_unbound_cloud_is_a_configuration_error():
    pc1, _, core = small_scene()
    with pytest.raises(ConfigurationError):
        compute_matrix(parse_parameter_file(PARAMS), pc1, None, core=core)


def test_feature_matrix_csv_round_trip(tmp_path):
    cols = [parse_feature("PCA1_SC2_PC1"), parse_feature("DZ3_SC0_PC1")]
    fm = FeatureMatrix(cols, np.array([[0.1, np.nan], [1 / 3, -2.0]]), np.array([7, 9]))
    fm.to_csv(tmp_path / "f.csv")
    back = FeatureMatrix.from_csv(tmp_path / "f.csv")
    assert back.tokens == fm.tokens
    assert np.array_equal(back.values, fm.values, equal_nan=True)
    assert list(back.core_ids) == [7, 9]
    with pytest.raises(SchemaError):
        fm.select(["PCA2_SC2_PC1"])
