from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cloudclass.cloud import (Point, PointCloud, echo_ratio, filter_by_class, load_cloud, save_cloud,
                              subsample_grid)
from cloudclass.errors import CloudParseError, SchemaError


def sample_cloud(n=50, seed=0):
    rng = np.random.default_rng(seed)
    nr = rng.integers(1, 4, n)
    rn = np.minimum(rng.integers(1, 4, n), nr)
    return PointCloud(rng.normal(size=(n, 3)) * 100, intensity=rng.uniform(0, 1000, n),
                      return_number=rn, number_of_returns=nr,
                      classification=rng.integers(0, 5, n), rgb=rng.uniform(0, 255, (n, 3)),
                      extra={"gps_time": rng.uniform(0, 1e6, n)})


@pytest.mark.parametrize("suffix", [".csv", ".ply"])
def test_save_load_is_bit_exact(tmp_path, suffix):
    cloud = sample_cloud()
    path = tmp_path / ("c" + suffix)
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert back.equals(cloud)
    save_cloud(back, tmp_path / ("d" + suffix))
    assert path.read_bytes() == (tmp_path / ("d" + suffix)).read_bytes()


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)),
                  elements=st.floats(-1e12, 1e12, allow_nan=False)))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(tmp_path_factory, xyz):
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    cloud = PointCloud(xyz)
    save_cloud(cloud, path)
    assert load_cloud(path).equals(cloud)


def test_point_invariants():
    with pytest.raises(SchemaError):
        Point(0, 0, float("nan"))
    with pytest.raises(SchemaError):
        Point(0, 0, 0, return_number=3, number_of_returns=2)
    assert echo_ratio(Point(0, 0, 0, return_number=1, number_of_returns=4)) == 0.25
    cloud = sample_cloud(5)
    assert cloud.point(2).z == cloud.xyz[2, 2]
    assert np.allclose(cloud.echo_ratio, cloud.return_number / cloud.number_of_returns)


def test_cloud_is_immutable():
    cloud = sample_cloud(5)
    with pytest.raises(ValueError):
        cloud.xyz[0, 0] = 1.0
    with pytest.raises(AttributeError):
        cloud.foo = 1


def test_schema_errors():
    with pytest.raises(SchemaError):
        PointCloud(np.zeros((3, 3)), intensity=[1.0, 2.0])
    with pytest.raises(SchemaError):
        PointCloud(np.zeros((2, 3)), return_number=[2, 1], number_of_returns=[1, 1])


def test_parse_errors_report_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y,z,intensity\n0,0,0,1\n1,2,oops,3\n")
    with pytest.raises(CloudParseError) as err:
        load_cloud(p)
    assert err.value.line == 3 and "bad.csv:3" in str(err.value)
    p.write_text("x,y,intensity\n0,0,1\n")
    with pytest.raises(SchemaError):
        load_cloud(p)
    p.write_text("x,y,z\n0,0\n")
    with pytest.raises(CloudParseError):
        load_cloud(p)
    p.write_text("x,y,z,return_number,number_of_returns\n0,0,0,3,2\n")
    with pytest.raises(SchemaError):
        load_cloud(p)


def test_missing_optional_attributes_stay_absent(tmp_path):
    p = tmp_path / "xyz.csv"
    p.write_text("x,y,z\n0,0,0\n1,1,1\n")
    cloud = load_cloud(p)
    assert cloud.intensity is None and cloud.rgb is None and cloud.echo_ratio is None


def test_filter_by_class():
    cloud = sample_cloud()
    sub = filter_by_class(cloud, 2)
    assert np.all(sub.classification == 2)
    assert len(sub) == int(np.sum(cloud.classification == 2))
    assert len(filter_by_class(cloud, 99)) == 0
    with pytest.raises(SchemaError):
        filter_by_class(PointCloud(np.zeros((2, 3))), 1)


def brute_subsample(xyz, spacing):
    origin = xyz.min(axis=0)
    cells = {}
    for i, p in enumerate(xyz):
        cell = tuple(np.floor((p - origin) / spacing).astype(int))
        centre = origin + (np.array(cell) + 0.5) * spacing
        d2 = float(np.sum((p - centre) ** 2))
        if cell not in cells or d2 < cells[cell][0]:
            cells[cell] = (d2, i)
    return sorted(i for _, i in cells.values())


def test_subsample_grid_matches_brute_force():
    rng = np.random.default_rng(4)
    xyz = np.round(rng.uniform(0, 5, (600, 3)), 2)
    cloud = PointCloud(xyz)
    for spacing in (0.3, 1.0, 2.5):
        assert list(subsample_grid(cloud, spacing)) == brute_subsample(xyz, spacing)
    with pytest.raises(ValueError):
        subsample_grid(cloud, 0.0)
