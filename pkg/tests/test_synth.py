from __future__ import annotations

import numpy as np
import pytest

from cloudclass.synth import (BUILDING, GROUND, VEGETATION, WATER, SceneParams, generate_scene,
                              sample_balanced)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneParams(seed=3))


def test_same_seed_same_scene():
    a = generate_scene(SceneParams(seed=8, extent=(30.0, 30.0)))
    b = generate_scene(SceneParams(seed=8, extent=(30.0, 30.0)))
    assert a.pc1.equals(b.pc1) and a.pc2.equals(b.pc2) and a.core.equals(b.core)
    c = generate_scene(SceneParams(seed=9, extent=(30.0, 30.0)))
    assert not a.pc1.equals(c.pc1)


def test_every_class_present_and_labels_follow_tiles(scene):
    cls = scene.core.classification
    assert set(np.unique(cls)) == {GROUND, VEGETATION, BUILDING, WATER}
    tile = scene.tile_of(scene.core.xyz[:, :2])
    # labels are per point: ground shows through canopy gaps and around buildings
    assert np.all((cls == tile) | (cls == GROUND))
    assert np.all(cls[tile == GROUND] == GROUND)


def test_echo_numbering_valid(scene):
    for cloud in (scene.pc1, scene.pc2):
        assert np.all(cloud.return_number >= 1)
        assert np.all(cloud.return_number <= cloud.number_of_returns)


def test_vegetation_has_more_returns_than_ground(scene):
    nr, cls = scene.pc1.number_of_returns, scene.pc1.classification
    assert nr[cls == VEGETATION].mean() > nr[cls == GROUND].mean()


def test_water_seen_below_surface_in_green_and_sparse_in_nir(scene):
    p = scene.params
    g_water = scene.pc1.classification == WATER
    n_water = scene.pc2.classification == WATER
    # green reaches the bottom, NIR stays on the surface
    assert np.median(scene.pc1.xyz[g_water, 2]) < np.median(scene.pc2.xyz[n_water, 2]) - p.water_depth / 2
    g_ground = scene.pc1.classification == GROUND
    n_ground = scene.pc2.classification == GROUND
    assert n_water.sum() / max(1, n_ground.sum()) < 0.2 * g_water.sum() / g_ground.sum()


def test_border_distance(scene):
    t = scene.params.tile
    d = scene.border_distance(np.array([[0.5, 7.0], [t / 2, t / 2], [t + 1.0, 2 * t - 0.25]]))
    assert d.tolist() == pytest.approx([0.5, t / 2, 0.25])


def test_sample_balanced():
    labels = np.array([0] * 10 + [1] * 30 + [2] * 5)
    idx = sample_balanced(labels, 8, seed=1)
    assert np.bincount(labels[idx]).tolist() == [0, 8, 5]
    assert np.all(np.diff(idx) > 0)
    assert np.array_equal(idx, sample_balanced(labels, 8, seed=1))
    mask = np.arange(len(labels)) % 2 == 0
    assert np.all(mask[sample_balanced(labels, 8, seed=1, mask=mask)])


def test_parameter_validation():
    with pytest.raises(ValueError):
        SceneParams(tile=0.0)
    with pytest.raises(ValueError):
        SceneParams(densities={GROUND: 0.0, VEGETATION: 0.0, BUILDING: 0.0, WATER: 0.0})
