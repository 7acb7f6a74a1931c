import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventriq.errors import DegenerateContour, DegenerateFit
from ventriq.geometry import (
    Contour, PointSet, SimilarityTransform, VoxelVolume, apply_transform, fit_similarity, polygon_area,
    rotation_about, voxel_to_world,
)


def vol(origin=(0, 0, 0), spacing=(2, 2, 10), dims=(4, 4, 3)):
    return VoxelVolume(dims, spacing, origin, np.eye(3), np.zeros(dims))


def test_voxel_to_world_examples():
    assert np.allclose(voxel_to_world(vol(), (1, 1, 1)), (2, 2, 10))
    assert np.allclose(voxel_to_world(vol(origin=(3, 4, 5)), (0, 0, 0)), (3, 4, 5))
    v = vol(origin=(5, 0, 0), spacing=(1.8, 1.8, 10), dims=(16, 4, 2))
    assert np.allclose(voxel_to_world(v, (10, 0, 0)), (23, 0, 0))


def test_voxel_to_world_out_of_range():
    with pytest.raises(IndexError):
        voxel_to_world(vol(), (4, 0, 0))


def test_volume_rejects_bad_orientation():
    with pytest.raises(ValueError):
        VoxelVolume((2, 2, 1), (1, 1, 1), (0, 0, 0), np.diag([1, 2, 1]), np.zeros(4))


def test_polygon_area_examples():
    sq = Contour(0, [(0, 0), (1, 0), (1, 1), (0, 1)])
    assert polygon_area(sq) == 1.0
    assert polygon_area(Contour(0, sq.vertices[::-1])) == 1.0
    t = 2 * np.pi * np.arange(256) / 256
    circle = Contour(0, np.c_[30 * np.cos(t), 30 * np.sin(t)])
    assert abs(polygon_area(circle) - math.pi * 900) / (math.pi * 900) < 1e-3


def test_polygon_area_degenerate():
    with pytest.raises(DegenerateContour):
        polygon_area(Contour(0, [(0, 0), (1, 1)]))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.1, 10))
def test_polygon_area_translation_and_scale(dx, dy, s):
    v = np.array([(0, 0), (3, 0), (4, 2), (1, 3)], dtype=float)
    a = polygon_area(v)
    assert polygon_area(v * s + (dx, dy)) == pytest.approx(a * s * s, rel=1e-9)


def _cloud(rng, n=12):
    return rng.normal(size=(n, 3)) * (10, 6, 3)


def test_fit_similarity_identity(rng):
    p = _cloud(rng)
    t = fit_similarity(p, p)
    assert t.scale == pytest.approx(1.0)
    assert np.allclose(t.rotation, np.eye(3))
    assert t.residual < 1e-20


def test_fit_similarity_translation(rng):
    p = _cloud(rng)
    t = fit_similarity(p, p + (10, 0, 0))
    assert t.scale == pytest.approx(1.0)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, (10, 0, 0))


def test_fit_similarity_scaled_rotation(rng):
    p = _cloud(rng)
    Rz = rotation_about((0, 0, 1), np.pi / 2)
    t = fit_similarity(p, 2 * p @ Rz.T)
    assert abs(t.scale - 2) < 1e-9
    assert np.allclose(t.rotation, Rz, atol=1e-9)
    assert t.residual < 1e-9


def test_fit_similarity_degenerate():
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateFit):
        fit_similarity(line, line)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_similarity_recovers_random_transform(seed):
    r = np.random.default_rng(seed)
    p = _cloud(r)
    R = rotation_about(r.normal(size=3), r.uniform(-np.pi, np.pi))
    s, t = r.uniform(0.2, 5), r.normal(size=3) * 50
    fit = fit_similarity(p, s * p @ R.T + t)
    assert fit.scale == pytest.approx(s, rel=1e-9)
    assert np.allclose(fit.rotation, R, atol=1e-8)
    assert np.allclose(fit.translation, t, atol=1e-7)


def test_apply_transform_examples():
    ps = PointSet([[0, 0, 0], [1, 2, 3]], [0, 0])
    assert np.array_equal(apply_transform(SimilarityTransform(), ps).points, ps.points)
    moved = apply_transform(SimilarityTransform(translation=(1, 2, 3)), ps)
    assert np.allclose(moved.points[0], (1, 2, 3))


def test_transform_inverse_and_compose(rng):
    p = _cloud(rng)
    a = SimilarityTransform(2.0, rotation_about((1, 1, 0), 0.3), (1, 2, 3))
    b = SimilarityTransform(0.5, rotation_about((0, 0, 1), -1.0), (-4, 0, 2))
    assert np.allclose(a.inverse_points(a.apply_points(p)), p)
    assert np.allclose(a.compose(b).apply_points(p), a.apply_points(b.apply_points(p)))


def test_pointset_validation():
    with pytest.raises(ValueError):
        PointSet([[0, 0, 0]], [0, 1])
    with pytest.raises(ValueError):
        PointSet([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [0, 0, 0], [[0, 1, 3]])
