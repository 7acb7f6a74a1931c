import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventriq.errors import CorrespondenceError, DimensionError, InsufficientData, InsufficientVariance
from ventriq.geometry import PointSet, fit_similarity, rms, rotation_about
from ventriq.phantom import PhantomSpec, subject_params, surface_landmarks
from ventriq.shape_model import (
    ShapeCoefficients, clamp, instance, pdm_from_bytes, pdm_to_bytes, procrustes_align, project,
    reconstruction_rms, train_pdm, with_anchors,
)


def random_shapes(rng, s=8, n=30):
    base = rng.normal(size=(n, 3)) * 10
    return [PointSet(base + rng.normal(size=(n, 3)), np.zeros(n)) for _ in range(s)]


def similar(ps, rng):
    R = rotation_about(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    return ps.with_points(rng.uniform(0.5, 2) * ps.points @ R.T + rng.normal(size=3) * 20)


def normalized(x):
    x = x - x.mean(axis=0)
    return x / np.sqrt((x ** 2).sum())


def test_procrustes_identical_shapes(rng):
    a = random_shapes(rng, 1)[0]
    al, mean = procrustes_align([a, a])
    assert np.allclose(al[0].points, al[1].points)
    assert rms(mean, al[0]) < 1e-12
    assert np.sqrt((mean.points ** 2).sum()) == pytest.approx(1.0)


def test_procrustes_rigid_motion_only(rng):
    a = random_shapes(rng, 1)[0]
    R = rotation_about((0, 1, 1), 0.8)
    b = a.with_points(a.points @ R.T + (5, -3, 2))
    al, _ = procrustes_align([a, b])
    assert rms(al[0], al[1]) < 1e-7


def test_procrustes_recovers_generator_mean(rng):
    spec = PhantomSpec()
    gt = surface_landmarks(subject_params(spec, 0), 0, spec.n_angles, spec.n_rings)
    shapes = [similar(gt, rng) for _ in range(20)]
    _, mean = procrustes_align(shapes)
    ref = normalized(gt.points)
    t = fit_similarity(mean.points, ref)
    assert rms(t.apply_points(mean.points), ref) < 1e-6


def test_procrustes_errors(rng):
    a, b = random_shapes(rng, 2)
    with pytest.raises(CorrespondenceError):
        procrustes_align([a, PointSet(b.points[:-1], np.zeros(len(b) - 1))])
    with pytest.raises(InsufficientData):
        procrustes_align([a])


def test_train_pdm_identical_shapes_has_no_variance(rng):
    a = random_shapes(rng, 1)[0]
    with pytest.raises(InsufficientVariance):
        train_pdm([a, a, a])


def test_train_pdm_single_direction(rng):
    mean = rng.normal(size=(20, 3))
    v = rng.normal(size=(20, 3))
    v /= np.linalg.norm(v)
    shapes = [PointSet(mean + a * v, np.zeros(20)) for a in (-2.0, -1.0, 0.5, 1.0, 1.5)]
    pdm = train_pdm(shapes, 0.95)
    assert pdm.n_modes == 1
    assert abs(abs(pdm.modes[:, 0] @ v.reshape(-1))) > 1 - 1e-9


def test_train_pdm_full_rank(rng):
    shapes = random_shapes(rng, 7)
    pdm = train_pdm(shapes, 1.0)
    assert pdm.n_modes == 6
    with pytest.raises(InsufficientData):
        train_pdm(shapes[:1])


def test_eigenvalues_match_covariance_oracle(rng):
    shapes = random_shapes(rng, 12, 25)
    pdm = train_pdm(shapes, 1.0)
    X = np.stack([s.points.reshape(-1) for s in shapes])
    lam = np.linalg.eigvalsh(np.cov(X, rowvar=False))[::-1][:pdm.n_modes]
    assert np.allclose(pdm.variances, lam, rtol=1e-9)
    assert np.allclose(pdm.modes.T @ pdm.modes, np.eye(pdm.n_modes), atol=1e-12)


def test_instance_examples(rng):
    pdm = train_pdm(random_shapes(rng, 6), 1.0)
    assert np.array_equal(instance(pdm, np.zeros(pdm.n_modes)).points.reshape(-1), pdm.mean)
    i = 1
    b = np.zeros(pdm.n_modes)
    b[i] = np.sqrt(pdm.variances[i])
    expect = pdm.mean + np.sqrt(pdm.variances[i]) * pdm.modes[:, i]
    assert np.allclose(instance(pdm, b).points.reshape(-1), expect)
    with pytest.raises(DimensionError):
        instance(pdm, np.zeros(pdm.n_modes + 1))


def test_project_examples(rng):
    shapes = random_shapes(rng, 8)
    pdm = train_pdm(shapes, 0.9)
    assert np.allclose(project(pdm, pdm.mean_shape).b, 0)
    b0 = rng.normal(size=pdm.n_modes) * np.sqrt(pdm.variances)
    x = instance(pdm, b0)
    assert np.allclose(project(pdm, x).b, b0, atol=1e-10)
    # component orthogonal to every mode is invisible to the projection
    v = rng.normal(size=pdm.mean.shape[0])
    v -= pdm.modes @ (pdm.modes.T @ v)
    assert np.allclose(project(pdm, x.points.reshape(-1) + v).b, b0, atol=1e-10)
    with pytest.raises(DimensionError):
        project(pdm, np.zeros(9))


def test_full_rank_reconstruction(rng):
    shapes = random_shapes(rng, 10)
    aligned, _ = procrustes_align(shapes)
    pdm = train_pdm(aligned, 1.0)
    assert max(reconstruction_rms(pdm, s) for s in aligned) <= 1e-6


def test_clamp_examples(rng):
    pdm = train_pdm(random_shapes(rng, 6), 1.0)
    sd = np.sqrt(pdm.variances)
    b = 0.5 * sd
    assert np.array_equal(clamp(pdm, b).b, b)
    assert np.allclose(clamp(pdm, 10 * sd).b, 3 * sd)
    assert np.allclose(clamp(pdm, -10 * sd).b, -3 * sd)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_clamp_is_idempotent_and_bounded(vals):
    pdm = train_pdm(random_shapes(np.random.default_rng(7), 6), 1.0)
    b = np.array(vals)
    c = clamp(pdm, b)
    assert np.all(np.abs(c.b) <= 3 * np.sqrt(pdm.variances) + 1e-12)
    assert np.array_equal(clamp(pdm, c).b, c.b)


def test_coefficients_reject_nan():
    with pytest.raises(ValueError):
        ShapeCoefficients([0.0, np.nan])


def test_serialization_round_trip():
    spec = PhantomSpec()
    shapes = [surface_landmarks(subject_params(spec, i), 0, spec.n_angles, spec.n_rings) for i in range(6)]
    al, _ = procrustes_align(shapes)
    pdm = with_anchors(train_pdm(al, 0.95))
    back = pdm_from_bytes(pdm_to_bytes(pdm))
    assert np.array_equal(back.mean, pdm.mean) and np.array_equal(back.modes, pdm.modes)
    assert np.array_equal(back.variances, pdm.variances)
    assert back.anchors == pdm.anchors
    assert pdm_to_bytes(back) == pdm_to_bytes(pdm)
