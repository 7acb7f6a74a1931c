from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventriq.appearance import (
    AppearanceModel, best_candidate, iam_from_profiles, iam_from_reader, iam_to_bytes, mahalanobis,
    normalize_profiles, pick_candidate, sample_profile, slice_profiles, train_iam,
)
from ventriq.errors import DegenerateNormal, DimensionError, InsufficientData
from ventriq.geometry import Structure, VoxelVolume
from ventriq.mesh import vertex_normals
from ventriq.phantom import PhantomSpec, render_subject, subject_params
from ventriq.shape_model import _Reader


def edge_volume(x_edge=10, lo=100.0, hi=800.0, n=40):
    x = np.arange(n)
    prof = np.where(x < x_edge, lo, np.where(x > x_edge, hi, 0.5 * (lo + hi)))
    data = np.broadcast_to(prof[:, None, None], (n, 8, 3)).copy()
    return VoxelVolume((n, 8, 3), (1, 1, 1), (0, 0, 0), np.eye(3), data)


def const_volume(value=300.0):
    return VoxelVolume((20, 20, 3), (1, 1, 1), (0, 0, 0), np.eye(3), np.full((20, 20, 3), value))


def test_constant_volume_profile():
    p = sample_profile(const_volume(), (10, 10, 1), (1, 0, 0), 3, 1.0)
    assert np.all(p.raw == p.raw[0])
    assert np.array_equal(p.samples, np.zeros(7))


def test_step_edge_profile():
    p = sample_profile(edge_volume(), (10, 4, 1), (1, 0, 0), 2, 1.0)
    assert np.allclose(p.raw, [100, 100, 450, 800, 800])
    assert np.all(np.diff(p.raw) >= 0)


def test_sample_profile_zero_normal():
    with pytest.raises(DegenerateNormal):
        sample_profile(const_volume(), (1, 1, 1), (0, 0, 0), 2, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1000), min_size=5, max_size=9), st.floats(0.01, 100), st.floats(-500, 500))
def test_normalization_invariant_to_gain_and_offset(raw, gain, offset):
    raw = np.array(raw)
    a = normalize_profiles(raw)
    b = normalize_profiles(gain * raw + offset)
    assert np.allclose(a, b, atol=1e-9)
    assert np.abs(a).sum() == pytest.approx(1.0) or np.abs(a).sum() == 0.0


def test_phantom_boundary_peak_at_center():
    spec = PhantomSpec(noise_sd=0.0)
    sax, _, gt = render_subject(spec, subject_params(spec, 0), noise=False)[0]
    normals = vertex_normals(gt.points, gt.triangles)
    k = 4
    sp = slice_profiles(sax, gt.points, normals, k, 1.0)
    endo = gt.labels == int(Structure.LV_endo)
    z = sax.world_to_local(gt.points)[:, 2]
    # only slices that actually cut the cavity (the basal ring's nearest slice lies above the base)
    zs = sp.slice_index * sax.spacing[2]
    inside = (zs > z[endo].min()) & (zs < z[endo].max())
    sel = sp.observed & endo & inside
    peak = np.argmax(np.abs(sp.profiles[sel, 0, :]), axis=1)
    assert sel.sum() > 20
    assert np.mean(np.abs(peak - k) <= 1) >= 0.95


def test_train_iam_identical_pairs():
    spec = PhantomSpec()
    sax, _, gt = render_subject(spec, subject_params(spec, 0))[0]
    am = train_iam([sax] * 10, [gt] * 10, k=4)
    normals = vertex_normals(gt.points, gt.triangles)
    sp = slice_profiles(sax, gt.points, normals, 4, 1.0)
    obs = sp.observed
    assert np.allclose(am.cov[obs], 1e-6 * np.eye(9), rtol=0, atol=1e-18)
    assert np.allclose(am.mean[obs], sp.profiles[obs, 0, :], atol=1e-15)


def test_single_varying_sample(rng):
    S, N, L = 12, 3, 5
    prof = np.tile(rng.normal(size=(1, N, L)), (S, 1, 1))
    prof[:, :, 2] += rng.normal(size=(S, N))
    am = iam_from_profiles(prof, np.ones((S, N), bool), np.zeros(N), 2, 1.0)
    for i in range(N):
        diag = np.diag(am.cov[i])
        ridge = diag.min()  # every constant sample carries only the ridge
        assert ridge > 0
        assert int((diag > ridge * (1 + 1e-9)).sum()) == 1
        assert np.argmax(diag) == 2


def test_train_iam_needs_enough_pairs():
    spec = PhantomSpec()
    sax, _, gt = render_subject(spec, subject_params(spec, 0))[0]
    with pytest.raises(InsufficientData):
        train_iam([sax] * 3, [gt] * 3, k=4)


def test_boundary_beats_offset_profile(small_models, small_cohort):
    from ventriq.io import load_pointset, load_volume
    _, manifest, _ = small_cohort
    iam = small_models.iam
    m = 5
    better, total = 0, 0
    for e in manifest.subjects[:6]:
        for p in (0, 2):
            vol, gt = load_volume(e.sax[p]), load_pointset(e.gt[p])
            normals = vertex_normals(gt.points, gt.triangles)
            sp = slice_profiles(vol, gt.points, normals, iam.k, iam.step, m)
            d = iam.distances(sp.profiles)
            o = sp.observed
            # 5 mm along the normal is 5/|n_xy| in-plane steps; use the nearest in-range candidate
            better += int((d[o, m] <= d[o, 2 * m]).sum() + (d[o, m] <= d[o, 0]).sum())
            total += 2 * int(o.sum())
    assert better / total >= 0.95


def test_mahalanobis_examples():
    am = AppearanceModel(np.zeros((1, 5)), np.eye(5)[None], 2, 1.0)
    assert mahalanobis(am, 0, np.zeros(5)) == 0.0
    assert mahalanobis(am, 0, [3, 4, 0, 0, 0]) == pytest.approx(25.0)
    am2 = AppearanceModel(np.zeros((1, 2)), np.diag([2.0, 0.5])[None], 0, 1.0)
    assert mahalanobis(am2, 0, [1, 1]) == pytest.approx(2.5)
    with pytest.raises(DimensionError):
        mahalanobis(am, 0, np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_mahalanobis_nonnegative(seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(5, 5))
    am = AppearanceModel(r.normal(size=(1, 5)), (A @ A.T + 1e-3 * np.eye(5))[None], 2, 1.0)
    assert mahalanobis(am, 0, r.normal(size=5)) >= 0.0


def test_pick_candidate_tie_rule():
    m = 3
    assert pick_candidate(np.ones(7), m) == 0
    d = np.array([5, 1, 5, 5, 5, 1, 5.0])  # j=-2 and j=+2 tie
    assert pick_candidate(d, m) == -2


def _edge_model(k=3):
    vol = edge_volume(20)
    p = sample_profile(vol, (20, 4, 1), (1, 0, 0), k, 1.0)
    prof = np.tile(p.samples, (4, 1, 1))
    return iam_from_profiles(prof, np.ones((4, 1), bool), [0], k, 1.0)


def test_best_candidate_step_edge_shift():
    am = _edge_model()
    pt, d = best_candidate(am, edge_volume(22), 0, (20, 4, 1), (1, 0, 0), m=5)
    assert np.allclose(pt, (22, 4, 1))
    assert d == pytest.approx(0.0, abs=1e-12)


def test_best_candidate_training_volume_is_optimum():
    am = _edge_model()
    pt, _ = best_candidate(am, edge_volume(20), 0, (20, 4, 1), (1, 0, 0), m=5)
    assert np.allclose(pt, (20, 4, 1))


def test_best_candidate_constant_volume_ties_to_zero():
    am = AppearanceModel(np.zeros((1, 7)), 1e-6 * np.eye(7)[None], 3, 1.0)
    pt, _ = best_candidate(am, const_volume(), 0, (10, 10, 1), (0, 1, 0), m=4)
    assert np.allclose(pt, (10, 10, 1))


def test_iam_serialization_round_trip():
    am = _edge_model()
    blob = iam_to_bytes(am)
    back = iam_from_reader(_Reader(blob))
    assert np.array_equal(back.mean, am.mean) and np.array_equal(back.cov, am.cov)
    assert np.array_equal(back.thresholds, am.thresholds)
    assert iam_to_bytes(back) == blob


def test_iam_round_trip_keeps_search_bias():
    am = _edge_model()
    am = replace(am, search_bias=np.linspace(-0.2, 0.2, am.n_landmarks))
    back = iam_from_reader(_Reader(iam_to_bytes(am)))
    assert np.array_equal(back.search_bias, am.search_bias)
    with pytest.raises(DimensionError):
        replace(am, search_bias=np.zeros(am.n_landmarks + 1))
