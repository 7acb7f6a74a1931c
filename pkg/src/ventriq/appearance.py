"""Intensity appearance model: boundary-normal gray-level profiles and Mahalanobis scoring."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import map_coordinates

from .errors import DegenerateNormal, DimensionError, FormatError, InsufficientData
from .geometry import VoxelVolume

IAM_MAGIC = b"IAM 2\n"


@dataclass(frozen=True, eq=False)
class IntensityProfile:
    samples: np.ndarray  # normalized, length 2k+1
    raw: np.ndarray
    k: int
    step: float

    def __len__(self):
        return self.samples.shape[0]


def normalize_profiles(raw: np.ndarray) -> np.ndarray:
    """Gradient profile divided by its absolute sum (zero vector when the sum is ~0)."""
    raw = np.asarray(raw, dtype=float)
    g = np.gradient(raw, axis=-1)
    s = np.abs(g).sum(axis=-1, keepdims=True)
    return np.divide(g, s, out=np.zeros_like(g), where=s >= 1e-12)


def sample_world(volume: VoxelVolume, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world points; outside samples take the nearest boundary voxel."""
    pts = np.asarray(points, dtype=float)
    idx = volume.world_to_index(pts.reshape(-1, 3))
    out = map_coordinates(volume.values, idx.T, order=1, mode="nearest")
    return out.reshape(pts.shape[:-1])


def sample_profile(volume: VoxelVolume, point, normal, k: int, step: float) -> IntensityProfile:
    n = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateNormal("profile normal has zero length")
    if abs(norm - 1.0) > 1e-6:
        n = n / norm
    j = np.arange(-k, k + 1)
    pts = np.asarray(point, dtype=float) + (j * step)[:, None] * n
    raw = sample_world(volume, pts)
    return IntensityProfile(normalize_profiles(raw), raw, k, step)


@dataclass(frozen=True, eq=False)
class SliceProfiles:
    """Candidate profiles sampled on the nearest SAX slice plane for every landmark.

    ``profiles`` has shape (N, 2m+1, 2k+1); ``observed`` marks landmarks whose
    nearest slice lies within the observation band and whose normal has a
    sufficient in-plane component. A candidate ``j`` corresponds to a world
    displacement ``j * step * inplane[i] * normal[i]``.
    """

    profiles: np.ndarray
    observed: np.ndarray
    inplane: np.ndarray
    slice_index: np.ndarray


def slice_profiles(volume: VoxelVolume, points, normals, k: int, step: float, m: int = 0,
                   observe_fraction: float = 0.6, min_inplane: float = 0.5) -> SliceProfiles:
    P = np.asarray(points, dtype=float)
    q = volume.world_to_local(P)
    n = np.asarray(normals, dtype=float) @ volume.orientation
    sx, sy, sz = volume.spacing
    nz = volume.dims[2]
    kk = np.clip(np.rint(q[:, 2] / sz), 0, nz - 1).astype(int)
    dz = q[:, 2] - kk * sz
    nxy = np.linalg.norm(n[:, :2], axis=1)
    observed = (np.abs(dz) <= observe_fraction * sz) & (nxy >= min_inplane)
    safe = np.where(nxy > 1e-12, nxy, 1.0)
    u = n[:, :2] / safe[:, None]
    # where the tangent plane of the landmark crosses the slice plane
    c = q[:, :2] + (n[:, 2] * dz / safe)[:, None] * u
    offs = np.arange(-(m + k), m + k + 1) * step
    xy = c[:, None, :] + offs[None, :, None] * u[:, None, :]
    coords = np.stack([xy[..., 0] / sx, xy[..., 1] / sy,
                       np.broadcast_to(kk[:, None], xy.shape[:2]).astype(float)], axis=0)
    lines = map_coordinates(volume.values, coords.reshape(3, -1), order=1, mode="nearest")
    lines = lines.reshape(P.shape[0], -1)
    windows = sliding_window_view(lines, 2 * k + 1, axis=1)  # (N, 2m+1, 2k+1)
    return SliceProfiles(normalize_profiles(windows), observed, nxy, kk)


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    mean: np.ndarray  # (N, L)
    cov: np.ndarray  # (N, L, L)
    k: int
    step: float
    thresholds: np.ndarray | None = None  # per-landmark 95th percentile training distance
    search_bias: np.ndarray | None = None  # per-landmark mean search offset at ground truth (mm along the normal)

    def __post_init__(self):
        if self.search_bias is not None and np.shape(self.search_bias) != (self.mean.shape[0],):
            raise DimensionError("search_bias needs one entry per landmark")
        inv = np.linalg.inv(self.cov)
        inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
        object.__setattr__(self, "_inv", inv)

    @property
    def n_landmarks(self) -> int:
        return self.mean.shape[0]

    @property
    def length(self) -> int:
        return self.mean.shape[1]

    @property
    def precision(self) -> np.ndarray:
        return self._inv

    def distances(self, profiles: np.ndarray) -> np.ndarray:
        """Mahalanobis distances for per-landmark profiles of shape (N, ..., L)."""
        d = profiles - self.mean.reshape(self.mean.shape[0], *([1] * (profiles.ndim - 2)), -1)
        return np.einsum("n...i,nij,n...j->n...", d, self._inv, d)


def regularization(cov: np.ndarray) -> float:
    L = cov.shape[-1]
    return max(1e-3 * float(np.trace(cov)) / L, 1e-6)


def iam_from_profiles(profiles: np.ndarray, observed: np.ndarray, labels, k: int, step: float) -> AppearanceModel:
    """Per-landmark mean and regularized covariance from stacked training profiles.

    ``profiles``: (S, N, L); ``observed``: (S, N). Landmarks observed fewer
    than twice borrow the pooled statistics of their structure.
    """
    S, N, L = profiles.shape
    labels = np.asarray(labels)
    mean = np.zeros((N, L))
    cov = np.zeros((N, L, L))
    have = np.zeros(N, dtype=bool)
    for i in range(N):
        g = profiles[observed[:, i], i]
        if g.shape[0] >= 2:
            mean[i] = g.mean(axis=0)
            c = np.cov(g, rowvar=False, ddof=1)
            cov[i] = c + regularization(c) * np.eye(L)
            have[i] = True
    for lab in np.unique(labels):
        idx = np.nonzero((labels == lab) & ~have)[0]
        if idx.size == 0:
            continue
        sel = observed & (labels == lab)[None, :]
        g = profiles[sel]
        if g.shape[0] >= 2:
            m = g.mean(axis=0)
            c = np.cov(g, rowvar=False, ddof=1)
            c = c + regularization(c) * np.eye(L)
        else:
            m, c = np.zeros(L), np.eye(L)
        mean[idx] = m
        cov[idx] = c
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    am = AppearanceModel(mean, cov, k, step)
    d = am.distances(np.swapaxes(profiles, 0, 1)[:, :, None, :])[:, :, 0]  # (N, S)
    thr = np.empty(N)
    for i in range(N):
        obs = d[i][observed[:, i]]
        thr[i] = np.percentile(obs, 95) if obs.size else np.inf
    finite = np.isfinite(thr)
    if finite.any():
        thr[~finite] = np.percentile(thr[finite], 95)
    else:
        thr[:] = float(L)
    return AppearanceModel(mean, cov, k, step, thr)


def train_iam(volumes, shapes, k: int = 4, step: float = 1.0, observe_fraction: float = 0.6,
              min_inplane: float = 0.5) -> AppearanceModel:
    """Train from paired SAX volumes and ground-truth shapes (profiles on the nearest slice plane)."""
    from .mesh import vertex_normals

    volumes, shapes = list(volumes), list(shapes)
    if len(volumes) != len(shapes):
        raise InsufficientData("volumes and shapes must be paired")
    if len(volumes) < 2 * k + 2:
        raise InsufficientData(f"appearance training needs >= {2 * k + 2} pairs, got {len(volumes)}")
    n = len(shapes[0])
    profs, obs = [], []
    for vol, shape in zip(volumes, shapes):
        if len(shape) != n:
            raise DimensionError("training shapes have different landmark counts")
        normals = vertex_normals(shape.points, shape.triangles)
        sp = slice_profiles(vol, shape.points, normals, k, step, 0, observe_fraction, min_inplane)
        profs.append(sp.profiles[:, 0, :])
        obs.append(sp.observed)
    return iam_from_profiles(np.stack(profs), np.stack(obs), shapes[0].labels, k, step)


def mahalanobis(am: AppearanceModel, landmark: int, profile) -> float:
    g = profile.samples if isinstance(profile, IntensityProfile) else np.asarray(profile, dtype=float)
    if g.shape != (am.length,):
        raise DimensionError(f"profile length {g.shape} does not match model length {am.length}")
    d = g - am.mean[landmark]
    return float(max(d @ am.precision[landmark] @ d, 0.0))


def pick_candidate(dist: np.ndarray, m: int) -> np.ndarray:
    """Index offset j in [-m, m] minimizing distance; ties go to smallest |j|, then negative j.

    ``dist`` has candidates on the last axis ordered j = -m..m.
    """
    j = np.arange(-m, m + 1)
    order = np.lexsort((j, np.abs(j)))
    best = np.argmin(dist[..., order], axis=-1)
    return j[order][best]


def best_candidate(am: AppearanceModel, volume: VoxelVolume, landmark: int, point, normal, m: int = 5,
                   step: float | None = None):
    """Search ``j * step * normal`` for j = -m..m; returns (displaced point, best distance)."""
    step = am.step if step is None else step
    n = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateNormal("search normal has zero length")
    n = n / norm
    k = am.k
    offs = np.arange(-(m + k), m + k + 1) * step
    line = sample_world(volume, np.asarray(point, dtype=float) + offs[:, None] * n)
    prof = normalize_profiles(sliding_window_view(line, 2 * k + 1))
    d = am.distances(prof[None])[0]
    j = int(pick_candidate(d, m))
    return np.asarray(point, dtype=float) + j * step * n, float(d[j + m])


# --------------------------------------------------------------------------
# serialization


def iam_to_bytes(am: AppearanceModel) -> bytes:
    buf = io.BytesIO()
    buf.write(IAM_MAGIC)
    buf.write(struct.pack("<IId", am.n_landmarks, am.k, am.step))
    for i in range(am.n_landmarks):
        buf.write(am.mean[i].astype("<f8").tobytes())
        buf.write(am.cov[i].astype("<f8").tobytes())
    thr = am.thresholds if am.thresholds is not None else np.full(am.n_landmarks, np.inf)
    buf.write(thr.astype("<f8").tobytes())
    bias = am.search_bias if am.search_bias is not None else np.zeros(am.n_landmarks)
    buf.write(bias.astype("<f8").tobytes())
    return buf.getvalue()


def iam_from_reader(r) -> AppearanceModel:
    if r.take(len(IAM_MAGIC)) != IAM_MAGIC:
        raise FormatError("not an IAM blob", r.path)
    n, k, step = r.unpack("<IId")
    L = 2 * k + 1
    mean = np.empty((n, L))
    cov = np.empty((n, L, L))
    for i in range(n):
        mean[i] = r.array("<f8", L)
        cov[i] = r.array("<f8", L * L).reshape(L, L)
    thr = r.array("<f8", n)
    bias = r.array("<f8", n)
    return AppearanceModel(mean, cov, k, step, thr, bias)
