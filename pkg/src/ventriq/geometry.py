"""Voxel grids, landmark point sets, planar contours and similarity transforms."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateContour, DegenerateFit

ORTHO_TOL = 1e-6


class View(str, enum.Enum):
    SAX = "SAX"
    LAX = "LAX"


class Structure(enum.IntEnum):
    LV_endo = 0
    LV_epi = 1
    RV_endo = 2


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """3D scalar grid with physical geometry.

    ``data`` is indexed ``[x, y, z]``. ``orientation`` holds the direction
    cosines of the index axes as columns, so a voxel index maps to
    ``origin + orientation @ (index * spacing)``.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    orientation: np.ndarray
    data: np.ndarray
    phase: int = 0
    view: View = View.SAX
    subject: str = ""
    series: str = ""

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        R = np.asarray(self.orientation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("orientation columns are not orthonormal")
        data = np.asarray(self.data)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"data length {data.size} does not match dims {dims}")
        data = data.reshape(dims)
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "orientation", _frozen(R))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view", View(self.view))

    @cached_property
    def values(self) -> np.ndarray:
        """Intensities as float64 (cached)."""
        v = self.data.astype(np.float64)
        v.setflags(write=False)
        return v

    @property
    def normal(self) -> np.ndarray:
        return self.orientation[:, 2]

    def world_to_local(self, points) -> np.ndarray:
        """World mm -> volume frame mm (axes along index directions, origin at voxel 0)."""
        p = np.asarray(points, dtype=float) - np.asarray(self.origin)
        return p @ self.orientation

    def local_to_world(self, local) -> np.ndarray:
        return np.asarray(local, dtype=float) @ self.orientation.T + np.asarray(self.origin)

    def world_to_index(self, points) -> np.ndarray:
        return self.world_to_local(points) / np.asarray(self.spacing)

    def slice_z(self, k: int) -> float:
        """Local z (mm) of slice plane ``k``."""
        return k * self.spacing[2]


def voxel_to_world(volume: VoxelVolume, index) -> np.ndarray:
    idx = np.asarray(index)
    if idx.shape != (3,):
        raise IndexError(f"voxel index must be a triple, got {index}")
    for i, n in zip(idx, volume.dims):
        if not 0 <= i < n:
            raise IndexError(f"voxel index {tuple(int(v) for v in idx)} outside dims {volume.dims}")
    return np.asarray(volume.origin) + volume.orientation @ (idx * np.asarray(volume.spacing))


@dataclass(frozen=True, eq=False)
class PointSet:
    """Ordered landmarks with per-point structure labels and shared triangle topology."""

    points: np.ndarray
    labels: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != pts.shape[0]:
            raise ValueError("labels length must equal point count")
        tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tri.size and (tri.min() < 0 or tri.max() >= pts.shape[0]):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "labels", _frozen(labels, np.int64))
        object.__setattr__(self, "triangles", _frozen(tri, np.int64))

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points) -> "PointSet":
        return PointSet(points, self.labels, self.triangles)

    def structure_mask(self, structure) -> np.ndarray:
        return self.labels == int(structure)


@dataclass(frozen=True, eq=False)
class Contour:
    """Closed planar polygon in slice-plane coordinates (mm)."""

    slice_index: int
    vertices: np.ndarray
    structure: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "vertices", _frozen(v))


def polygon_area(contour) -> float:
    """Absolute shoelace area in mm^2."""
    v = contour.vertices if isinstance(contour, Contour) else np.asarray(contour, dtype=float)
    if v.shape[0] < 3:
        raise DegenerateContour(f"polygon needs >= 3 vertices, got {v.shape[0]}")
    x, y = v[:, 0], v[:, 1]
    # shifted to the first vertex to limit cancellation
    x = x - x[0]
    y = y - y[0]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def is_simple_polygon(vertices) -> bool:
    """Pairwise segment test for self-intersection of a closed polygon."""
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    a, b = v, np.roll(v, -1, axis=0)

    def orient(p, q, r):
        return np.sign((q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1])
                       - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0]))

    for i in range(n):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        o1 = orient(a[i], b[i], a[j])
        o2 = orient(a[i], b[i], b[j])
        o3 = orient(a[j], b[j], a[i])
        o4 = orient(a[j], b[j], b[i])
        if np.any((o1 * o2 < 0) & (o3 * o4 < 0)):
            return False
    return True


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    residual: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation, dtype=float).reshape(3)))

    def apply_points(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse_points(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float) - self.translation
        return (p @ self.rotation) / self.scale

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )


def _as_points(s) -> np.ndarray:
    return s.points if isinstance(s, PointSet) else np.asarray(s, dtype=float).reshape(-1, 3)


def fit_similarity(src, dst) -> SimilarityTransform:
    """Closed-form least-squares similarity (Umeyama) mapping ``src`` onto ``dst``.

    The sum of squared residuals is returned in ``.residual``.
    """
    a, b = _as_points(src), _as_points(dst)
    if a.shape != b.shape:
        raise DegenerateFit(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise DegenerateFit("similarity fit needs at least 3 points")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    A, B = a - mu_a, b - mu_b
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateFit("source points are collinear or coincident")
    cov = B.T @ A / a.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = (U * d) @ Vt
    var_a = (A ** 2).sum() / a.shape[0]
    scale = float((S * d).sum() / var_a)
    if scale <= 0:
        raise DegenerateFit("non-positive scale; configurations are degenerate")
    t = mu_b - scale * R @ mu_a
    resid = b - (scale * a @ R.T + t)
    return SimilarityTransform(scale, R, t, residual=float((resid ** 2).sum()))


def apply_transform(t: SimilarityTransform, s: PointSet) -> PointSet:
    return s.with_points(t.apply_points(s.points))


def rotation_about(axis, angle) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rms(a, b) -> float:
    """Root-mean-square point distance."""
    return float(np.sqrt(((_as_points(a) - _as_points(b)) ** 2).sum(axis=1).mean()))
