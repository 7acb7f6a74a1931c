"""Point distribution model: generalized Procrustes alignment, PCA, synthesis and projection."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorrespondenceError, DimensionError, FormatError, InsufficientData, InsufficientVariance
from .geometry import PointSet, Structure, fit_similarity
from .mesh import boundary_vertices

PDM_MAGIC = b"PDM 1\n"
ANCHOR_MAGIC = b"ANC 1\n"


def _center_scale(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)
    return x / np.sqrt((x ** 2).sum())


def procrustes_align(shapes, tol=1e-7, max_iter=100):
    """Generalized Procrustes analysis.

    Every shape is similarity-aligned to an evolving consensus mean, which is
    re-centred and re-normalized to unit centroid size after each sweep.
    Returns ``(aligned shapes, consensus mean)`` as PointSets.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise InsufficientData("Procrustes alignment needs at least 2 shapes")
    n = len(shapes[0])
    if any(len(s) != n for s in shapes):
        raise CorrespondenceError("shapes have different landmark counts")
    X = [_center_scale(s.points) for s in shapes]
    mean = X[0].copy()
    aligned = X
    for _ in range(max_iter):
        aligned = []
        for x in X:
            t = fit_similarity(x, mean)
            aligned.append(t.apply_points(x))
        new_mean = _center_scale(np.mean(aligned, axis=0))
        # keep the reference orientation from drifting
        r = fit_similarity(new_mean, mean)
        new_mean = _center_scale(r.apply_points(new_mean))
        moved = np.sqrt(((new_mean - mean) ** 2).sum(axis=1).mean())
        mean = new_mean
        if moved < tol:
            break
    aligned = [fit_similarity(x, mean).apply_points(x) for x in X]
    ref = shapes[0]
    return [ref.with_points(a) for a in aligned], ref.with_points(mean)


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if not np.all(np.isfinite(b)):
            raise ValueError("shape coefficients must be finite")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    def __len__(self):
        return self.b.shape[0]


@dataclass(frozen=True)
class AnchorIndices:
    """Landmark groups whose centroids define the model's apex, mitral and RV anchors."""

    apex: tuple
    mitral: tuple
    rv: tuple

    def points(self, pts: np.ndarray) -> np.ndarray:
        return np.stack([pts[list(g)].mean(axis=0) for g in (self.apex, self.mitral, self.rv)])


@dataclass(frozen=True, eq=False)
class PointDistributionModel:
    mean: np.ndarray  # (3N,)
    modes: np.ndarray  # (3N, t)
    variances: np.ndarray  # (t,)
    variance_fraction: float
    labels: np.ndarray
    triangles: np.ndarray
    total_variance: float = 0.0
    anchors: AnchorIndices | None = field(default=None)

    @property
    def n_landmarks(self) -> int:
        return self.mean.shape[0] // 3

    @property
    def n_modes(self) -> int:
        return self.variances.shape[0]

    @property
    def mean_shape(self) -> PointSet:
        return PointSet(self.mean.reshape(-1, 3), self.labels, self.triangles)

    def points(self, b) -> np.ndarray:
        b = b.b if isinstance(b, ShapeCoefficients) else np.asarray(b, dtype=float)
        return (self.mean + self.modes @ b).reshape(-1, 3)


def train_pdm(aligned, variance_fraction: float = 0.95) -> PointDistributionModel:
    """PCA of aligned shapes keeping the fewest modes reaching ``variance_fraction``."""
    aligned = list(aligned)
    if len(aligned) < 2:
        raise InsufficientData("PDM training needs at least 2 shapes")
    if not 0 < variance_fraction <= 1:
        raise ValueError("variance_fraction must lie in (0, 1]")
    X = np.stack([s.points.reshape(-1) for s in aligned])  # (s, 3N)
    s, d = X.shape
    mean = X.mean(axis=0)
    D = X - mean
    if d > s:
        # eigenvectors of the small Gram matrix share the covariance spectrum
        G = D @ D.T / (s - 1)
        lam, V = np.linalg.eigh(G)
        lam, V = lam[::-1], V[:, ::-1]
        keep = lam > max(lam[0], 0) * 1e-12
        lam, V = lam[keep], V[:, keep]
        modes = D.T @ V / np.sqrt(lam * (s - 1))
    else:
        C = D.T @ D / (s - 1)
        lam, modes = np.linalg.eigh(C)
        lam, modes = lam[::-1], modes[:, ::-1]
        keep = lam > max(lam[0], 0) * 1e-12
        lam, modes = lam[keep], modes[:, keep]
    total = float(lam.sum()) if lam.size else 0.0
    # rounding in the mean leaves ~eps^2 variance even for identical shapes
    floor = d * (64 * np.finfo(float).eps * max(float(np.abs(X).max()), 1.0)) ** 2
    if lam.size == 0 or total <= floor:
        raise InsufficientVariance("training shapes have zero variance")
    frac = np.cumsum(lam) / total
    t = int(np.searchsorted(frac, variance_fraction - 1e-12) + 1)
    t = min(t, lam.size, s - 1)
    # re-orthonormalize to machine precision
    q, r = np.linalg.qr(modes[:, :t])
    q = q * np.sign(np.diag(r))
    ref = aligned[0]
    pdm = PointDistributionModel(
        mean=mean, modes=q, variances=lam[:t].copy(), variance_fraction=variance_fraction,
        labels=ref.labels, triangles=ref.triangles, total_variance=total,
    )
    for a in (pdm.mean, pdm.modes, pdm.variances):
        a.setflags(write=False)
    return pdm


def instance(pdm: PointDistributionModel, coeffs) -> PointSet:
    b = coeffs.b if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs, dtype=float)
    if b.shape != (pdm.n_modes,):
        raise DimensionError(f"expected {pdm.n_modes} coefficients, got {b.shape[0] if b.ndim else 0}")
    return PointSet(pdm.points(b), pdm.labels, pdm.triangles)


def project(pdm: PointDistributionModel, shape) -> ShapeCoefficients:
    x = shape.points if isinstance(shape, PointSet) else np.asarray(shape, dtype=float)
    x = x.reshape(-1)
    if x.shape[0] != pdm.mean.shape[0]:
        raise DimensionError(f"shape has {x.shape[0] // 3} landmarks, model has {pdm.n_landmarks}")
    return ShapeCoefficients(pdm.modes.T @ (x - pdm.mean))


def clamp(pdm: PointDistributionModel, coeffs, k: float = 3.0) -> ShapeCoefficients:
    b = coeffs.b if isinstance(coeffs, ShapeCoefficients) else np.asarray(coeffs, dtype=float)
    lim = k * np.sqrt(pdm.variances)
    return ShapeCoefficients(np.clip(b, -lim, lim))


def reconstruction_rms(pdm: PointDistributionModel, shape: PointSet) -> float:
    rec = instance(pdm, project(pdm, shape)).points
    return float(np.sqrt(((rec - shape.points) ** 2).sum(axis=1).mean()))


# --------------------------------------------------------------------------
# anchor landmarks


def find_anchor_indices(mean: PointSet) -> AnchorIndices:
    """Designate the apex, mitral (base ring) and mid-RV ring landmark groups on a mean shape.

    The LV endocardial border (open base) defines the mitral ring; the apex is
    the endocardial landmark farthest from the ring centroid; the RV group is
    the RV ring whose depth along the long axis is closest to mid-ventricle.
    """
    pts = mean.points
    tri = mean.triangles
    endo = np.nonzero(mean.labels == int(Structure.LV_endo))[0]
    rv = np.nonzero(mean.labels == int(Structure.RV_endo))[0]
    if endo.size == 0 or rv.size == 0:
        raise InsufficientData("mean shape lacks LV endocardial or RV landmarks")
    endo_set = set(endo.tolist())
    endo_tri = tri[np.isin(tri, endo).all(axis=1)]
    ring = [int(i) for i in boundary_vertices(endo_tri) if int(i) in endo_set]
    mitral = pts[ring].mean(axis=0)
    apex = int(endo[np.argmax(np.linalg.norm(pts[endo] - mitral, axis=1))])
    axis = pts[apex] - mitral
    length = np.linalg.norm(axis)
    axis = axis / length
    # RV rings: group RV landmarks by their depth rank (rings share depth in the parametric grid)
    depth = (pts[rv] - mitral) @ axis / length
    rv_tri = tri[np.isin(tri, rv).all(axis=1)]
    rv_ring0 = set(boundary_vertices(rv_tri).tolist())
    n_per_ring = len(rv_ring0) if rv_ring0 else 1
    order = rv[np.argsort(depth, kind="stable")]
    rings = [order[i:i + n_per_ring] for i in range(0, len(order), n_per_ring)]
    ring_depth = [((pts[r] - mitral) @ axis / length).mean() for r in rings]
    best = rings[int(np.argmin(np.abs(np.array(ring_depth) - 0.5)))]
    return AnchorIndices((apex,), tuple(sorted(ring)), tuple(sorted(int(i) for i in best)))


def with_anchors(pdm: PointDistributionModel) -> PointDistributionModel:
    from dataclasses import replace
    return replace(pdm, anchors=find_anchor_indices(pdm.mean_shape))


# --------------------------------------------------------------------------
# serialization


def _write_indices(buf, idx):
    buf.write(struct.pack("<I", len(idx)))
    buf.write(np.asarray(idx, dtype="<u4").tobytes())


def pdm_to_bytes(pdm: PointDistributionModel) -> bytes:
    buf = io.BytesIO()
    n, t = pdm.n_landmarks, pdm.n_modes
    buf.write(PDM_MAGIC)
    buf.write(struct.pack("<II", n, t))
    buf.write(pdm.mean.astype("<f8").tobytes())
    buf.write(pdm.variances.astype("<f8").tobytes())
    buf.write(np.ascontiguousarray(pdm.modes).astype("<f8").tobytes())
    buf.write(struct.pack("<dd", pdm.variance_fraction, pdm.total_variance))
    buf.write(pdm.labels.astype("u1").tobytes())
    buf.write(struct.pack("<I", pdm.triangles.shape[0]))
    buf.write(pdm.triangles.astype("<u4").tobytes())
    if pdm.anchors is not None:
        buf.write(ANCHOR_MAGIC)
        for g in (pdm.anchors.apex, pdm.anchors.mitral, pdm.anchors.rv):
            _write_indices(buf, g)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path=None):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated model file", self.path)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def peek(self, n):
        return self.data[self.pos:self.pos + n]


def pdm_from_reader(r: _Reader) -> PointDistributionModel:
    if r.take(len(PDM_MAGIC)) != PDM_MAGIC:
        raise FormatError("not a PDM blob", r.path)
    n, t = r.unpack("<II")
    mean = r.array("<f8", 3 * n)
    lam = r.array("<f8", t)
    modes = r.array("<f8", 3 * n * t).reshape(3 * n, t)
    vf, total = r.unpack("<dd")
    labels = r.array("u1", n).astype(np.int64)
    (nt,) = r.unpack("<I")
    tri = r.array("<u4", 3 * nt).reshape(nt, 3).astype(np.int64)
    anchors = None
    if r.peek(len(ANCHOR_MAGIC)) == ANCHOR_MAGIC:
        r.take(len(ANCHOR_MAGIC))
        groups = []
        for _ in range(3):
            (k,) = r.unpack("<I")
            groups.append(tuple(int(i) for i in r.array("<u4", k)))
        anchors = AnchorIndices(*groups)
    return PointDistributionModel(mean, modes, lam, vf, labels, tri, total, anchors)


def pdm_from_bytes(data: bytes, path=None) -> PointDistributionModel:
    return pdm_from_reader(_Reader(data, path))
