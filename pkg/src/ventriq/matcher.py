"""Sparse active shape model matching and rasterization of fitted shapes."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .appearance import AppearanceModel, pick_candidate, slice_profiles
from .errors import MatchFailure, NoObservations
from .geometry import Contour, PointSet, SimilarityTransform, Structure, VoxelVolume, apply_transform, fit_similarity
from .mesh import fill_loops, slice_mesh, vertex_normals
from .shape_model import PointDistributionModel, ShapeCoefficients, clamp, instance, project

LABEL_BACKGROUND, LABEL_LV_BLOOD, LABEL_LV_MYO, LABEL_RV_BLOOD = 0, 1, 2, 3


@dataclass(frozen=True)
class MatchConfig:
    max_iters: int = 50
    conv_tol: float = 0.1
    search_m: int = 5
    step: float = 1.0
    sigma: float = 10.0
    clamp_enabled: bool = True
    observe_fraction: float = 0.6
    min_inplane: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.conv_tol > 0 or not self.sigma > 0:
            raise ValueError("conv_tol and sigma must be positive")
        if self.search_m < 1 or not self.step > 0:
            raise ValueError("search_m >= 1 and step > 0 required")

    @classmethod
    def from_config(cls, cfg) -> "MatchConfig":
        return cls(cfg.max_iters, cfg.conv_tol, cfg.search_m, cfg.profile_step, cfg.sigma, cfg.clamp_enabled,
                   cfg.observe_fraction, cfg.min_inplane_normal)


@dataclass(frozen=True, eq=False)
class FittedShape:
    shape: PointSet
    coefficients: ShapeCoefficients
    pose: SimilarityTransform
    iterations_run: int
    converged: bool
    final_displacement: float
    trace: list = field(default_factory=list)  # (iter, mean_disp_mm, observed_count)


def propagate_updates(displacements, weights, mesh, sigma: float, groups=None) -> np.ndarray:
    """Weight-normalized Gaussian-kernel average of sparse displacements over the mesh.

    ``groups`` (e.g. structure labels) restricts the kernel to landmarks of the
    same group. Landmarks whose kernel mass is exactly zero stay put.
    """
    v = np.asarray(displacements, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not np.any(w > 0):
        raise NoObservations("no landmark carries a nonzero weight")
    pts = mesh.points if isinstance(mesh, PointSet) else np.asarray(mesh, dtype=float)
    obs = np.nonzero(w > 0)[0]
    d2 = ((pts[:, None, :] - pts[None, obs, :]) ** 2).sum(axis=2)
    K = np.exp(-d2 / (2.0 * sigma * sigma)) * w[obs]
    if groups is not None:
        g = np.asarray(groups)
        K = K * (g[:, None] == g[None, obs])
    total = K.sum(axis=1)
    out = K @ v[obs]
    np.divide(out, total[:, None], out=out, where=total[:, None] > 0)
    out[total <= 0] = 0.0
    return out


def observe(shape: PointSet, volume: VoxelVolume, iam: AppearanceModel, cfg: MatchConfig):
    """Sparse boundary search: (displacements (N,3), observed mask) for the current shape."""
    normals = vertex_normals(shape.points, shape.triangles)
    sp = slice_profiles(volume, shape.points, normals, iam.k, cfg.step, cfg.search_m,
                        cfg.observe_fraction, cfg.min_inplane)
    obs = sp.observed & (np.linalg.norm(normals, axis=1) > 0)
    d = iam.distances(sp.profiles)
    j = pick_candidate(d, cfg.search_m)
    # in-plane step j*step moves the surface by j*step*|n_xy| along its normal
    mag = j * cfg.step * sp.inplane
    if iam.search_bias is not None:
        mag = mag - iam.search_bias
    disp = np.where(obs[:, None], mag[:, None] * normals, 0.0)
    return disp, obs


def calibrate_search(iam: AppearanceModel, volumes, shapes, cfg: MatchConfig | None = None) -> AppearanceModel:
    """Attach the mean boundary-search offset each landmark shows at its ground-truth position.

    On thin walls the candidate search under noise drifts outward by a
    fraction of a step; subtracting the offset measured on the training
    cases keeps the fitted surfaces unbiased.
    """
    cfg = cfg or MatchConfig()
    raw = replace(iam, search_bias=None)
    shapes = list(shapes)
    total = np.zeros(iam.n_landmarks)
    count = np.zeros(iam.n_landmarks)
    for vol, shape in zip(volumes, shapes):
        disp, obs = observe(shape, vol, raw, cfg)
        normals = vertex_normals(shape.points, shape.triangles)
        total += np.where(obs, (disp * normals).sum(axis=1), 0.0)
        count += obs
    if not count.any():
        return replace(iam, search_bias=np.zeros(iam.n_landmarks))
    # per-landmark means are noisy; the offset varies smoothly over each surface
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    bias = propagate_updates(mean[:, None], count, shapes[0], cfg.sigma, groups=shapes[0].labels)[:, 0]
    return replace(iam, search_bias=bias)


def appearance_cost(shape: PointSet, volume: VoxelVolume, iam: AppearanceModel, cfg: MatchConfig | None = None) -> float:
    """Median Mahalanobis distance of the observed landmark profiles at their current positions."""
    cfg = cfg or MatchConfig()
    normals = vertex_normals(shape.points, shape.triangles)
    sp = slice_profiles(volume, shape.points, normals, iam.k, cfg.step, 0, cfg.observe_fraction, cfg.min_inplane)
    d = iam.distances(sp.profiles)[:, 0]
    return float(np.median(d[sp.observed])) if sp.observed.any() else float("inf")


def _pose_and_shape(pdm: PointDistributionModel, b: np.ndarray, targets: np.ndarray, clamp_enabled: bool):
    pose = fit_similarity(pdm.points(b), targets)
    coeffs = project(pdm, pose.inverse_points(targets))
    if clamp_enabled:
        coeffs = clamp(pdm, coeffs)
    return pose, coeffs


def match(sax: VoxelVolume, pdm: PointDistributionModel, iam: AppearanceModel, init, cfg: MatchConfig | None = None,
          trace_path=None) -> FittedShape:
    """Iterate boundary search, sparse-to-dense propagation, pose refit and shape projection."""
    cfg = cfg or MatchConfig()
    if iam.n_landmarks != pdm.n_landmarks:
        raise MatchFailure(f"appearance model has {iam.n_landmarks} landmarks, shape model {pdm.n_landmarks}")
    b = (init.coefficients.b if init.coefficients is not None and len(init.coefficients) == pdm.n_modes
         else np.zeros(pdm.n_modes))
    pose = init.pose
    shape = apply_transform(pose, instance(pdm, b))
    trace = []
    converged = False
    disp = float("inf")
    it = 0
    for it in range(1, cfg.max_iters + 1):
        dv, obs = observe(shape, sax, iam, cfg)
        try:
            dense = propagate_updates(dv, obs.astype(float), shape, cfg.sigma, groups=shape.labels)
        except NoObservations as e:
            raise MatchFailure(f"iteration {it}: {e}") from e
        targets = shape.points + dense
        pose, coeffs = _pose_and_shape(pdm, b, targets, cfg.clamp_enabled)
        b = coeffs.b
        new = apply_transform(pose, instance(pdm, coeffs))
        disp = float(np.linalg.norm(new.points - shape.points, axis=1).mean())
        shape = new
        trace.append((it, disp, int(obs.sum())))
        if disp <= cfg.conv_tol:
            converged = True
            break
    if trace_path is not None:
        write_trace(trace, trace_path)
    return FittedShape(shape, ShapeCoefficients(b), pose, it, converged, disp, trace)


def write_trace(trace, path) -> None:
    buf = io.StringIO()
    buf.write("iter,mean_disp_mm,observed_count\n")
    for it, d, n in trace:
        buf.write(f"{it},{d:.6f},{n}\n")
    with open(path, "w", encoding="utf-8") as f:
        f.write(buf.getvalue())


# --------------------------------------------------------------------------
# rasterization


STRUCTURE_NAMES = {Structure.LV_endo: "LV_endo", Structure.LV_epi: "LV_epi", Structure.RV_endo: "RV_endo"}


@dataclass(frozen=True, eq=False)
class Rasterization:
    labels: np.ndarray  # (nx, ny, nz) uint8
    contours: list  # Contour per slice/structure loop
    skipped: list  # (slice_index, structure) with a non-watertight cross-section
    clipped: bool  # shape extends beyond the volume
    all_skipped: bool

    def masks(self, structure) -> np.ndarray:
        s = structure if isinstance(structure, str) else STRUCTURE_NAMES[Structure(structure)]
        if s == "LV_endo":
            return self.labels == LABEL_LV_BLOOD
        if s == "LV_epi":
            return (self.labels == LABEL_LV_BLOOD) | (self.labels == LABEL_LV_MYO)
        if s == "LV_myo":
            return self.labels == LABEL_LV_MYO
        if s == "RV_endo":
            return self.labels == LABEL_RV_BLOOD
        raise KeyError(s)

    def slice_contours(self, structure: str, k: int):
        return [c for c in self.contours if c.structure == structure and c.slice_index == k]


def submesh(shape: PointSet, structure) -> tuple:
    """Points and triangles of one labelled surface (triangles entirely inside it)."""
    sel = shape.labels == int(structure)
    tri = shape.triangles[sel[shape.triangles].all(axis=1)]
    return shape.points, tri


def rasterize(shape, volume: VoxelVolume) -> Rasterization:
    """Per-slice even-odd fill of each surface's plane cross-section.

    ``shape`` may be a FittedShape or a PointSet in world coordinates.
    """
    ps = shape.shape if isinstance(shape, FittedShape) else shape
    local = volume.world_to_local(ps.points)
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    ext = np.array([(nx - 1) * sx, (ny - 1) * sy, (nz - 1) * sz])
    clipped = bool(np.any(local < -0.5 * np.array([sx, sy, sz])) or np.any(local > ext + 0.5 * np.array([sx, sy, sz])))
    masks = {s: np.zeros((nx, ny, nz), dtype=bool) for s in STRUCTURE_NAMES}
    contours, skipped = [], []
    touched = 0
    for s, name in STRUCTURE_NAMES.items():
        sel = ps.labels == int(s)
        if not sel.any():
            continue
        tri = ps.triangles[sel[ps.triangles].all(axis=1)]
        for k in range(nz):
            loops, open_chains = slice_mesh(local, tri, k * sz)
            if not loops and not open_chains:
                continue
            touched += 1
            if open_chains:
                skipped.append((k, name))
                continue
            masks[s][:, :, k] = fill_loops(loops, nx, ny, sx, sy)
            contours += [Contour(k, lp, name) for lp in loops if len(lp) >= 3]
    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    epi, endo, rv = masks[Structure.LV_epi], masks[Structure.LV_endo], masks[Structure.RV_endo]
    labels[rv & ~epi] = LABEL_RV_BLOOD
    labels[epi & ~endo] = LABEL_LV_MYO
    labels[endo] = LABEL_LV_BLOOD
    all_skipped = touched == 0 or len(skipped) == touched
    return Rasterization(labels, contours, skipped, clipped, all_skipped)
