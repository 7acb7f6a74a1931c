"""Organ detection and model initialisation.

Anchors (LV apex, mitral centre, RV) are located geometrically: the long-axis
line comes from the intersection of the LAX planes, the LV blood pool is the
bright Otsu blob around that line on every SAX slice, and the apex/mitral
positions along the axis are refined on the LAX images.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.ndimage import map_coordinates
from skimage.filters import threshold_otsu

from .errors import DetectionFailure, MissingView
from .geometry import PointSet, SimilarityTransform, VoxelVolume, apply_transform, fit_similarity
from .shape_model import PointDistributionModel, ShapeCoefficients, instance

MIN_BLOB_MM2 = 40.0
MIN_SEPARATION = 4.0  # Otsu class-mean gap in units of within-class sd
LV_SNAP_MM = 25.0
RV_RADIUS_MM = 100.0


class InitSource(str, enum.Enum):
    anchors = "anchors"
    previous_phase = "previous_phase"


@dataclass(frozen=True, eq=False)
class AnchorLandmarks:
    lv_apex: np.ndarray
    mitral_center: np.ndarray
    rv_insertion: np.ndarray
    confidence: np.ndarray = field(default_factory=lambda: np.ones(3))
    # detection diagnostics, used by the image quality features
    slice_areas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slice_positions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    contrast: float = 0.0
    lax_refined: bool = False

    def __post_init__(self):
        for name in ("lv_apex", "mitral_center", "rv_insertion", "confidence"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.linalg.norm(self.lv_apex - self.mitral_center) <= 0:
            raise DetectionFailure("apex and mitral centre coincide")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise ValueError("confidence must lie in [0, 1]")

    def points(self) -> np.ndarray:
        return np.stack([self.lv_apex, self.mitral_center, self.rv_insertion])

    @property
    def axis_length(self) -> float:
        return float(np.linalg.norm(self.lv_apex - self.mitral_center))

    @property
    def mitral_s(self) -> float:
        """Axis coordinate of the mitral centre (slice positions use the same origin)."""
        return float(self._axis_coord(self.mitral_center))

    @property
    def apex_s(self) -> float:
        return float(self._axis_coord(self.lv_apex))

    def _axis_coord(self, p):
        d = (self.lv_apex - self.mitral_center) / self.axis_length
        return (np.asarray(p) - self.mitral_center) @ d


@dataclass(frozen=True, eq=False)
class Initialization:
    pose: SimilarityTransform
    shape: PointSet
    source: InitSource
    coefficients: ShapeCoefficients | None = None
    note: str = ""


# --------------------------------------------------------------------------
# detection


def _axis_line(sax: VoxelVolume, lax: list):
    """Rough long axis (point, unit direction) from the LAX planes."""
    fov = sax.local_to_world(0.5 * (np.asarray(sax.dims) - 1) * np.asarray(sax.spacing))
    planes = [(v.normal, np.asarray(v.origin, dtype=float)) for v in lax]
    if len(planes) >= 2:
        (n1, o1), (n2, o2) = planes[0], planes[1]
        d = np.cross(n1, n2)
        if np.linalg.norm(d) > 1e-3:
            d = d / np.linalg.norm(d)
            A = np.stack([n1, n2, d])
            p = np.linalg.solve(A, [n1 @ o1, n2 @ o2, d @ fov])
            if d @ sax.normal < 0:
                d = -d
            return p, d
    # single plane: the in-plane direction closest to the stack normal through the FOV centre
    n, o = planes[0]
    d = sax.normal - (sax.normal @ n) * n
    if np.linalg.norm(d) < 1e-6:
        raise MissingView("LAX plane is parallel to the SAX slices")
    d = d / np.linalg.norm(d)
    p = fov - ((fov - o) @ n) * n
    return p, d


def _line_plane(p, d, q, n):
    den = d @ n
    if abs(den) < 1e-9:
        return None
    return p + ((q - p) @ n / den) * d


def _otsu_split(x: np.ndarray):
    thr = float(threshold_otsu(x))
    lo, hi = x[x <= thr], x[x > thr]
    if lo.size < 2 or hi.size < 2:
        return thr, 0.0, 0.0
    sd = np.sqrt(0.5 * (lo.var() + hi.var()))
    sep = (hi.mean() - lo.mean()) / max(sd, 1e-9)
    return thr, float(sep), float(hi.mean())


def _run_bounds(values: np.ndarray, s: np.ndarray, thr: float, s0: float):
    """Extent of the above-threshold run containing ``s0`` with linear sub-sample crossings."""
    above = values > thr
    i0 = int(np.argmin(np.abs(s - s0)))
    if not above[i0]:
        return None
    lo = i0
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = i0
    while hi < len(s) - 1 and above[hi + 1]:
        hi += 1
    if lo == 0 or hi == len(s) - 1:
        return None  # run leaves the sampled range

    def cross(a, b):
        va, vb = values[a], values[b]
        t = (thr - va) / (vb - va) if vb != va else 0.5
        return s[a] + t * (s[b] - s[a])

    return cross(lo - 1, lo), cross(hi, hi + 1)


def detect_anchors(sax, lax, search_radius: float = 60.0) -> AnchorLandmarks:
    """Locate apex, mitral centre and RV anchor from one SAX stack and its LAX views."""
    if isinstance(sax, (list, tuple)):
        if not sax:
            raise MissingView("no SAX volume")
        sax = sax[0]
    lax = [v for v in (lax or []) if v is not None]
    if not lax:
        raise MissingView("no LAX volume with orientation metadata")
    p0, d = _axis_line(sax, lax)
    R = sax.orientation
    nx, ny, nz = sax.dims
    sx, sy, sz = sax.spacing
    img = sax.values
    gx, gy = np.meshgrid(np.arange(nx) * sx, np.arange(ny) * sy, indexing="ij")

    centres = []
    for k in range(nz):
        c = _line_plane(p0, d, sax.local_to_world([0.0, 0.0, k * sz]), sax.normal)
        if c is None:
            raise DetectionFailure("long axis is parallel to the SAX slices")
        centres.append(sax.world_to_local(c)[:2])
    centres = np.array(centres)

    disks = [(gx - cx) ** 2 + (gy - cy) ** 2 <= search_radius ** 2 for cx, cy in centres]
    pooled = np.concatenate([img[:, :, k][disks[k]] for k in range(nz)])
    if pooled.size < 10 or np.ptp(pooled) == 0:
        raise DetectionFailure("no intensity structure around the long axis")
    thr, sep, _ = _otsu_split(pooled)
    if sep < MIN_SEPARATION:
        raise DetectionFailure(f"no bright blob: class separation {sep:.2f} below {MIN_SEPARATION}")

    pix = sx * sy
    areas = np.zeros(nz)
    cents = np.full((nz, 2), np.nan)
    means = np.zeros(nz)
    lv_labels = [None] * nz
    for k in range(nz):
        bw = (img[:, :, k] > thr) & disks[k]
        lab, n = ndimage.label(bw)
        if n == 0:
            continue
        sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1)) * pix
        cx, cy = centres[k]
        i, j = int(round(cx / sx)), int(round(cy / sy))
        pick = 0
        if 0 <= i < nx and 0 <= j < ny and lab[i, j] > 0 and sizes[lab[i, j] - 1] >= MIN_BLOB_MM2:
            pick = lab[i, j]
        else:
            com = np.array(ndimage.center_of_mass(bw, lab, np.arange(1, n + 1))) * (sx, sy)
            dist = np.linalg.norm(com - centres[k], axis=1)
            ok = (sizes >= MIN_BLOB_MM2) & (dist <= LV_SNAP_MM)
            if ok.any():
                pick = int(np.arange(1, n + 1)[ok][np.argmin(dist[ok])])
        if pick == 0:
            continue
        m = lab == pick
        w = img[:, :, k][m]
        areas[k] = m.sum() * pix
        cents[k] = (np.sum(gx[m] * w) / w.sum(), np.sum(gy[m] * w) / w.sum())
        means[k] = w.mean()
        lv_labels[k] = (lab, pick)
    hit = np.nonzero(areas > 0)[0]
    if hit.size < 2:
        raise DetectionFailure("LV blood pool found on fewer than 2 slices")

    # refined axis: least-squares line through the blob centroids
    zk = hit * sz
    if hit.size >= 3:
        A = np.stack([np.ones_like(zk), zk], axis=1)
        coef, *_ = np.linalg.lstsq(A, cents[hit], rcond=None)
        a_xy, b_xy = coef[0], coef[1]
    else:
        a_xy, b_xy = cents[hit].mean(axis=0), np.zeros(2)
    p_loc = np.array([a_xy[0], a_xy[1], 0.0])
    d_loc = np.array([b_xy[0], b_xy[1], 1.0])
    d_loc /= np.linalg.norm(d_loc)
    p_ax = sax.local_to_world(p_loc)
    d_ax = R @ d_loc
    slice_s = (np.array([sax.local_to_world([0.0, 0.0, k * sz]) for k in range(nz)]) - p_ax) @ sax.normal / (
        d_ax @ sax.normal)

    # blood-pool extent along the axis on the LAX images
    big = int(hit[np.argmax(areas[hit])])
    s0 = slice_s[big]
    span = np.arange(slice_s[0] - 60.0, slice_s[-1] + 60.0, 0.5)
    ends = []
    for v in lax:
        pts = p_ax + span[:, None] * d_ax
        loc = v.world_to_local(pts)
        if np.max(np.abs(loc[:, 2])) > 0.5 * max(v.spacing[2], 4.0):
            continue  # the axis leaves this LAX plane
        idx = loc / np.asarray(v.spacing)
        vals = map_coordinates(v.values, idx.T, order=1, mode="nearest")
        inside = (idx[:, 0] >= 0) & (idx[:, 0] <= v.dims[0] - 1) & (idx[:, 1] >= 0) & (idx[:, 1] <= v.dims[1] - 1)
        vals = np.where(inside, vals, 0.0)
        rb = _run_bounds(vals, span, thr, s0)
        if rb is not None:
            ends.append(rb)
    if ends:
        lo, hi = np.mean(ends, axis=0)
        refined = True
    else:
        lo, hi = slice_s[hit[0]], slice_s[hit[-1]]
        refined = False
    # the base is the end nearer the area-weighted blob position (cross-sections shrink towards the apex)
    s_bar = float(np.sum(areas[hit] * slice_s[hit]) / areas[hit].sum())
    if abs(s_bar - lo) <= abs(hi - s_bar):
        s_mitral, s_apex = lo, hi
    else:
        s_mitral, s_apex = hi, lo
    mitral = p_ax + s_mitral * d_ax
    apex = p_ax + s_apex * d_ax

    # RV: largest other bright blob on the slice nearest mid-ventricle
    s_mid = 0.5 * (s_mitral + s_apex)
    km = int(np.argmin(np.abs(slice_s - s_mid)))
    if lv_labels[km] is None:
        km = int(hit[np.argmin(np.abs(slice_s[hit] - s_mid))])
    c_mid = sax.world_to_local(p_ax + slice_s[km] * d_ax)[:2]
    wide = ((gx - c_mid[0]) ** 2 + (gy - c_mid[1]) ** 2 <= RV_RADIUS_MM ** 2) & (img[:, :, km] > thr)
    lab_lv, pick = lv_labels[km]
    wide &= lab_lv != pick
    lab, n = ndimage.label(wide)
    if n == 0:
        raise DetectionFailure("no RV blood pool on the mid-ventricular slice")
    sizes = ndimage.sum_labels(np.ones_like(lab), lab, index=np.arange(1, n + 1)) * pix
    r = int(np.argmax(sizes)) + 1
    if sizes[r - 1] < MIN_BLOB_MM2:
        raise DetectionFailure("RV blood pool too small")
    m = lab == r
    w = img[:, :, km][m]
    rv_xy = (np.sum(gx[m] * w) / w.sum(), np.sum(gy[m] * w) / w.sum())
    rv = sax.local_to_world([rv_xy[0], rv_xy[1], km * sz])

    bg = pooled[pooled <= thr].mean()
    lv_contrast = float(np.clip((means[hit].mean() - bg) / max(means[hit].mean(), 1e-9), 0, 1))
    rv_contrast = float(np.clip((w.mean() - bg) / max(w.mean(), 1e-9), 0, 1))
    conf_axis = lv_contrast if refined else 0.5 * lv_contrast
    return AnchorLandmarks(apex, mitral, rv, np.array([conf_axis, conf_axis, rv_contrast]),
                           slice_areas=areas, slice_positions=slice_s - s_mitral if s_apex > s_mitral
                           else s_mitral - slice_s, contrast=sep, lax_refined=refined)


# --------------------------------------------------------------------------
# pose


def model_anchor_points(pdm: PointDistributionModel) -> np.ndarray:
    if pdm.anchors is None:
        raise ValueError("shape model has no designated anchor landmarks")
    return pdm.anchors.points(pdm.mean.reshape(-1, 3))


def initialize_pose(anchors: AnchorLandmarks, pdm: PointDistributionModel) -> Initialization:
    """Similarity from the model's anchor landmarks to the detected anchors, applied to the mean shape."""
    pose = fit_similarity(model_anchor_points(pdm), anchors.points())
    b = ShapeCoefficients(np.zeros(pdm.n_modes))
    return Initialization(pose, apply_transform(pose, instance(pdm, b)), InitSource.anchors, b)


def propagate_timepoint(previous, anchors: AnchorLandmarks | None = None,
                        pdm: PointDistributionModel | None = None) -> Initialization:
    """Start the next phase from the previous fit; a non-converged previous fit falls back to anchors."""
    if previous is not None and previous.converged:
        return Initialization(previous.pose, previous.shape, InitSource.previous_phase, previous.coefficients)
    if anchors is None or pdm is None:
        raise ValueError("previous phase failed and no anchors were supplied for the fallback")
    init = initialize_pose(anchors, pdm)
    note = "no previous phase" if previous is None else "previous phase did not converge"
    return Initialization(init.pose, init.shape, init.source, init.coefficients, note)
