"""Segmentation accuracy metrics and population statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateContour, DegenerateVariance, DimensionError, InsufficientData
from .geometry import Contour

RESAMPLE_POINTS = 128
KS_C = {0.10: 1.224, 0.05: 1.358, 0.025: 1.48, 0.01: 1.628, 0.005: 1.731, 0.001: 1.949}


@dataclass(frozen=True)
class MetricTriple:
    structure: str
    dsc: float
    mcd: float
    hd: float
    both_empty: bool = False


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    n: int
    sd: float = 0.0


@dataclass(frozen=True)
class KsResult:
    d_statistic: float
    critical_value: float
    reject: bool
    alpha: float = 0.05


# --------------------------------------------------------------------------
# overlap and contour distances


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1.0."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    s = int(a.sum()) + int(b.sum())
    if s == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / s


def _vertices(c) -> np.ndarray:
    return c.vertices if isinstance(c, Contour) else np.asarray(c, dtype=float).reshape(-1, 2)


def resample_contour(vertices, n: int = RESAMPLE_POINTS) -> np.ndarray:
    """``n`` points evenly spaced in arc length around the closed polygon."""
    v = _vertices(vertices)
    if v.shape[0] < 3:
        raise DegenerateContour(f"contour needs >= 3 vertices, got {v.shape[0]}")
    closed = np.vstack([v, v[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        raise DegenerateContour("contour has zero perimeter")
    t = np.arange(n) * cum[-1] / n
    return np.stack([np.interp(t, cum, closed[:, 0]), np.interp(t, cum, closed[:, 1])], axis=1)


def point_to_polyline(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed polyline through ``poly``."""
    p = np.asarray(points, dtype=float)
    a = np.asarray(poly, dtype=float)
    b = np.roll(a, -1, axis=0)
    ab = b - a
    L2 = (ab ** 2).sum(axis=1)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.divide((ap * ab).sum(axis=2), L2, out=np.zeros((p.shape[0], a.shape[0])), where=L2 > 0), 0, 1)
    d = ap - t[..., None] * ab
    return np.sqrt((d ** 2).sum(axis=2)).min(axis=1)


def _directed(a_pts, b_polys):
    return np.min([point_to_polyline(a_pts, p) for p in b_polys], axis=0)


def _as_list(c):
    # a list of loops, as opposed to a list of (x, y) vertices
    if isinstance(c, (list, tuple)) and c and (isinstance(c[0], Contour) or np.ndim(c[0]) == 2):
        return list(c)
    return [c]


def _loops(c):
    # resampled points are measured against the original polylines, so corner
    # cutting by the resampling does not show up as distance
    return [_vertices(x) for x in _as_list(c)]


def mean_contour_distance(a, b, n: int = RESAMPLE_POINTS) -> float:
    """Symmetrized mean closest-point distance between contours (or lists of loops) after resampling."""
    A, B = _loops(a), _loops(b)
    da = _directed(np.vstack([resample_contour(c, n) for c in A]), B)
    db = _directed(np.vstack([resample_contour(c, n) for c in B]), A)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def hausdorff(a, b, n: int = RESAMPLE_POINTS, point_sets: bool = False) -> float:
    """max of the two directed vertex-to-polyline maxima; ``point_sets`` compares raw points."""
    if point_sets:
        pa = np.vstack([_vertices(c) for c in _as_list(a)])
        pb = np.vstack([_vertices(c) for c in _as_list(b)])
        d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
        return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
    A, B = _loops(a), _loops(b)
    ra = np.vstack([resample_contour(c, n) for c in A])
    rb = np.vstack([resample_contour(c, n) for c in B])
    return float(max(_directed(ra, B).max(), _directed(rb, A).max()))


def structure_metrics(ra, rb, structure: str) -> MetricTriple:
    """DSC over the 3D masks, MCD averaged and HD maximized over slices where both have contours.

    ``LV_myo`` contour metrics combine the endo- and epicardial boundaries
    (mean of their MCDs, max of their HDs).
    """
    ma, mb = ra.masks(structure), rb.masks(structure)
    dsc = dice(ma, mb)
    both_empty = not ma.any() and not mb.any()
    names = ("LV_endo", "LV_epi") if structure == "LV_myo" else (structure,)
    mcds, hds = [], []
    for name in names:
        sa = {}
        for c in ra.contours:
            if c.structure == name:
                sa.setdefault(c.slice_index, []).append(c)
        sb = {}
        for c in rb.contours:
            if c.structure == name:
                sb.setdefault(c.slice_index, []).append(c)
        for k in sorted(set(sa) & set(sb)):
            try:
                mcds.append(mean_contour_distance(sa[k], sb[k]))
                hds.append(hausdorff(sa[k], sb[k]))
            except DegenerateContour:
                continue
    mcd = float(np.mean(mcds)) if mcds else float("nan")
    hd = float(np.max(hds)) if hds else float("nan")
    return MetricTriple(structure, dsc, mcd, hd, both_empty)


# --------------------------------------------------------------------------
# population statistics


def _pairs(pairs):
    p = np.asarray(pairs, dtype=float).reshape(-1, 2)
    return p[:, 0], p[:, 1]


def bland_altman(pairs) -> BlandAltman:
    """Differences auto - manual for (manual, auto) pairs; limits bias +- 1.96 sample sd."""
    manual, auto = _pairs(pairs)
    n = manual.shape[0]
    if n < 2:
        raise InsufficientData("Bland-Altman needs at least 2 pairs")
    d = auto - manual
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, n, sd)


def pearson_corr(pairs) -> float:
    x, y = _pairs(pairs)
    if x.shape[0] < 2:
        raise InsufficientData("correlation needs at least 2 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise DegenerateVariance("zero variance in one coordinate")
    return float(np.clip(dx @ dy / (sx * sy), -1.0, 1.0))


def ks_critical(alpha: float, n: int, m: int) -> float:
    """Asymptotic two-sample critical value c(alpha) * sqrt((n+m)/(n m))."""
    c = KS_C.get(alpha, math.sqrt(-0.5 * math.log(alpha / 2.0)))
    return c * math.sqrt((n + m) / (n * m))


def ks_two_sample(a, b, alpha: float = 0.05) -> KsResult:
    a = np.sort(np.asarray(a, dtype=float).reshape(-1))
    b = np.sort(np.asarray(b, dtype=float).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise InsufficientData("K-S test needs two non-empty samples")
    x = np.concatenate([a, b])
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    crit = ks_critical(alpha, a.size, b.size)
    return KsResult(d, crit, d > crit, alpha)


def reference_ranges(records) -> dict:
    """Per-index (mean, sample sd, n) over IndexRecords or index-row dicts."""
    from .quantify import INDEX_NAMES

    rows = [r.as_row() if hasattr(r, "as_row") else r for r in records]
    if len(rows) < 2:
        raise InsufficientData("reference ranges need at least 2 records")
    out = {}
    for name in INDEX_NAMES:
        v = np.array([float(r[name]) for r in rows])
        out[name] = (float(v.mean()), float(v.std(ddof=1)), int(v.size))
    return out
