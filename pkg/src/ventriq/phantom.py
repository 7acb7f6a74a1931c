"""Synthetic bi-ventricular phantom cohorts with analytically known ground truth.

Each heart is described in a local frame (u, v, w): ``w`` is the long axis
running from the base plane (w = 0) toward the apex, ``u`` points from the
LV toward the RV. The LV endo- and epicardium are half-ellipsoids cut at the
base plane; the RV endocardium is a half-ellipsoid additionally cut by the
plane ``u = u_cut`` on the septal side, surrounded by a thin myocardial shell.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .config import parse_kv_text
from .errors import SpecError
from .geometry import Contour, PointSet, Structure, View, VoxelVolume
from .io import (gt_filename, manifest_from_rows, relative_manifest,
                 save_pointset, save_volume, volume_filename, write_manifest)

RV_WALL_MM = 3.0


# --------------------------------------------------------------------------
# closed-form volumes


def ellipsoid_volume(a, b, c) -> float:
    """mm^3."""
    return 4.0 / 3.0 * math.pi * a * b * c


def ellipsoid_segment_volume(a, b, c, lo, hi) -> float:
    """Volume (mm^3) of the part of an ellipsoid with ``lo <= w/c <= hi`` (normalized, in [-1, 1])."""
    lo, hi = max(-1.0, lo), min(1.0, hi)
    if hi <= lo:
        return 0.0
    return math.pi * a * b * c * ((hi - lo) - (hi ** 3 - lo ** 3) / 3.0)


def analytic_volume(kind: str, *params) -> float:
    """Closed-form solid volume in mL.

    kinds: ``sphere`` (r), ``ellipsoid`` (a, b, c), ``half_ellipsoid`` (a, b, c),
    ``segment`` (a, b, c, lo, hi), ``rv`` (a, b, c, kappa): half-ellipsoid
    keeping ``u/a >= -kappa``.
    """
    if kind == "sphere":
        (r,) = params
        mm3 = ellipsoid_volume(r, r, r)
    elif kind == "ellipsoid":
        mm3 = ellipsoid_volume(*params)
    elif kind == "half_ellipsoid":
        a, b, c = params
        mm3 = ellipsoid_segment_volume(a, b, c, 0.0, 1.0)
    elif kind == "segment":
        mm3 = ellipsoid_segment_volume(*params)
    elif kind == "rv":
        a, b, c, kappa = params
        # the w >= 0 cut halves the u-segment by symmetry
        mm3 = 0.5 * ellipsoid_segment_volume(b, c, a, -kappa, 1.0)
    else:
        raise ValueError(f"unknown solid kind {kind!r}")
    return mm3 / 1000.0


def circle_segment_fraction(h: float) -> float:
    """Area of the unit disc with ``x >= h``."""
    h = min(1.0, max(-1.0, h))
    return math.acos(h) - h * math.sqrt(1.0 - h * h)


# --------------------------------------------------------------------------
# specification


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    n_subjects: int = 10
    subject_prefix: str = "S"
    lv_radius: tuple = (23.0, 29.0)
    lv_ellipticity: tuple = (0.9, 1.05)
    lv_length: tuple = (65.0, 85.0)
    wall_thickness: tuple = (7.0, 10.0)
    rv_radius: tuple = (20.0, 26.0)
    rv_width: tuple = (35.0, 45.0)
    rv_depth: tuple = (0.75, 0.9)  # fraction of LV endo length
    rv_kappa: tuple = (0.2, 0.4)
    rv_angle_deg: tuple = (-20.0, 20.0)
    center_jitter: float = 8.0
    base_offset: tuple = (4.0, 6.0)  # distance of slice 0 above the base plane
    lv_contraction: tuple = (0.35, 0.5)  # ES/ED volume ratio
    rv_contraction: tuple = (0.4, 0.55)
    blood: float = 800.0
    myocardium: float = 300.0
    background: float = 100.0
    intensity_jitter: float = 0.05
    noise_sd: float = 30.0
    dims: tuple = (128, 128, 12)
    spacing: tuple = (1.8, 1.8, 10.0)
    n_phases: int = 4
    n_lax: int = 2
    lax_offset: float = 2.0
    n_angles: int = 24
    n_rings: int = 7
    drop_basal_rate: float = 0.0
    drop_apical_rate: float = 0.0

    def __post_init__(self):
        for name in ("lv_radius", "lv_length", "wall_thickness", "rv_radius", "rv_width"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise SpecError(f"{name} must be a positive range, got {(lo, hi)}")
        for name in ("lv_contraction", "rv_contraction"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise SpecError(f"{name} (ES/ED ratio) must lie in (0, 1), got {(lo, hi)}")
        if self.noise_sd < 0:
            raise SpecError("noise_sd must be >= 0")
        if self.n_subjects < 0 or self.n_phases < 1:
            raise SpecError("n_subjects >= 0 and n_phases >= 1 required")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise SpecError("grid dims and spacing must be positive")
        if not 0 <= self.drop_basal_rate + self.drop_apical_rate <= 1:
            raise SpecError("corruption rates must be in [0, 1] and sum to <= 1")
        if self.n_angles < 3 or self.n_rings < 1:
            raise SpecError("landmark grid needs n_angles >= 3 and n_rings >= 1")

    @property
    def n_landmarks(self) -> int:
        return 3 * (self.n_angles * self.n_rings + 1)

    @property
    def es_phase(self) -> int:
        return self.n_phases // 2


def spec_from_text(text: str) -> PhantomSpec:
    kv = parse_kv_text(text)
    fields = PhantomSpec.__dataclass_fields__
    kwargs = {}
    for key, value in kv.items():
        if key not in fields:
            raise SpecError(f"unknown phantom spec key {key!r}")
        default = getattr(PhantomSpec(), key)
        parts = value.replace(",", " ").split()
        try:
            if isinstance(default, tuple):
                kwargs[key] = tuple(type(default[0])(float(p)) if isinstance(default[0], int) else float(p)
                                    for p in parts)
            elif isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            elif isinstance(default, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        except ValueError:
            raise SpecError(f"bad value for {key!r}: {value!r}")
    return PhantomSpec(**kwargs)


def load_spec(path) -> PhantomSpec:
    return spec_from_text(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# per-subject geometry


@dataclass(frozen=True)
class PhaseGeometry:
    lv_endo: tuple  # (a, b, c)
    lv_epi: tuple
    rv: tuple  # (a, b, c)
    rv_kappa: float

    def volumes_ml(self) -> dict:
        endo = analytic_volume("half_ellipsoid", *self.lv_endo)
        epi = analytic_volume("half_ellipsoid", *self.lv_epi)
        rv = analytic_volume("rv", *self.rv, self.rv_kappa)
        return {"lv_endo": endo, "lv_epi": epi, "lv_myo": epi - endo, "rv_endo": rv}


@dataclass(frozen=True)
class SubjectParams:
    subject_id: str
    base_center: tuple  # world mm, LV axis point on the base plane
    angle: float  # rotation of u about the long axis (rad)
    rv_center_u: float  # u offset of the RV ellipsoid centre
    rv_cut_u: float
    phases: tuple  # PhaseGeometry per phase
    intensities: tuple  # (background, myocardium, blood)
    base_offset: float
    lax_angles: tuple
    lax_offsets: tuple
    coverage: str = "full"
    seed: tuple = ()

    @property
    def frame(self) -> np.ndarray:
        """Columns u, v, w in world coordinates."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.base_center)) @ self.frame

    def to_world(self, local) -> np.ndarray:
        return np.asarray(local, dtype=float) @ self.frame.T + np.asarray(self.base_center)

    def anchors(self, phase: int = 0) -> dict:
        g = self.phases[phase]
        return {
            "apex": self.to_world([0.0, 0.0, g.lv_endo[2]]),
            "mitral": self.to_world([0.0, 0.0, 0.0]),
            "rv": self.to_world([self.rv_center_u, 0.0, 0.5 * g.lv_endo[2]]),
        }


def _uniform(rng, rng_pair):
    lo, hi = rng_pair
    return float(rng.uniform(lo, hi))


def _interp(a, b, t):
    return tuple(x + t * (y - x) for x, y in zip(a, b))


def draw_subject(spec: PhantomSpec, index: int) -> SubjectParams:
    """Deterministic subject parameters from the master seed and subject index."""
    seed = (int(spec.seed), int(index))
    rng = np.random.default_rng(seed)
    a1 = _uniform(rng, spec.lv_radius)
    b1 = a1 * _uniform(rng, spec.lv_ellipticity)
    c1 = _uniform(rng, spec.lv_length)
    t = _uniform(rng, spec.wall_thickness)
    ar = _uniform(rng, spec.rv_radius)
    br = _uniform(rng, spec.rv_width)
    cr = c1 * _uniform(rng, spec.rv_depth)
    kappa = _uniform(rng, spec.rv_kappa)
    angle = math.radians(_uniform(rng, spec.rv_angle_deg))
    jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
    base_offset = _uniform(rng, spec.base_offset)
    rho_lv = _uniform(rng, spec.lv_contraction)
    rho_rv = _uniform(rng, spec.rv_contraction)
    lev = 1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter, size=3)
    lax_angles = tuple(float(x) for x in (np.arange(spec.n_lax) * (math.pi / max(spec.n_lax, 1))
                                          + rng.uniform(-0.15, 0.15, size=spec.n_lax)))
    lax_offsets = tuple(float(x) for x in rng.uniform(-spec.lax_offset, spec.lax_offset, size=spec.n_lax))

    endo_ed = (a1, b1, c1)
    epi_ed = (a1 + t, b1 + t, c1 + t)
    # ES endocardium: volume ratio rho, shortening split 1/5 axial, 4/5 radial
    sl = rho_lv ** 0.2
    sr = math.sqrt(rho_lv / sl)
    endo_es = (a1 * sr, b1 * sr, c1 * sl)
    # ES epicardium: incompressible myocardium (ED myocardial volume conserved)
    v_myo = analytic_volume("half_ellipsoid", *epi_ed) - analytic_volume("half_ellipsoid", *endo_ed)
    target = analytic_volume("half_ellipsoid", *endo_es) + v_myo
    t_es = brentq(lambda x: analytic_volume("half_ellipsoid", *(e + x for e in endo_es)) - target, 0.0, 60.0,
                  xtol=1e-12)
    epi_es = tuple(e + t_es for e in endo_es)
    rv_cut = epi_ed[0] + RV_WALL_MM
    rv_center = rv_cut + kappa * ar
    srv = rho_rv ** (1.0 / 3.0)
    rv_ed = (ar, br, cr)
    rv_es = (ar * srv, br * srv, cr * srv)

    phases = []
    for p in range(spec.n_phases):
        wgt = 0.5 * (1.0 - math.cos(2.0 * math.pi * p / spec.n_phases)) if spec.n_phases > 1 else 0.0
        rv_p = _interp(rv_ed, rv_es, wgt)
        phases.append(PhaseGeometry(
            lv_endo=_interp(endo_ed, endo_es, wgt),
            lv_epi=_interp(epi_ed, epi_es, wgt),
            rv=rv_p,
            rv_kappa=(rv_center - rv_cut) / rv_p[0],
        ))

    # keep the LV+RV pair near the field-of-view centre
    c, s = math.cos(angle), math.sin(angle)
    shift = -0.5 * rv_center
    base_center = (shift * c + jitter[0], shift * s + jitter[1], 0.0)
    bg, myo, blood = spec.background * lev[0], spec.myocardium * lev[1], spec.blood * lev[2]
    return SubjectParams(
        subject_id=f"{spec.subject_prefix}{index:04d}",
        base_center=base_center, angle=angle, rv_center_u=rv_center, rv_cut_u=rv_cut,
        phases=tuple(phases), intensities=(bg, myo, blood), base_offset=base_offset,
        lax_angles=lax_angles, lax_offsets=lax_offsets, seed=seed,
    )


def corrupted_ids(spec: PhantomSpec) -> dict:
    """Pre-committed corruption assignment: subject index -> 'missing_basal' | 'missing_apical'."""
    n = spec.n_subjects
    nb = int(round(spec.drop_basal_rate * n))
    na = int(round(spec.drop_apical_rate * n))
    rng = np.random.default_rng((int(spec.seed), 0xC0FFEE))
    chosen = rng.permutation(n)[: nb + na]
    out = {int(i): "missing_basal" for i in chosen[:nb]}
    out.update({int(i): "missing_apical" for i in chosen[nb:]})
    return out


# --------------------------------------------------------------------------
# region membership


def region_masks(params: SubjectParams, phase: int, world_points) -> dict:
    """Boolean membership of world points in each generating solid."""
    g = params.phases[phase]
    L = params.to_local(world_points)
    u, v, w = L[..., 0], L[..., 1], L[..., 2]
    below_base = w >= 0

    def inside(axes, cu=0.0, pad=0.0):
        a, b, c = (x + pad for x in axes)
        return ((u - cu) / a) ** 2 + (v / b) ** 2 + (w / c) ** 2 <= 1.0

    lv_endo = below_base & inside(g.lv_endo)
    lv_epi = below_base & inside(g.lv_epi)
    rv_endo = below_base & inside(g.rv, params.rv_center_u) & (u >= params.rv_cut_u)
    rv_shell = below_base & inside(g.rv, params.rv_center_u, RV_WALL_MM) & (u >= params.rv_cut_u - RV_WALL_MM)
    return {"lv_endo": lv_endo, "lv_epi": lv_epi, "rv_endo": rv_endo, "rv_shell": rv_shell}


def paint(params: SubjectParams, phase: int, world_points, rng=None, noise_sd=0.0) -> np.ndarray:
    m = region_masks(params, phase, world_points)
    bg, myo, blood = params.intensities
    img = np.full(m["lv_endo"].shape, bg)
    img[m["lv_epi"] | m["rv_shell"]] = myo
    img[m["lv_endo"] | m["rv_endo"]] = blood
    if rng is not None and noise_sd > 0:
        img = img + rng.normal(0.0, noise_sd, size=img.shape)
    return img


def _grid_world(origin, R, dims, spacing) -> np.ndarray:
    ii, jj, kk = np.meshgrid(*(np.arange(n) * s for n, s in zip(dims, spacing)), indexing="ij")
    local = np.stack([ii, jj, kk], axis=-1)
    return local @ R.T + np.asarray(origin)


def sax_geometry(spec: PhantomSpec, params: SubjectParams):
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    origin = (-0.5 * (nx - 1) * sx, -0.5 * (ny - 1) * sy, -params.base_offset)
    return origin, np.eye(3), tuple(spec.dims), tuple(spec.spacing)


def lax_geometry(spec: PhantomSpec, params: SubjectParams, i: int):
    nx, ny = spec.dims[0], spec.dims[1]
    sx, sy = spec.spacing[0], spec.spacing[1]
    ang = params.angle + params.lax_angles[i]
    e1 = np.array([math.cos(ang), math.sin(ang), 0.0])
    e2 = np.array([0.0, 0.0, 1.0])
    e3 = np.cross(e1, e2)
    R = np.stack([e1, e2, e3], axis=1)
    center = np.asarray(params.base_center) + params.lax_offsets[i] * e3
    origin = center - 0.5 * (nx - 1) * sx * e1 - 0.25 * (ny - 1) * sy * e2
    return tuple(origin), R, (nx, ny, 1), (sx, sy, 8.0)


def render_sax(spec: PhantomSpec, params: SubjectParams, phase: int, noise=True) -> VoxelVolume:
    origin, R, dims, spacing = sax_geometry(spec, params)
    pts = _grid_world(origin, R, dims, spacing)
    rng = np.random.default_rng((*params.seed, phase, 0)) if noise else None
    img = paint(params, phase, pts, rng, spec.noise_sd)
    return VoxelVolume(dims, spacing, origin, R, np.clip(np.rint(img), 0, 65535).astype(np.uint16),
                       phase=phase, view=View.SAX, subject=params.subject_id)


def render_lax(spec: PhantomSpec, params: SubjectParams, phase: int, i: int, noise=True) -> VoxelVolume:
    origin, R, dims, spacing = lax_geometry(spec, params, i)
    pts = _grid_world(origin, R, dims, spacing)
    rng = np.random.default_rng((*params.seed, phase, 1 + i)) if noise else None
    img = paint(params, phase, pts, rng, spec.noise_sd)
    return VoxelVolume(dims, spacing, origin, R, np.clip(np.rint(img), 0, 65535).astype(np.uint16),
                       phase=phase, view=View.LAX, subject=params.subject_id, series=f"lax{i}")


def drop_slices(volume: VoxelVolume, first: int, last: int) -> VoxelVolume:
    """Keep slices ``first..last`` inclusive, moving the origin accordingly."""
    keep = volume.data[:, :, first:last + 1]
    origin = np.asarray(volume.origin) + volume.orientation[:, 2] * first * volume.spacing[2]
    return VoxelVolume((volume.dims[0], volume.dims[1], keep.shape[2]), volume.spacing, tuple(origin),
                       volume.orientation, keep, phase=volume.phase, view=volume.view,
                       subject=volume.subject, series=volume.series)


def corruption_range(spec: PhantomSpec, params: SubjectParams, kind: str):
    """Slice range (first, last) that survives a coverage corruption."""
    nz, sz = spec.dims[2], spec.spacing[2]
    if kind == "missing_basal":
        # the above-base slice and the first ventricular slice are lost
        return 2, nz - 1
    if kind == "missing_apical":
        c1 = params.phases[0].lv_endo[2]
        w = -params.base_offset + np.arange(nz) * sz
        last = int(np.nonzero(w <= 0.7 * c1)[0].max())
        return 0, last
    return 0, nz - 1


# --------------------------------------------------------------------------
# landmarks


def surface_landmarks(params: SubjectParams, phase: int, n_angles: int, n_rings: int) -> PointSet:
    """Corresponded landmarks on the three surfaces at fixed parametric coordinates."""
    g = params.phases[phase]
    theta = 2.0 * math.pi * np.arange(n_angles) / n_angles
    phi = 0.5 * math.pi * (1.0 - np.arange(n_rings) / n_rings)
    s, cw = np.sin(phi)[:, None], np.cos(phi)[:, None]
    ct, st = np.cos(theta)[None, :], np.sin(theta)[None, :]
    surfaces = []
    for a, b, c in (g.lv_endo, g.lv_epi):
        ring = np.stack([a * s * ct, b * s * st, c * cw * np.ones_like(ct)], axis=-1).reshape(-1, 3)
        surfaces.append(np.vstack([ring, [0.0, 0.0, c]]))
    a, b, c = g.rv
    r_e = s / np.sqrt(ct ** 2 / a ** 2 + st ** 2 / b ** 2)
    with np.errstate(divide="ignore"):
        r_c = np.where(ct < 0, g.rv_kappa * a / np.maximum(-ct, 1e-300), np.inf)
    r = np.minimum(r_e, r_c)
    ring = np.stack([params.rv_center_u + r * ct, r * st, c * cw * np.ones_like(ct)], axis=-1).reshape(-1, 3)
    surfaces.append(np.vstack([ring, [params.rv_center_u, 0.0, c]]))
    tri = grid_triangles(n_angles, n_rings)
    npts = n_angles * n_rings + 1
    pts = params.to_world(np.vstack(surfaces))
    labels = np.repeat([int(Structure.LV_endo), int(Structure.LV_epi), int(Structure.RV_endo)], npts)
    tris = np.vstack([tri + k * npts for k in range(3)])
    return PointSet(pts, labels, tris)


def grid_triangles(n_angles: int, n_rings: int) -> np.ndarray:
    """Outward-oriented triangles for ``n_rings`` rings of ``n_angles`` points plus an apex."""
    tris = []
    for j in range(n_rings - 1):
        for i in range(n_angles):
            a = j * n_angles + i
            b = j * n_angles + (i + 1) % n_angles
            c = (j + 1) * n_angles + (i + 1) % n_angles
            d = (j + 1) * n_angles + i
            tris += [(a, b, d), (b, c, d)]
    apex = n_rings * n_angles
    j = n_rings - 1
    for i in range(n_angles):
        tris.append((j * n_angles + i, j * n_angles + (i + 1) % n_angles, apex))
    return np.array(tris, dtype=np.int64)


# --------------------------------------------------------------------------
# analytic cross-sections


def cross_section_area(params: SubjectParams, phase: int, structure: str, w: float) -> float:
    """Exact area (mm^2) of a generating solid cut by the plane at long-axis depth ``w``."""
    g = params.phases[phase]
    if w < 0:
        return 0.0
    if structure in ("lv_endo", "lv_epi"):
        a, b, c = getattr(g, structure)
        if w >= c:
            return 0.0
        return math.pi * a * b * (1.0 - (w / c) ** 2)
    if structure == "rv_endo":
        a, b, c = g.rv
        if w >= c:
            return 0.0
        s = math.sqrt(1.0 - (w / c) ** 2)
        return a * b * s * s * circle_segment_fraction(-g.rv_kappa / s)
    raise ValueError(structure)


def cross_section_contour(params: SubjectParams, phase: int, structure: str, w: float, n: int = 256):
    """Finely sampled analytic cross-section polygon (local u, v), or None if empty."""
    g = params.phases[phase]
    if w < 0:
        return None
    if structure in ("lv_endo", "lv_epi"):
        a, b, c = getattr(g, structure)
        if w >= c:
            return None
        s = math.sqrt(1.0 - (w / c) ** 2)
        t = 2 * math.pi * np.arange(n) / n
        return np.stack([a * s * np.cos(t), b * s * np.sin(t)], axis=1)
    a, b, c = g.rv
    if w >= c:
        return None
    s = math.sqrt(1.0 - (w / c) ** 2)
    h = max(-1.0, -g.rv_kappa / s)
    t0 = math.acos(h)
    t = np.linspace(-t0, t0, n, endpoint=h > -1.0)
    return np.stack([params.rv_center_u + a * s * np.cos(t), b * s * np.sin(t)], axis=1)


def truth_contours(spec: PhantomSpec, params: SubjectParams, phase: int, structure: str, nz=None):
    """Analytic per-slice contours (slice-plane mm) for the SAX stack of ``params``."""
    origin, R, dims, spacing = sax_geometry(spec, params)
    nz = dims[2] if nz is None else nz
    out = []
    for k in range(nz):
        w = -params.base_offset + k * spacing[2]
        uv = cross_section_contour(params, phase, structure, w)
        if uv is None:
            continue
        local = np.column_stack([uv, np.full(len(uv), w)])
        world = params.to_world(local)
        xy = (world - np.asarray(origin)) @ R
        out.append(Contour(k, xy[:, :2], structure))
    return out


def exact_slice_sum(spec: PhantomSpec, params: SubjectParams, phase: int, structure: str) -> float:
    """Exact Simpson-style discretization (mL): sum of exact cross-section areas times slice spacing."""
    nz, sz = spec.dims[2], spec.spacing[2]
    tot = sum(cross_section_area(params, phase, structure, -params.base_offset + k * sz) for k in range(nz))
    return tot * sz / 1000.0


# --------------------------------------------------------------------------
# cohort


@dataclass
class PhantomTruth:
    rows: list = field(default_factory=list)  # dicts, one per subject/phase

    def for_subject(self, subject_id):
        return [r for r in self.rows if r["subject_id"] == subject_id]


TRUTH_COLUMNS = ["subject_id", "phase", "coverage", "ed_phase", "es_phase",
                 "lv_endo_ml", "lv_epi_ml", "lv_myo_ml", "rv_endo_ml",
                 "apex_x", "apex_y", "apex_z", "mitral_x", "mitral_y", "mitral_z", "rv_x", "rv_y", "rv_z"]


def subject_truth_rows(spec: PhantomSpec, params: SubjectParams):
    rows = []
    for p in range(spec.n_phases):
        vols = params.phases[p].volumes_ml()
        anc = params.anchors(p)
        row = {"subject_id": params.subject_id, "phase": p, "coverage": params.coverage,
               "ed_phase": 0, "es_phase": spec.es_phase,
               "lv_endo_ml": vols["lv_endo"], "lv_epi_ml": vols["lv_epi"],
               "lv_myo_ml": vols["lv_myo"], "rv_endo_ml": vols["rv_endo"]}
        for name in ("apex", "mitral", "rv"):
            for ax, val in zip("xyz", anc[name]):
                row[f"{name}_{ax}"] = float(val)
        rows.append(row)
    return rows


def write_truth(truth: PhantomTruth, path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, TRUTH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in truth.rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_truth(path) -> PhantomTruth:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            out = {}
            for k, v in r.items():
                if k in ("subject_id", "coverage"):
                    out[k] = v
                elif k in ("phase", "ed_phase", "es_phase"):
                    out[k] = int(v)
                else:
                    out[k] = float(v)
            rows.append(out)
    return PhantomTruth(rows)


def subject_params(spec: PhantomSpec, index: int) -> SubjectParams:
    params = draw_subject(spec, index)
    kind = corrupted_ids(spec).get(index)
    return replace(params, coverage=kind) if kind else params


def render_subject(spec: PhantomSpec, params: SubjectParams, noise=True):
    """SAX (coverage-corrupted if flagged), LAX volumes and ground-truth shapes for every phase."""
    first, last = corruption_range(spec, params, params.coverage)
    out = []
    for p in range(spec.n_phases):
        sax = render_sax(spec, params, p, noise)
        if (first, last) != (0, spec.dims[2] - 1):
            sax = drop_slices(sax, first, last)
        lax = [render_lax(spec, params, p, i, noise) for i in range(spec.n_lax)]
        gt = surface_landmarks(params, p, spec.n_angles, spec.n_rings)
        out.append((sax, lax, gt))
    return out


def generate_cohort(spec: PhantomSpec, out_dir, workers: int = 1):
    """Write a phantom cohort in the organised ``<subject>/<view>/`` layout.

    Returns ``(manifest, truth)``; ``manifest.csv`` and ``truth.csv`` are
    written to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = list(range(spec.n_subjects))
    if workers > 1 and len(indices) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_write_subject, [(spec, i, str(out_dir)) for i in indices]))
    else:
        results = [_write_subject((spec, i, str(out_dir))) for i in indices]
    rows, truth_rows = [], []
    for r, t in results:
        rows += r
        truth_rows += t
    manifest = manifest_from_rows(rows, check_paths=False)
    write_manifest(relative_manifest(manifest, out_dir.resolve()), out_dir / "manifest.csv")
    truth = PhantomTruth(truth_rows)
    write_truth(truth, out_dir / "truth.csv")
    return manifest, truth


def _write_subject(args):
    spec, index, out_dir = args
    out_dir = Path(out_dir).resolve()
    params = subject_params(spec, index)
    sid = params.subject_id
    rows = []
    for p, (sax, lax, gt) in enumerate(render_subject(spec, params)):
        sax_path = out_dir / sid / "SAX" / volume_filename(sid, "SAX", p)
        save_volume(sax, sax_path)
        gt_path = out_dir / sid / "GT" / gt_filename(sid, p)
        save_pointset(gt, gt_path, sid, p)
        rows.append((sid, p, "SAX", str(sax_path), str(gt_path)))
        for vol in lax:
            lp = out_dir / sid / "LAX" / volume_filename(sid, "LAX", p, vol.series)
            save_volume(vol, lp)
            rows.append((sid, p, "LAX", str(lp), ""))
    return rows, subject_truth_rows(spec, params)
