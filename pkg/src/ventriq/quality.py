"""Image quality (slice coverage) and segmentation quality assessment with forest classifiers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .appearance import AppearanceModel, slice_profiles
from .errors import DetectionFailure, DimensionError, FormatError, InsufficientData
from .forest import RandomForest, forest_predict, train_forest
from .geometry import PointSet, Structure, VoxelVolume, rotation_about
from .initializer import AnchorLandmarks, detect_anchors
from .matcher import LABEL_LV_BLOOD, LABEL_LV_MYO, LABEL_RV_BLOOD, FittedShape, rasterize
from .mesh import vertex_normals

IQA_BASAL = "IQA_basal"
IQA_APICAL = "IQA_apical"
SQA = "SQA"
KINDS = (IQA_BASAL, IQA_APICAL, SQA)

SCHEMAS = {
    IQA_BASAL: ("top_area_ratio", "top_margin_mm", "top_margin_frac", "first_blob_frac", "coverage_ratio"),
    IQA_APICAL: ("bottom_area_ratio", "bottom_margin_mm", "bottom_margin_frac", "last_blob_frac", "coverage_ratio"),
    SQA: ("lv_blood_mean", "lv_blood_std", "lv_myo_mean", "lv_myo_std", "rv_blood_mean", "rv_blood_std",
          "blood_myo_contrast", "myo_connectivity", "mahalanobis_outlier_frac"),
}


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    schema: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if self.schema not in SCHEMAS or v.shape[0] != len(SCHEMAS[self.schema]):
            raise DimensionError(f"feature vector does not match schema {self.schema!r}")
        if not np.all(np.isfinite(v)):
            raise DimensionError("features must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class QAReport:
    subject_id: str
    kind: str  # "IQA" or "SQA"
    passed: bool
    score: float
    reasons: tuple = ()
    threshold: float = 0.5

    def __post_init__(self):
        if self.passed != (self.score >= self.threshold):
            raise ValueError("QAReport.passed must equal score >= threshold")
        if not self.passed and not self.reasons:
            raise ValueError("failed QA report needs at least one reason")


# --------------------------------------------------------------------------
# image quality


def image_features(anchors: AnchorLandmarks, sax: VoxelVolume) -> dict:
    """Basal and apical coverage features from the anchor detection diagnostics."""
    areas = anchors.slice_areas
    pos = anchors.slice_positions  # mm from the mitral centre towards the apex
    L = max(anchors.axis_length, 1e-6)
    amax = max(areas.max(), 1e-9)
    hit = np.nonzero(areas > 0)[0]
    top, bottom = (0, -1) if pos[0] <= pos[-1] else (-1, 0)
    first, last = (hit[0], hit[-1]) if top == 0 else (hit[-1], hit[0])
    coverage = abs(pos[-1] - pos[0]) / L
    basal = [areas[top] / amax, pos[top], pos[top] / L, pos[first] / L, coverage]
    apical = [areas[bottom] / amax, L - pos[bottom], (L - pos[bottom]) / L, (L - pos[last]) / L, coverage]
    return {IQA_BASAL: FeatureVector(basal, IQA_BASAL), IQA_APICAL: FeatureVector(apical, IQA_APICAL)}


def assess_image(sax: VoxelVolume, lax, basal_rf: RandomForest, apical_rf: RandomForest, threshold: float = 0.5,
                 subject_id: str = "", anchors: AnchorLandmarks | None = None, search_radius: float = 60.0):
    """IQA report and the anchors found along the way (None when the stack is too short).

    The score is the probability that neither end of the stack is missing,
    ``min(1 - p_basal, 1 - p_apical)``.
    """
    sid = subject_id or sax.subject
    if sax.dims[2] < 3:
        return QAReport(sid, "IQA", False, 0.0, ("insufficient_slices",), threshold), None
    if anchors is None:
        anchors = detect_anchors(sax, lax, search_radius)
    f = image_features(anchors, sax)
    p_b = forest_predict(basal_rf, f[IQA_BASAL])
    p_a = forest_predict(apical_rf, f[IQA_APICAL])
    score = float(min(1.0 - p_b, 1.0 - p_a))
    reasons = []
    if 1.0 - p_b < threshold:
        reasons.append("missing_basal")
    if 1.0 - p_a < threshold:
        reasons.append("missing_apical")
    return QAReport(sid, "IQA", score >= threshold, score, tuple(reasons), threshold), anchors


# --------------------------------------------------------------------------
# segmentation quality


def segmentation_features(volume: VoxelVolume, shape: PointSet, iam: AppearanceModel, raster=None,
                          observe_fraction: float = 0.6, min_inplane: float = 0.5) -> FeatureVector | None:
    """SQA features; None when the LV blood pool or myocardium mask is empty."""
    raster = raster if raster is not None else rasterize(shape, volume)
    lab = raster.labels
    img = volume.values
    if not (lab == LABEL_LV_BLOOD).any() or not (lab == LABEL_LV_MYO).any():
        return None
    scale = max(float(np.percentile(img, 99)), 1e-9)
    vals = []
    means = {}
    for code in (LABEL_LV_BLOOD, LABEL_LV_MYO, LABEL_RV_BLOOD):
        x = img[lab == code]
        m, s = (float(x.mean()), float(x.std())) if x.size else (0.0, 0.0)
        means[code] = m
        vals += [m / scale, s / scale]
    contrast = means[LABEL_LV_BLOOD] / max(means[LABEL_LV_MYO], 1e-9)
    myo = lab == LABEL_LV_MYO
    largest = 0
    for k in range(myo.shape[2]):
        cc, n = ndimage.label(myo[:, :, k], structure=np.ones((3, 3)))
        if n:
            largest += int(np.bincount(cc.ravel())[1:].max())
    connectivity = largest / max(int(myo.sum()), 1)
    normals = vertex_normals(shape.points, shape.triangles)
    sp = slice_profiles(volume, shape.points, normals, iam.k, iam.step, 0, observe_fraction, min_inplane)
    d = iam.distances(sp.profiles)[:, 0]
    obs = sp.observed
    thr = iam.thresholds if iam.thresholds is not None else np.full(iam.n_landmarks, np.inf)
    outlier = float((d[obs] > thr[obs]).mean()) if obs.any() else 1.0
    return FeatureVector(vals + [min(contrast, 100.0), connectivity, outlier], SQA)


def assess_segmentation(volume: VoxelVolume, fitted, iam: AppearanceModel, rf: RandomForest,
                        threshold: float = 0.5, subject_id: str = "", raster=None) -> QAReport:
    sid = subject_id or volume.subject
    shape = fitted.shape if isinstance(fitted, FittedShape) else fitted
    f = segmentation_features(volume, shape, iam, raster)
    if f is None:
        return QAReport(sid, "SQA", False, 0.0, ("empty_segmentation",), threshold)
    score = float(forest_predict(rf, f))
    reasons = () if score >= threshold else ("implausible_segmentation",)
    return QAReport(sid, "SQA", score >= threshold, score, reasons, threshold)


# --------------------------------------------------------------------------
# corpus construction


def _axis_depth(sax: VoxelVolume, gt: PointSet):
    """Per-slice depth below the LV base (mm, positive towards the apex) and the LV endo length."""
    from .mesh import boundary_vertices

    endo = np.nonzero(gt.labels == int(Structure.LV_endo))[0]
    tri = gt.triangles[np.isin(gt.triangles, endo).all(axis=1)]
    ring = boundary_vertices(tri)
    z = sax.world_to_local(gt.points)[:, 2]
    z_base = z[ring].mean()
    z_far = z[endo]
    sign = 1.0 if np.abs(z_far.max() - z_base) >= np.abs(z_far.min() - z_base) else -1.0
    length = float(np.max(sign * (z_far - z_base)))
    depth = sign * (np.arange(sax.dims[2]) * sax.spacing[2] - z_base)
    return depth, length


def corrupt_coverage(sax: VoxelVolume, gt: PointSet, kind: str, rng) -> VoxelVolume:
    """Drop basal slices up to ~1 slice below the base, or apical slices beyond 60-80% of the LV length."""
    depth, length = _axis_depth(sax, gt)
    sz = sax.spacing[2]
    if kind == "missing_basal":
        keep = depth >= rng.uniform(0.8, 1.5) * sz
    elif kind == "missing_apical":
        keep = depth <= rng.uniform(0.6, 0.8) * length
    else:
        raise ValueError(kind)
    idx = np.nonzero(keep)[0]
    if idx.size < 3:
        raise InsufficientData("corruption leaves fewer than 3 slices")
    first, last = int(idx[0]), int(idx[-1])
    data = sax.data[:, :, first:last + 1]
    origin = np.asarray(sax.origin) + sax.orientation[:, 2] * first * sz
    return VoxelVolume((sax.dims[0], sax.dims[1], data.shape[2]), sax.spacing, tuple(origin), sax.orientation,
                       data, phase=sax.phase, view=sax.view, subject=sax.subject, series=sax.series)


def perturb_shape(shape: PointSet, rng, severity: str) -> PointSet:
    """Mild (plausible) or gross (implausible) similarity perturbation about the centroid."""
    p = shape.points
    c = p.mean(axis=0)
    axis = rng.normal(size=3)
    if severity == "mild":
        shift = rng.normal(size=3)
        shift *= rng.uniform(0.0, 1.5) / np.linalg.norm(shift)
        s = rng.uniform(0.97, 1.03)
        ang = np.radians(rng.uniform(-3, 3))
    else:
        mode = rng.integers(3)
        shift = rng.normal(size=3)
        shift *= (rng.uniform(8.0, 30.0) if mode == 0 else rng.uniform(0.0, 3.0)) / np.linalg.norm(shift)
        s = rng.choice([rng.uniform(0.65, 0.8), rng.uniform(1.2, 1.35)]) if mode == 1 else 1.0
        ang = np.radians(rng.uniform(20, 45) * rng.choice([-1, 1])) if mode == 2 else 0.0
    R = rotation_about(axis, ang)
    return shape.with_points(s * (p - c) @ R.T + c + shift)


@dataclass
class QACorpus:
    rows: list = field(default_factory=list)  # (subject_id, kind, label, values)

    def add(self, sid, kind, label, fv: FeatureVector):
        self.rows.append((sid, kind, int(label), fv.values))

    def arrays(self, kind):
        sel = [r for r in self.rows if r[1] == kind]
        if not sel:
            return np.zeros((0, len(SCHEMAS[kind]))), np.zeros(0)
        return np.stack([r[3] for r in sel]), np.array([r[2] for r in sel])


def build_qa_corpus(cases, iam: AppearanceModel, seed: int = 0, n_negative: int = 3, n_mild: int = 1,
                    search_radius: float = 60.0) -> QACorpus:
    """Labelled QA samples from ground-truth cases ``(subject_id, sax, lax, gt)``.

    IQA: each stack as-is (label 0) and with basal / apical slices removed
    (label 1 for the matching forest, 0 for the other). SQA: the ground-truth
    shape and mild perturbations (label 1 = acceptable) against gross
    translations, scalings and rotations (label 0).
    """
    corpus = QACorpus()
    for n, (sid, sax, lax, gt) in enumerate(cases):
        rng = np.random.default_rng((seed, n))
        stacks = [("full", sax)]
        for kind in ("missing_basal", "missing_apical"):
            try:
                stacks.append((kind, corrupt_coverage(sax, gt, kind, rng)))
            except InsufficientData:
                pass
        for kind, vol in stacks:
            try:
                f = image_features(detect_anchors(vol, lax, search_radius), vol)
            except DetectionFailure:
                continue
            corpus.add(sid, IQA_BASAL, kind == "missing_basal", f[IQA_BASAL])
            corpus.add(sid, IQA_APICAL, kind == "missing_apical", f[IQA_APICAL])
        shapes = [(1, gt)] + [(1, perturb_shape(gt, rng, "mild")) for _ in range(n_mild)]
        shapes += [(0, perturb_shape(gt, rng, "gross")) for _ in range(n_negative)]
        for label, s in shapes:
            f = segmentation_features(sax, s, iam)
            if f is not None:
                corpus.add(sid, SQA, label, f)
    return corpus


def train_qa_forests(corpus: QACorpus, n_trees: int = 50, max_depth: int = 6, seed: int = 0) -> dict:
    out = {}
    for i, kind in enumerate(KINDS):
        X, y = corpus.arrays(kind)
        out[kind] = train_forest(X, y, n_trees, max_depth, seed + i)
    return out


def write_corpus(corpus: QACorpus, path) -> None:
    width = max(len(s) for s in SCHEMAS.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "kind", "label"] + [f"feature_{i}" for i in range(width)])
    for sid, kind, label, vals in corpus.rows:
        cells = [repr(float(v)) for v in vals]
        w.writerow([sid, kind, label] + cells + [""] * (width - len(cells)))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_corpus(path) -> QACorpus:
    corpus = QACorpus()
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r, None)
        if not header or header[:3] != ["subject_id", "kind", "label"]:
            raise FormatError("QA corpus header must start with subject_id,kind,label", path)
        for line, row in enumerate(r, start=2):
            sid, kind, label = row[:3]
            if kind not in SCHEMAS:
                raise FormatError(f"line {line}: unknown kind {kind!r}", path)
            vals = [float(v) for v in row[3:3 + len(SCHEMAS[kind])]]
            try:
                corpus.add(sid, kind, int(label), FeatureVector(vals, kind))
            except (ValueError, DimensionError) as e:
                raise FormatError(f"line {line}: {e}", path) from None
    return corpus
