"""Simpson's-rule volumes and the nine functional indexes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateContour, EmptySegmentation, QuantificationError
from .geometry import polygon_area

INDEX_NAMES = ("LVEDV_ml", "LVESV_ml", "LVSV_ml", "LVEF_pct", "LVM_g", "RVEDV_ml", "RVESV_ml", "RVSV_ml", "RVEF_pct")


def simpson_volume(contours, slice_spacing: float) -> float:
    """Sum of contour areas times slice spacing, in mL."""
    if not slice_spacing > 0:
        raise ValueError("slice_spacing must be positive")
    contours = list(contours)
    if not contours:
        raise EmptySegmentation("no contours to integrate")
    total = 0.0
    for c in contours:
        try:
            total += polygon_area(c)
        except DegenerateContour:
            continue  # a collapsed loop contributes no area
    return total * slice_spacing / 1000.0


class PhaseSelection(NamedTuple):
    ed: int
    es: int

    @property
    def degenerate(self) -> bool:
        return self.ed == self.es


def select_phases(volumes) -> PhaseSelection:
    """ED = largest, ES = smallest LV endo volume; ties go to the lowest phase index."""
    v = np.asarray(volumes, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("phase selection needs at least 2 phases")
    return PhaseSelection(int(np.argmax(v)), int(np.argmin(v)))


@dataclass(frozen=True)
class IndexRecord:
    LVEDV: float
    LVESV: float
    LVSV: float
    LVEF: float
    LVM: float
    RVEDV: float
    RVESV: float
    RVSV: float
    RVEF: float
    ed_phase: int = 0
    es_phase: int = 0
    warnings: tuple = field(default=(), compare=False)

    def as_row(self) -> dict:
        return dict(zip(INDEX_NAMES, (self.LVEDV, self.LVESV, self.LVSV, self.LVEF, self.LVM,
                                      self.RVEDV, self.RVESV, self.RVSV, self.RVEF)))

    def identities_hold(self) -> bool:
        return (self.LVSV == self.LVEDV - self.LVESV and self.RVSV == self.RVEDV - self.RVESV
                and self.LVEF == 100.0 * self.LVSV / self.LVEDV and self.RVEF == 100.0 * self.RVSV / self.RVEDV)


def indexes_from_volumes(lvedv, lvesv, lv_epi_ed, rvedv, rvesv, density: float = 1.05, ed_phase: int = 0,
                         es_phase: int = 0) -> IndexRecord:
    if not lvedv > 0 or not rvedv > 0:
        raise QuantificationError(f"end-diastolic volume must be positive (LV {lvedv}, RV {rvedv}); EF undefined")
    lvsv = lvedv - lvesv
    rvsv = rvedv - rvesv
    warnings = []
    if lvsv < 0:
        warnings.append("negative_lvef")
    if rvsv < 0:
        warnings.append("negative_rvef")
    return IndexRecord(lvedv, lvesv, lvsv, 100.0 * lvsv / lvedv, (lv_epi_ed - lvedv) * density,
                       rvedv, rvesv, rvsv, 100.0 * rvsv / rvedv, ed_phase, es_phase, tuple(warnings))


def _vol(contours, spacing):
    try:
        return simpson_volume(contours, spacing)
    except EmptySegmentation:
        return 0.0


def compute_indexes(ed: dict, es: dict, slice_spacing: float, density: float = 1.05, ed_phase: int = 0,
                    es_phase: int = 0) -> IndexRecord:
    """Indexes from per-structure contour lists (keys ``LV_endo``, ``LV_epi``, ``RV_endo``) at ED and ES."""
    return indexes_from_volumes(
        _vol(ed.get("LV_endo", []), slice_spacing), _vol(es.get("LV_endo", []), slice_spacing),
        _vol(ed.get("LV_epi", []), slice_spacing), _vol(ed.get("RV_endo", []), slice_spacing),
        _vol(es.get("RV_endo", []), slice_spacing), density, ed_phase, es_phase)


def contours_by_structure(raster) -> dict:
    out = {}
    for c in raster.contours:
        out.setdefault(c.structure, []).append(c)
    return out
