"""Trained model bundle: shape + appearance model and the three quality forests."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .appearance import AppearanceModel, iam_from_reader, iam_to_bytes, train_iam
from .errors import CohortAbort, DataError, FormatError, InsufficientData
from .forest import RandomForest, load_forest, save_forest
from .geometry import Structure
from .io import CohortManifest, load_pointset, load_volume
from .matcher import MatchConfig, calibrate_search
from .mesh import capped_volume
from .quality import IQA_APICAL, IQA_BASAL, SQA, build_qa_corpus, read_corpus, train_qa_forests, write_corpus
from .quantify import select_phases
from .shape_model import (
    PointDistributionModel, _Reader, pdm_from_reader, pdm_to_bytes, procrustes_align, train_pdm, with_anchors,
)

SHAPE_FILE = "shape.pdm"
FOREST_FILES = {IQA_BASAL: "iqa_basal.rf", IQA_APICAL: "iqa_apical.rf", SQA: "sqa.rf"}
CORPUS_FILE = "qa_corpus.csv"


@dataclass(frozen=True, eq=False)
class ModelBundle:
    pdm: PointDistributionModel
    iam: AppearanceModel
    forests: dict  # kind -> RandomForest

    @property
    def iqa_basal(self) -> RandomForest:
        return self.forests[IQA_BASAL]

    @property
    def iqa_apical(self) -> RandomForest:
        return self.forests[IQA_APICAL]

    @property
    def sqa(self) -> RandomForest:
        return self.forests[SQA]


def save_models(bundle: ModelBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / SHAPE_FILE).write_bytes(pdm_to_bytes(bundle.pdm) + iam_to_bytes(bundle.iam))
    for kind, name in FOREST_FILES.items():
        save_forest(bundle.forests[kind], d / name)


def load_models(directory) -> ModelBundle:
    """Load a model directory; any missing or malformed file aborts the cohort."""
    d = Path(directory)
    try:
        data = (d / SHAPE_FILE).read_bytes()
        r = _Reader(data, d / SHAPE_FILE)
        pdm = pdm_from_reader(r)
        iam = iam_from_reader(r)
        if r.pos != len(data):
            raise FormatError(f"{len(data) - r.pos} trailing bytes", d / SHAPE_FILE)
        forests = {kind: load_forest(d / name) for kind, name in FOREST_FILES.items()}
    except (OSError, DataError) as e:
        raise CohortAbort(f"cannot load models from {d}: {e}") from e
    if pdm.anchors is None:
        raise CohortAbort("shape model has no anchor landmarks")
    if iam.n_landmarks != pdm.n_landmarks:
        raise CohortAbort("shape and appearance models disagree on landmark count")
    return ModelBundle(pdm, iam, forests)


def lax_paths(entry, phase) -> tuple:
    """LAX paths for ``phase``, falling back to the earliest phase that has any."""
    if not entry.lax:
        return ()
    return entry.lax.get(phase) or entry.lax[min(entry.lax)]


def ed_es_phases(gt_by_phase: dict) -> tuple:
    """ED/ES phases from ground-truth LV endocardial volumes."""
    phases = sorted(gt_by_phase)
    vols = []
    for p in phases:
        ps = gt_by_phase[p]
        sel = ps.labels == int(Structure.LV_endo)
        tri = ps.triangles[sel[ps.triangles].all(axis=1)]
        vols.append(capped_volume(ps.points, tri))
    sel = select_phases(vols)
    return phases[sel.ed], phases[sel.es]


def training_cases(manifest: CohortManifest):
    """(subject_id, sax, lax, gt) at ED and ES for every subject with ground truth."""
    cases = []
    for e in manifest.subjects:
        if not e.gt:
            continue
        gts = {p: load_pointset(path) for p, path in sorted(e.gt.items())}
        if len(gts) < 2:
            continue
        ed, es = ed_es_phases(gts)
        for p in sorted({ed, es}):
            if p not in e.sax:
                continue
            lax = [load_volume(x) for x in lax_paths(e, p)]
            cases.append((e.subject_id, load_volume(e.sax[p]), lax, gts[p]))
    return cases


def train_models(manifest: CohortManifest, cfg, corpus_path=None, out_dir=None, log=None) -> ModelBundle:
    """Train PDM, IAM and the QA forests from a manifest with ground-truth shapes.

    Without ``corpus_path`` the QA corpus is synthesized from the training
    cases (written to ``out_dir/qa_corpus.csv`` when ``out_dir`` is given).
    """
    cases = training_cases(manifest)
    if len(cases) < 2:
        raise InsufficientData("training needs ground-truth shapes for at least 2 subject phases")
    shapes = [c[3] for c in cases]
    aligned, _ = procrustes_align(shapes)
    pdm = with_anchors(train_pdm(aligned, cfg.variance_fraction))
    if log:
        log(f"shape model: {pdm.n_landmarks} landmarks, {pdm.n_modes} modes from {len(shapes)} shapes")
    iam = train_iam([c[1] for c in cases], shapes, cfg.profile_k, cfg.profile_step, cfg.observe_fraction,
                    cfg.min_inplane_normal)
    iam = calibrate_search(iam, [c[1] for c in cases], shapes, MatchConfig.from_config(cfg))
    if corpus_path is not None:
        corpus = read_corpus(corpus_path)
    else:
        corpus = build_qa_corpus([c for c in cases if c[2]], iam, cfg.seed, search_radius=cfg.search_radius)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_corpus(corpus, Path(out_dir) / CORPUS_FILE)
    forests = train_qa_forests(corpus, cfg.n_trees, cfg.max_depth, cfg.seed)
    if log:
        log("qa forests: " + ", ".join(f"{k} oob={v.oob_accuracy:.3f}" for k, v in forests.items()))
    bundle = ModelBundle(pdm, iam, forests)
    if out_dir is not None:
        save_models(bundle, out_dir)
    return bundle
