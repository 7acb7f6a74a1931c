"""Per-subject stage chain (DO -> IQA -> OD -> MI -> S -> SQA -> Q -> DS) with parallel subject fan-out."""
from __future__ import annotations

import csv
import enum
import io
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import VentriqError
from .initializer import detect_anchors, initialize_pose, propagate_timepoint
from .io import INDEX_COLUMNS, ResultRow, ResultsTable, load_volume, save_pointset, write_results
from .matcher import MatchConfig, appearance_cost, match, rasterize
from .models import lax_paths
from .quality import assess_image, assess_segmentation
from .quantify import compute_indexes, contours_by_structure, select_phases, simpson_volume


class Stage(str, enum.Enum):
    DO = "DO"
    IQA = "IQA"
    OD = "OD"
    MI = "MI"
    S = "S"
    SQA = "SQA"
    Q = "Q"
    DS = "DS"


ORDER = list(Stage)


@dataclass(frozen=True)
class StageResult:
    stage: Stage
    status: str  # ok | gate_failed | error
    duration_ms: float = 0.0
    detail: str = ""

    def __post_init__(self):
        if self.status not in ("ok", "gate_failed", "error"):
            raise ValueError(f"unknown stage status {self.status!r}")
        if self.status == "gate_failed" and self.stage not in (Stage.IQA, Stage.SQA):
            raise ValueError("only IQA and SQA can fail a gate")
        if self.duration_ms < 0:
            raise ValueError("negative stage duration")


@dataclass
class RunReport:
    n_input: int = 0
    n_passed_iqa: int = 0
    n_passed_sqa: int = 0
    n_quantified: int = 0
    chains: dict = field(default_factory=dict)  # subject_id -> [StageResult]
    wall_ms: float = 0.0
    workers: int = 1
    config: dict = field(default_factory=dict)

    def check(self) -> None:
        if not self.n_quantified <= self.n_passed_sqa <= self.n_passed_iqa <= self.n_input:
            raise AssertionError("RunReport counting chain violated")
        for sid, chain in self.chains.items():
            validate_chain(chain)


def validate_chain(chain) -> None:
    """Stages appear in DAG order, nothing runs after a failed stage except the sink."""
    stages = [r.stage for r in chain]
    idx = [ORDER.index(s) for s in stages]
    if idx != sorted(idx) or len(set(idx)) != len(idx):
        raise AssertionError(f"stage chain out of order: {stages}")
    for r in chain[:-1]:
        if r.status != "ok" and r.stage != Stage.DS:
            tail = [x.stage for x in chain[chain.index(r) + 1:]]
            if tail != [Stage.DS]:
                raise AssertionError(f"stages {tail} ran after {r.stage.value} {r.status}")
    if not chain or chain[-1].stage != Stage.DS:
        raise AssertionError("chain lacks the terminal DS stage")


class _Gate(Exception):
    pass


@dataclass
class SubjectState:
    entry: object
    sax: dict = field(default_factory=dict)
    lax: list = field(default_factory=list)
    lax_by_phase: dict = field(default_factory=dict)
    anchors: object = None
    init: object = None
    fits: dict = field(default_factory=dict)
    rasters: dict = field(default_factory=dict)
    indexes: object = None
    reason: str = ""


def run_stage(state: SubjectState, stage: Stage, models, cfg, shapes_dir=None) -> StageResult:
    """Run one stage, converting gate failures and errors into a StageResult."""
    t0 = time.perf_counter()
    try:
        detail = _STAGES[stage](state, models, cfg, shapes_dir) or ""
        status = "ok"
    except _Gate as g:
        status, detail = "gate_failed", str(g)
    except VentriqError as e:
        status, detail = "error", f"{type(e).__name__}: {e}"
    except Exception as e:  # noqa: BLE001 - any failure is confined to this subject
        status, detail = "error", f"{type(e).__name__}: {e} ({traceback.format_exc(limit=1).splitlines()[-1]})"
    return StageResult(stage, status, (time.perf_counter() - t0) * 1000.0, detail)


def _do(st, models, cfg, shapes_dir):
    e = st.entry
    st.sax = {p: load_volume(e.sax[p]) for p in e.phases}
    st.lax_by_phase = {p: [load_volume(x) for x in lax_paths(e, p)] for p in e.phases}
    st.lax = st.lax_by_phase[e.phases[0]]
    return f"{len(st.sax)} SAX phases, {len(st.lax)} LAX views"


def _iqa(st, models, cfg, shapes_dir):
    ref = st.entry.phases[0]
    rep, anchors = assess_image(st.sax[ref], st.lax, models.iqa_basal, models.iqa_apical, cfg.iqa_threshold,
                                st.entry.subject_id, search_radius=cfg.search_radius)
    st.anchors = anchors
    if not rep.passed:
        raise _Gate(";".join(rep.reasons))
    return f"score={rep.score:.3f}"


def _od(st, models, cfg, shapes_dir):
    if st.anchors is None:
        st.anchors = detect_anchors(st.sax[st.entry.phases[0]], st.lax, cfg.search_radius)
    c = st.anchors.confidence
    return f"confidence={c[0]:.2f},{c[1]:.2f},{c[2]:.2f}"


def _mi(st, models, cfg, shapes_dir):
    st.init = initialize_pose(st.anchors, models.pdm)
    return f"scale={st.init.pose.scale:.2f}"


def _s(st, models, cfg, shapes_dir):
    mc = MatchConfig.from_config(cfg)
    init = st.init
    notes = []
    for n, p in enumerate(st.entry.phases):
        fit = match(st.sax[p], models.pdm, models.iam, init, mc)
        if n > 0:
            fit = _second_start(st, p, fit, models, mc, cfg)
        st.fits[p] = fit
        st.rasters[p] = rasterize(fit, st.sax[p])
        notes.append(f"p{p}:{fit.iterations_run}{'' if fit.converged else '*'}")
        init = propagate_timepoint(fit, st.anchors, models.pdm)
        if shapes_dir is not None:
            from .io import gt_filename
            name = gt_filename(st.entry.subject_id, p).replace("_GT_", "_FIT_")
            save_pointset(fit.shape, Path(shapes_dir) / name, st.entry.subject_id, p)
    return "iterations " + " ".join(notes)


def _second_start(st, p, fit, models, mc, cfg):
    """Also fit from anchors re-detected on this phase; keep the lower appearance cost (ties: previous phase)."""
    try:
        anchors = detect_anchors(st.sax[p], st.lax_by_phase.get(p) or st.lax, cfg.search_radius)
        alt = match(st.sax[p], models.pdm, models.iam, initialize_pose(anchors, models.pdm), mc)
    except VentriqError:
        return fit
    vol = st.sax[p]
    if appearance_cost(alt.shape, vol, models.iam, mc) < appearance_cost(fit.shape, vol, models.iam, mc):
        return alt
    return fit


def _sqa(st, models, cfg, shapes_dir):
    scores = []
    for p in st.entry.phases:
        rep = assess_segmentation(st.sax[p], st.fits[p], models.iam, models.sqa, cfg.sqa_threshold,
                                  st.entry.subject_id, st.rasters[p])
        scores.append(rep)
    worst = min(scores, key=lambda r: r.score)
    if not worst.passed:
        raise _Gate(";".join(worst.reasons))
    return f"min score={worst.score:.3f}"


def _q(st, models, cfg, shapes_dir):
    phases = st.entry.phases
    cbs = {p: contours_by_structure(st.rasters[p]) for p in phases}
    lv = []
    for p in phases:
        c = cbs[p].get("LV_endo", [])
        lv.append(simpson_volume(c, st.sax[p].spacing[2]) if c else 0.0)
    sel = select_phases(lv)
    ed, es = phases[sel.ed], phases[sel.es]
    st.indexes = compute_indexes(cbs[ed], cbs[es], st.sax[ed].spacing[2], cfg.density, ed, es)
    if not st.indexes.identities_hold():
        raise AssertionError("index identities violated")
    flags = list(st.indexes.warnings) + (["degenerate_phases"] if sel.degenerate else [])
    return f"ed={ed} es={es}" + (f" warnings={','.join(flags)}" if flags else "")


_STAGES = {Stage.DO: _do, Stage.IQA: _iqa, Stage.OD: _od, Stage.MI: _mi, Stage.S: _s, Stage.SQA: _sqa, Stage.Q: _q}


def process_subject(entry, models, cfg, shapes_dir=None):
    """Run the chain for one subject; returns (ResultRow, [StageResult]) without the sink stage."""
    t0 = time.perf_counter()
    st = SubjectState(entry)
    chain = []
    status, reason = "passed", ""
    for stage in ORDER[:-1]:
        r = run_stage(st, stage, models, cfg, shapes_dir)
        chain.append(r)
        if r.status == "gate_failed":
            status = "excluded_iqa" if stage == Stage.IQA else "excluded_sqa"
            reason = r.detail
            break
        if r.status == "error":
            status, reason = "error", f"{stage.value}: {r.detail}"
            break
    t_ms = (time.perf_counter() - t0) * 1000.0
    idx = None
    if status == "passed":
        idx = dict(zip(INDEX_COLUMNS, st.indexes.as_row().values()))
    return ResultRow(entry.subject_id, status, reason, idx, t_ms), chain


_WORKER = {}


def _init_worker(models, cfg, shapes_dir):
    _WORKER.update(models=models, cfg=cfg, shapes_dir=shapes_dir)


def _work(entry):
    return process_subject(entry, _WORKER["models"], _WORKER["cfg"], _WORKER["shapes_dir"])


def run_pipeline(manifest, models, cfg, workers: int = 1, shapes_dir=None):
    """Process every subject; returns (ResultsTable sorted by subject_id, RunReport)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    t0 = time.perf_counter()
    if shapes_dir is not None:
        Path(shapes_dir).mkdir(parents=True, exist_ok=True)
    entries = list(manifest.subjects)
    if workers == 1 or len(entries) <= 1:
        results = [process_subject(e, models, cfg, shapes_dir) for e in entries]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(models, cfg, shapes_dir)) as ex:
            results = list(ex.map(_work, entries, chunksize=1))
    table = ResultsTable()
    report = RunReport(n_input=len(entries), workers=workers, config=asdict(cfg))
    for row, chain in sorted(results, key=lambda rc: rc[0].subject_id):
        t = time.perf_counter()
        table.add(row)
        chain = chain + [StageResult(Stage.DS, "ok", (time.perf_counter() - t) * 1000.0, row.status)]
        report.chains[row.subject_id] = chain
        by = {r.stage: r for r in chain}
        if by.get(Stage.IQA) and by[Stage.IQA].status == "ok":
            report.n_passed_iqa += 1
        if by.get(Stage.SQA) and by[Stage.SQA].status == "ok":
            report.n_passed_sqa += 1
        if by.get(Stage.Q) and by[Stage.Q].status == "ok":
            report.n_quantified += 1
    report.wall_ms = (time.perf_counter() - t0) * 1000.0
    report.check()
    return table, report


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "stage", "status", "duration_ms", "detail"])
    for sid in sorted(report.chains):
        for r in report.chains[sid]:
            w.writerow([sid, r.stage.value, r.status, f"{r.duration_ms:.1f}", r.detail])
    return buf.getvalue()


def write_report(report: RunReport, path) -> None:
    """Stage chains as CSV plus a JSON sidecar with the counts and the effective config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(report), encoding="utf-8")
    summary = {k: getattr(report, k) for k in ("n_input", "n_passed_iqa", "n_passed_sqa", "n_quantified",
                                              "wall_ms", "workers")}
    summary["config"] = report.config
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = ["Stage", "StageResult", "RunReport", "run_stage", "process_subject", "run_pipeline", "write_report",
           "write_results", "validate_chain"]
