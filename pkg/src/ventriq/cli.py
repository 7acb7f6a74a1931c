"""Command-line front door: phantom, organize, train, run, eval, stats."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import FORMAT_VERSIONS, __version__
from .config import Config
from .errors import CohortAbort, ConfigError, DataError, DegenerateVariance, InsufficientData, VentriqError

log = logging.getLogger("ventriq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    fv = " ".join(f"{k}={v}" for k, v in FORMAT_VERSIONS.items())
    p = _Parser(prog="ventriq", description="Bi-ventricular shape-model segmentation and quantification pipeline.")
    p.add_argument("--version", action="version", version=f"ventriq {__version__} (formats: {fv})")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic cohort")
    s.add_argument("--spec", help="phantom spec file (key = value)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-subjects", type=int)
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("organize", help="scan raw volumes into the subject/view layout and a manifest")
    s.add_argument("--raw", required=True)
    s.add_argument("--out", help="copy files into OUT/<subject>/<view>/")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("train", help="train shape, appearance and quality models")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="model directory")
    s.add_argument("--corpus", help="QA corpus CSV (synthesized from the training set when omitted)")

    s = sub.add_parser("run", help="segment and quantify a cohort")
    s.add_argument("--manifest", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="results CSV")
    s.add_argument("--report", required=True, help="stage report CSV (JSON summary written alongside)")
    s.add_argument("--shapes", help="directory for fitted shapes (default: <out>_shapes)")
    s.add_argument("--no-timing", action="store_true", help="leave t_total_ms blank for reproducible output")

    s = sub.add_parser("eval", help="compare fitted shapes with ground truth")
    s.add_argument("--manifest", required=True)
    s.add_argument("--shapes", required=True)
    s.add_argument("--out", required=True, help="metrics CSV")
    s.add_argument("--manual", help="write ground-truth (manual) indexes in results format")

    s = sub.add_parser("stats", help="reference ranges, Bland-Altman, correlation and K-S tests")
    s.add_argument("--results", required=True)
    s.add_argument("--manual", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--alpha", type=float, default=0.05)
    return p


def effective_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    return cfg.with_overrides(seed=args.seed)


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, cfg):
    from .phantom import PhantomSpec, generate_cohort, load_spec

    spec = load_spec(args.spec) if args.spec else PhantomSpec()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.n_subjects is not None:
        over["n_subjects"] = args.n_subjects
    if over:
        from dataclasses import replace
        spec = replace(spec, **over)
    manifest, _ = generate_cohort(spec, args.out, workers=args.workers)
    log.info("wrote %d subjects to %s", len(manifest), args.out)


def cmd_organize(args, cfg):
    from .io import organize

    m = organize(args.raw, args.out, args.manifest)
    log.info("organized %d subjects", len(m))


def cmd_train(args, cfg):
    from .io import read_manifest
    from .models import train_models

    manifest = read_manifest(args.manifest)
    train_models(manifest, cfg, args.corpus, args.out, log=log.info)


def cmd_run(args, cfg):
    from .io import read_manifest, write_results
    from .models import load_models
    from .pipeline import run_pipeline, write_report

    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    models = load_models(args.models)
    manifest = read_manifest(args.manifest)
    shapes = args.shapes or str(Path(args.out).with_suffix("")) + "_shapes"
    table, report = run_pipeline(manifest, models, cfg, args.workers, shapes)
    write_results(table, args.out, timing=not args.no_timing)
    write_report(report, args.report)
    log.info("input %d, passed IQA %d, passed SQA %d, quantified %d", report.n_input, report.n_passed_iqa,
             report.n_passed_sqa, report.n_quantified)


EVAL_COLUMNS = ["subject_id", "structure", "dsc", "mcd_mm", "hd_mm"]
EVAL_STRUCTURES = ("LV_endo", "LV_myo", "RV_endo")


def evaluate_subject(entry, shapes_dir, density=1.05):
    """Metric rows (ED/ES averaged) and the ground-truth index record for one subject."""
    from .evalstats import structure_metrics
    from .io import gt_filename, load_pointset, load_volume
    from .matcher import rasterize
    from .models import ed_es_phases
    from .quantify import compute_indexes, contours_by_structure

    gts = {p: load_pointset(path) for p, path in sorted(entry.gt.items())}
    ed, es = ed_es_phases(gts)
    per = {s: [] for s in EVAL_STRUCTURES}
    cbs = {}
    for p in (ed, es):
        fit_path = Path(shapes_dir) / gt_filename(entry.subject_id, p).replace("_GT_", "_FIT_")
        vol = load_volume(entry.sax[p])
        rg = rasterize(gts[p], vol)
        cbs[p] = contours_by_structure(rg)
        if not fit_path.exists():
            continue
        rf = rasterize(load_pointset(fit_path), vol)
        for s in EVAL_STRUCTURES:
            per[s].append(structure_metrics(rf, rg, s))
    rows = []
    for s in EVAL_STRUCTURES:
        if per[s]:
            rows.append((entry.subject_id, s, np.mean([m.dsc for m in per[s]]),
                         np.nanmean([m.mcd for m in per[s]]), np.nanmean([m.hd for m in per[s]])))
    sz = load_volume(entry.sax[ed]).spacing[2]
    return rows, compute_indexes(cbs[ed], cbs[es], sz, density, ed, es)


def cmd_eval(args, cfg):
    from .io import INDEX_COLUMNS, ResultRow, ResultsTable, read_manifest, write_results

    manifest = read_manifest(args.manifest)
    rows, manual = [], ResultsTable()
    for e in manifest.subjects:
        if len(e.gt) < 2:
            continue
        r, rec = evaluate_subject(e, args.shapes, cfg.density)
        rows += r
        manual.add(ResultRow(e.subject_id, "passed", "", dict(zip(INDEX_COLUMNS, rec.as_row().values()))))
    if not rows:
        raise InsufficientData("no subject had both ground truth and fitted shapes")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for sid, s, d, m, h in rows:
        w.writerow([sid, s, f"{d:.6f}", f"{m:.6f}", f"{h:.6f}"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    if args.manual:
        write_results(manual, args.manual, timing=False)
    for s in EVAL_STRUCTURES:
        d = [r[2] for r in rows if r[1] == s]
        if d:
            log.info("%s mean DSC %.3f over %d subjects", s, float(np.mean(d)), len(d))


def cmd_stats(args, cfg):
    from .evalstats import bland_altman, ks_two_sample, pearson_corr, reference_ranges
    from .io import INDEX_COLUMNS, read_results

    auto = read_results(args.results)
    manual = read_results(args.manual)
    common = sorted(s for s, r in auto.rows.items()
                    if r.status == "passed" and s in manual.rows and manual.rows[s].status == "passed")
    passed = [r.indexes for r in auto.sorted_rows() if r.status == "passed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def write(name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        (out / name).write_text(buf.getvalue(), encoding="utf-8")

    rr = reference_ranges(passed)
    mr = reference_ranges([manual.rows[s].indexes for s in common]) if len(common) >= 2 else {}
    write("reference_ranges.csv", ["index", "source", "mean", "sd", "n", "summary"],
          [[k, src, f"{m:.6f}", f"{s:.6f}", n, f"{m:.0f} ± {s:.0f}"]
           for src, table in (("auto", rr), ("manual", mr)) for k, (m, s, n) in table.items()])
    ba_rows, ks_rows = [], []
    for k in INDEX_COLUMNS:
        pairs = [(manual.rows[s].indexes[k], auto.rows[s].indexes[k]) for s in common]
        write(f"plot_{k}.csv", ["subject_id", "manual", "auto", "mean", "difference"],
              [[s, f"{m:.6f}", f"{a:.6f}", f"{(m + a) / 2:.6f}", f"{a - m:.6f}"] for s, (m, a) in zip(common, pairs)])
        if len(pairs) < 2:
            continue
        ba = bland_altman(pairs)
        try:
            r = f"{pearson_corr(pairs):.6f}"
        except DegenerateVariance:
            r = ""
        ba_rows.append([k, ba.n, f"{ba.bias:.6f}", f"{ba.loa_low:.6f}", f"{ba.loa_high:.6f}", r])
        ks = ks_two_sample([p[0] for p in pairs], [p[1] for p in pairs], args.alpha)
        ks_rows.append([k, len(pairs), f"{ks.d_statistic:.6f}", f"{ks.critical_value:.6f}", int(ks.reject)])
    write("bland_altman.csv", ["index", "n", "bias", "loa_low", "loa_high", "pearson_r"], ba_rows)
    write("ks_tests.csv", ["index", "n", "d_statistic", "critical_value", "reject"], ks_rows)
    log.info("stats over %d paired subjects written to %s", len(common), out)


COMMANDS = {"phantom": cmd_phantom, "organize": cmd_organize, "train": cmd_train, "run": cmd_run,
            "eval": cmd_eval, "stats": cmd_stats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = effective_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"ventriq: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CohortAbort as e:
        print(f"ventriq: aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (DataError, ConfigError) as e:
        print(f"ventriq: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except VentriqError as e:
        print(f"ventriq: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"ventriq: I/O error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
