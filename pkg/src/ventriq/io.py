"""Data organisation and data sink: volume/point-set files, manifests, results tables."""
from __future__ import annotations

import csv
import io
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateEntry, FormatError
from .geometry import PointSet, VoxelVolume

VOLUME_MAGIC = "VENTRIQ 1"
POINTS_MAGIC = "VENTRIQ-PTS 1"
VOLUME_SUFFIX = ".vq"
POINTS_SUFFIX = ".pts"

INDEX_COLUMNS = ["LVEDV_ml", "LVESV_ml", "LVSV_ml", "LVEF_pct", "LVM_g",
                 "RVEDV_ml", "RVESV_ml", "RVSV_ml", "RVEF_pct"]
RESULT_COLUMNS = ["subject_id", "status", "reason", *INDEX_COLUMNS, "t_total_ms"]
MANIFEST_COLUMNS = ["subject_id", "phase", "view", "path", "gt_path"]
STATUSES = ("passed", "excluded_iqa", "excluded_sqa", "error")


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# volume files


def _read_header(f, path):
    lines = []
    while True:
        raw = f.readline()
        if not raw:
            raise FormatError("header not terminated by a blank line", path)
        try:
            line = raw.decode("utf-8").rstrip("\r\n")
        except UnicodeDecodeError:
            raise FormatError("header is not UTF-8", path)
        if line == "":
            return lines
        lines.append(line)
        if len(lines) > 64:
            raise FormatError("header too long", path)


def _parse_volume_header(lines, path):
    if not lines or lines[0].strip() != VOLUME_MAGIC:
        raise FormatError("magic mismatch", path)
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()

    def need(key, n, conv):
        if key not in fields:
            raise FormatError(f"missing header field {key!r}", path)
        vals = fields[key]
        if len(vals) != n:
            raise FormatError(f"header field {key!r} expects {n} values", path)
        try:
            return [conv(v) for v in vals]
        except ValueError:
            raise FormatError(f"header field {key!r} is malformed", path)

    hdr = {
        "subject": need("subject", 1, str)[0],
        "view": need("view", 1, str)[0],
        "phase": need("phase", 1, int)[0],
        "dims": need("dims", 3, int),
        "spacing": need("spacing", 3, float),
        "origin": need("origin", 3, float),
        "orient": need("orient", 9, float),
        "series": fields.get("series", [""])[0] if fields.get("series") else "",
    }
    if hdr["view"] not in ("SAX", "LAX"):
        raise FormatError("view must be SAX or LAX", path)
    if min(hdr["dims"]) < 1:
        raise FormatError("dims must be positive", path)
    if min(hdr["spacing"]) <= 0:
        raise FormatError("spacing must be positive", path)
    return hdr


def read_volume_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        return _parse_volume_header(_read_header(f, path), path)


def save_volume(volume: VoxelVolume, path) -> None:
    R = volume.orientation
    lines = [
        VOLUME_MAGIC,
        f"subject {volume.subject or 'unknown'}",
        f"view {volume.view.value}",
        f"phase {volume.phase}",
    ]
    if volume.series:
        lines.append(f"series {volume.series}")
    lines += [
        "dims {} {} {}".format(*volume.dims),
        "spacing " + " ".join(_fmt(s) for s in volume.spacing),
        "origin " + " ".join(_fmt(o) for o in volume.origin),
        "orient " + " ".join(_fmt(v) for v in R.reshape(-1)),
    ]
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    data = np.asarray(volume.data)
    if data.dtype.kind == "f":
        data = np.clip(np.rint(data), 0, 65535)
    payload = data.transpose(2, 1, 0).astype("<u2").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_volume(path) -> VoxelVolume:
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise FormatError(f"cannot open: {e}", path)
    with f:
        hdr = _parse_volume_header(_read_header(f, path), path)
        payload = f.read()
    nx, ny, nz = hdr["dims"]
    n = nx * ny * nz
    if len(payload) != 2 * n:
        raise FormatError(f"data length {len(payload) // 2} samples, expected {n}", path)
    data = np.frombuffer(payload, dtype="<u2").reshape(nz, ny, nx).transpose(2, 1, 0)
    try:
        return VoxelVolume(
            dims=(nx, ny, nz), spacing=hdr["spacing"], origin=hdr["origin"],
            orientation=np.array(hdr["orient"]).reshape(3, 3), data=data,
            phase=hdr["phase"], view=hdr["view"], subject=hdr["subject"], series=hdr["series"],
        )
    except ValueError as e:
        raise FormatError(str(e), path)


# --------------------------------------------------------------------------
# point-set files


def save_pointset(ps: PointSet, path, subject: str = "", phase: int = 0) -> None:
    n, t = len(ps), ps.triangles.shape[0]
    header = f"{POINTS_MAGIC}\nsubject {subject or 'unknown'}\nphase {phase}\ncounts {n} {t}\n\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(ps.points.astype("<f8").tobytes())
        f.write(ps.labels.astype("u1").tobytes())
        f.write(ps.triangles.astype("<u4").tobytes())


def read_pointset_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        lines = _read_header(f, path)
    return _parse_points_header(lines, path)


def _parse_points_header(lines, path):
    if not lines or lines[0].strip() != POINTS_MAGIC:
        raise FormatError("magic mismatch", path)
    fields = dict(line.partition(" ")[::2] for line in lines[1:])
    try:
        n, t = (int(v) for v in fields["counts"].split())
        return {"subject": fields["subject"].strip(), "phase": int(fields["phase"]), "n": n, "t": t}
    except (KeyError, ValueError):
        raise FormatError("malformed point-set header", path)


def load_pointset(path) -> PointSet:
    path = Path(path)
    with open(path, "rb") as f:
        hdr = _parse_points_header(_read_header(f, path), path)
        payload = f.read()
    n, t = hdr["n"], hdr["t"]
    expected = 24 * n + n + 12 * t
    if len(payload) != expected:
        raise FormatError(f"data length {len(payload)} bytes, expected {expected}", path)
    pts = np.frombuffer(payload, "<f8", 3 * n).reshape(n, 3)
    labels = np.frombuffer(payload, "u1", n, offset=24 * n)
    tri = np.frombuffer(payload, "<u4", 3 * t, offset=25 * n).reshape(t, 3)
    return PointSet(pts, labels, tri.astype(np.int64))


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    phases: tuple
    sax: dict  # phase -> path
    lax: dict  # phase -> tuple of paths
    gt: dict = field(default_factory=dict)  # phase -> path


@dataclass(frozen=True)
class CohortManifest:
    subjects: tuple = ()

    def __len__(self):
        return len(self.subjects)

    def subject(self, subject_id) -> SubjectEntry:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def rows(self):
        out = []
        for s in self.subjects:
            for p in s.phases:
                out.append((s.subject_id, p, "SAX", str(s.sax[p]), str(s.gt.get(p, ""))))
                for lp in s.lax.get(p, ()):
                    out.append((s.subject_id, p, "LAX", str(lp), ""))
        return out


def manifest_from_rows(rows, check_paths=True) -> CohortManifest:
    by_subject = {}
    for sid, phase, view, path, gt in rows:
        phase = int(phase)
        d = by_subject.setdefault(sid, {"sax": {}, "lax": {}, "gt": {}})
        if view == "SAX":
            if phase in d["sax"]:
                raise DuplicateEntry(f"duplicate SAX volume for subject {sid} phase {phase}")
            d["sax"][phase] = path
            if gt:
                d["gt"][phase] = gt
        elif view == "LAX":
            d["lax"].setdefault(phase, []).append(path)
        else:
            raise FormatError(f"unknown view {view!r} in manifest")
    subjects = []
    for sid in sorted(by_subject):
        d = by_subject[sid]
        phases = tuple(sorted(d["sax"]))
        if not phases:
            raise FormatError(f"subject {sid} has no SAX volumes")
        if check_paths:
            for p in [*d["sax"].values(), *d["gt"].values(), *(x for v in d["lax"].values() for x in v)]:
                if not Path(p).exists():
                    raise FormatError("referenced file does not exist", p)
        subjects.append(SubjectEntry(
            sid, phases, dict(d["sax"]),
            {p: tuple(sorted(v)) for p, v in d["lax"].items()}, dict(d["gt"]),
        ))
    return CohortManifest(tuple(subjects))


def write_manifest(manifest: CohortManifest, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for row in manifest.rows():
        w.writerow(row)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path, check_paths=True) -> CohortManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot read manifest: {e}", path)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != MANIFEST_COLUMNS:
        raise FormatError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}", path)
    base = path.parent
    rows = []
    for r in reader:
        if not r:
            continue
        if len(r) != 5:
            raise FormatError(f"manifest row has {len(r)} fields", path)
        sid, phase, view, p, gt = r
        p = str(base / p) if p and not os.path.isabs(p) else p
        gt = str(base / gt) if gt and not os.path.isabs(gt) else gt
        rows.append((sid, phase, view, p, gt))
    return manifest_from_rows(rows, check_paths=check_paths)


def relative_manifest(manifest: CohortManifest, base) -> CohortManifest:
    """Copy of ``manifest`` with paths relative to ``base`` (for portable manifest files)."""
    rows = [(s, p, v, os.path.relpath(a, base), os.path.relpath(g, base) if g else "")
            for s, p, v, a, g in manifest.rows()]
    return manifest_from_rows(rows, check_paths=False)


def volume_filename(subject, view, phase, series="") -> str:
    tag = f"_{series}" if series else ""
    return f"{subject}_{view}{tag}_p{phase:02d}{VOLUME_SUFFIX}"


def gt_filename(subject, phase) -> str:
    return f"{subject}_GT_p{phase:02d}{POINTS_SUFFIX}"


def organize(raw_dir, out_dir=None, manifest_path=None) -> CohortManifest:
    """Index (and optionally copy into ``<subject>/<view>/``) every volume under ``raw_dir``.

    Files are identified by header content, never by name. Ground-truth
    point sets (``VENTRIQ-PTS`` headers) are attached to the SAX row of the
    matching subject/phase.
    """
    raw_dir = Path(raw_dir)
    seen = {}
    gts = {}
    for p in sorted(raw_dir.rglob("*")):
        if not p.is_file():
            continue
        with open(p, "rb") as f:
            head = f.read(16)
        if head.startswith(POINTS_MAGIC.encode()):
            h = read_pointset_header(p)
            key = (h["subject"], h["phase"])
            if key in gts:
                raise DuplicateEntry(f"duplicate ground truth for {key}: {gts[key]} and {p}")
            gts[key] = p
            continue
        if not head.startswith(VOLUME_MAGIC.encode()):
            continue
        h = read_volume_header(p)
        key = (h["subject"], h["phase"], h["view"], h["series"])
        if key in seen:
            raise DuplicateEntry(f"duplicate subject/phase/view {key[:3]}: {seen[key]} and {p}")
        seen[key] = p

    rows = []
    for (sid, phase, view, series), src in sorted(seen.items()):
        dst = src
        if out_dir is not None:
            dst = Path(out_dir) / sid / view / volume_filename(sid, view, phase, series)
            if Path(src).resolve() != dst.resolve():
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, dst)
        gt = ""
        if view == "SAX" and (sid, phase) in gts:
            g = gts[(sid, phase)]
            if out_dir is not None:
                gdst = Path(out_dir) / sid / "GT" / gt_filename(sid, phase)
                if Path(g).resolve() != gdst.resolve():
                    gdst.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(g, gdst)
                g = gdst
            gt = str(g)
        rows.append((sid, phase, view, str(dst), gt))
    manifest = manifest_from_rows(rows, check_paths=False)
    if manifest_path is not None:
        base = Path(manifest_path).resolve().parent
        write_manifest(relative_manifest(manifest, base), manifest_path)
    return manifest


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    subject_id: str
    status: str
    reason: str = ""
    indexes: dict | None = None  # INDEX_COLUMNS -> value
    t_total_ms: float | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == "passed":
            if not self.indexes or any(k not in self.indexes for k in INDEX_COLUMNS):
                raise ValueError("passed rows need a complete index record")


@dataclass
class ResultsTable:
    rows: dict = field(default_factory=dict)

    def add(self, row: ResultRow) -> None:
        if row.subject_id in self.rows:
            raise DuplicateEntry(f"duplicate result row for {row.subject_id}")
        self.rows[row.subject_id] = row

    def __len__(self):
        return len(self.rows)

    def sorted_rows(self):
        return [self.rows[k] for k in sorted(self.rows)]


def results_csv(table: ResultsTable, timing=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in table.sorted_rows():
        idx = r.indexes or {}
        vals = [f"{idx[c]:.6f}" if c in idx else "" for c in INDEX_COLUMNS]
        t = f"{r.t_total_ms:.1f}" if (timing and r.t_total_ms is not None) else ""
        w.writerow([r.subject_id, r.status, r.reason, *vals, t])
    return buf.getvalue()


def write_results(table: ResultsTable, path, timing=True) -> None:
    """Write the results CSV; ``timing=False`` blanks the wall-clock column for reproducible bytes."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(results_csv(table, timing), encoding="utf-8")
    except OSError as e:
        raise IOError(f"cannot write results to {path}: {e}") from e


def read_results(path) -> ResultsTable:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RESULT_COLUMNS:
            raise FormatError("unexpected results header", path)
        table = ResultsTable()
        for r in reader:
            idx = None
            if r["status"] == "passed":
                idx = {c: float(r[c]) for c in INDEX_COLUMNS}
            t = float(r["t_total_ms"]) if r["t_total_ms"] else None
            table.add(ResultRow(r["subject_id"], r["status"], r["reason"], idx, t))
    return table
