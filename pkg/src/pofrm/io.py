"""File formats: gapped sample matrices, dataset manifests, reports and models.

Sample files are comma-separated numbers where the token ``NaN`` (any case)
marks an unobserved value. A curve file holds one subject per row. A surface
file holds one subject as a matrix with one row per ``t1`` value and one
column per ``t2`` value; internally surfaces are flattened column-major
(``t1`` fastest). All writes go to a temporary file that is then renamed.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import make_basis, make_basis_2d
from .errors import (InvalidArgumentError, ParseError, PofrmError, SchemaError,
                     VersionMismatchError)
from .metrics import ReplicateReport
from .mixedmodel import MixedModelFit
from .model import CoefficientField, CovariateSpec, Dataset, PofrFit, PofrSpec
from .smoothing import FunctionalSample

MODEL_FORMAT = "pofrm-model/1"
MANIFEST_FORMAT = "pofrm-manifest/1"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_rows(path) -> list[list[float]]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col, tok in enumerate(row, start=1):
                tok = tok.strip()
                if tok.lower() == "nan":
                    vals.append(math.nan)
                    continue
                try:
                    v = float(tok)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}:{col}: not a number: {tok!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{lineno}:{col}: non-finite value {tok!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: empty file")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ParseError(f"{path}: row {i + 1} has {len(r)} fields, expected {width}")
    return rows


def read_samples(path, dim: int, grid) -> list[FunctionalSample]:
    """Read partially observed samples.

    Parameters
    ----------
    path : path-like
        A curve file (``dim=1``, one row per subject), a surface file or a
        directory of surface files (``dim=2``, one subject per file, sorted by
        name).
    grid : array or pair of arrays
        Evaluation points; for surfaces ``(t1, t2)``.
    """
    path = Path(path)
    if dim == 1:
        g = np.asarray(grid[0] if isinstance(grid, (tuple, list)) and np.ndim(grid[0]) else grid, dtype=float)
        rows = np.array(_parse_rows(path))
        if rows.shape[1] != g.size:
            raise ParseError(f"{path}: {rows.shape[1]} columns for a {g.size}-point grid")
        return [FunctionalSample.from_array(r, (g,)) for r in rows]
    if dim != 2:
        raise InvalidArgumentError(f"dim must be 1 or 2, got {dim}")
    t1, t2 = (np.asarray(x, dtype=float) for x in grid)
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    if not files:
        raise ParseError(f"{path}: no sample files")
    out = []
    for f in files:
        m = np.array(_parse_rows(f))
        if m.shape != (t1.size, t2.size):
            raise ParseError(f"{f}: matrix {m.shape} does not match grid {(t1.size, t2.size)}")
        out.append(FunctionalSample.from_array(m, (t1, t2)))
    return out


def _fmt(v) -> str:
    return "NaN" if not np.isfinite(v) else repr(float(v))


def write_samples(samples, path) -> None:
    """Write curves to one file, or surfaces to a directory of per-subject files."""
    path = Path(path)
    if samples[0].dim == 1:
        lines = [",".join(_fmt(v) for v in np.where(s.mask, s.values, np.nan)) for s in samples]
        atomic_write_text(path, "\n".join(lines) + "\n")
        return
    path.mkdir(parents=True, exist_ok=True)
    width = len(str(len(samples)))
    for i, s in enumerate(samples):
        m = np.where(s.mask, s.values, np.nan)
        text = "\n".join(",".join(_fmt(v) for v in row) for row in m) + "\n"
        atomic_write_text(path / f"subject_{i:0{width}d}.csv", text)


def read_responses(path) -> np.ndarray:
    rows = _parse_rows(path)
    if any(len(r) != 1 for r in rows):
        raise ParseError(f"{path}: responses must be one value per line")
    y = np.array([r[0] for r in rows])
    if np.any(np.isnan(y)):
        raise ParseError(f"{path}: missing responses are not supported")
    return y


def _grid_from(obj, where: str) -> np.ndarray:
    if isinstance(obj, dict):
        try:
            return np.linspace(float(obj["start"]), float(obj["stop"]), int(obj["num"]))
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"{where}: grid needs start, stop and num") from None
    if isinstance(obj, list) and obj and all(isinstance(v, (int, float)) for v in obj):
        return np.asarray(obj, dtype=float)
    raise SchemaError(f"{where}: invalid grid definition")


@dataclass(frozen=True)
class DatasetManifest:
    """Location and layout of a dataset on disk.

    ``covariates`` entries hold ``dim``, ``path`` and ``grids`` (a list of one
    or two grids). Relative paths are resolved against the manifest file.
    """

    response: Path
    covariates: tuple
    version: str = MANIFEST_FORMAT

    def to_json(self, base: Path) -> str:
        def rel(p):
            try:
                return str(Path(p).relative_to(base))
            except ValueError:
                return str(p)
        doc = {
            "format": self.version,
            "response": rel(self.response),
            "layout": "curves: one subject per row; surfaces: one file per subject, rows index t1",
            "covariates": [{"dim": c["dim"], "path": rel(c["path"]),
                            "grids": [list(map(float, g)) for g in c["grids"]]} for c in self.covariates],
        }
        return json.dumps(doc, indent=2)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")
    if doc.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise VersionMismatchError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    base = path.parent
    try:
        response = base / doc["response"]
        covs = []
        for k, c in enumerate(doc["covariates"]):
            dim = int(c["dim"])
            grids = [_grid_from(g, f"{path}: covariate {k}") for g in c["grids"]]
            if len(grids) != dim:
                raise SchemaError(f"{path}: covariate {k} needs {dim} grid(s)")
            covs.append({"dim": dim, "path": base / c["path"], "grids": grids})
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed manifest ({exc!r})") from None
    if not covs:
        raise SchemaError(f"{path}: no covariates listed")
    for p in [response] + [c["path"] for c in covs]:
        if not p.exists():
            raise FileNotFoundError(f"missing file: {p}")
    return DatasetManifest(response, tuple(covs))


def load_dataset(manifest: DatasetManifest) -> Dataset:
    y = read_responses(manifest.response)
    covs = []
    for k, c in enumerate(manifest.covariates):
        samples = read_samples(c["path"], c["dim"], c["grids"] if c["dim"] == 2 else c["grids"][0])
        if len(samples) != y.size:
            raise SchemaError(f"covariate {k} has {len(samples)} subjects, responses have {y.size}")
        covs.append(samples)
    return Dataset(y, covs)


def write_dataset(dataset: Dataset, directory) -> Path:
    """Export a dataset with its manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    resp = directory / "response.csv"
    atomic_write_text(resp, "".join(f"{float(v)!r}\n" for v in dataset.y))
    covs = []
    for j, samples in enumerate(dataset.covariates):
        p = directory / (f"covariate_{j}.csv" if samples[0].dim == 1 else f"covariate_{j}")
        write_samples(samples, p)
        covs.append({"dim": samples[0].dim, "path": p, "grids": samples[0].grids})
    manifest = DatasetManifest(resp, tuple(covs))
    out = directory / "manifest.json"
    atomic_write_text(out, manifest.to_json(directory))
    return out


# ---------------------------------------------------------------- reports

def _g7(v) -> str:
    return "nan" if v is None or not np.isfinite(v) else f"{v:.7g}"


def _round6(v):
    return float(f"{v:.6g}") if np.isfinite(v) else None


def summarize(reports) -> dict:
    """``{scenario: {method: {metric: {mean, sd, n}}}}`` over successful replicates."""
    acc: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    status: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(int)))
    for r in reports:
        status[r.scenario][r.method][r.status] += 1
        if r.status != "ok":
            continue
        for k, v in list(r.values.items()) + [(f"time_{k}", v) for k, v in r.times.items()]:
            acc[r.scenario][r.method][k].append(v)
    out = {}
    for scen in status:
        out[scen] = {}
        for meth in status[scen]:
            entry = {"replicates": dict(status[scen][meth])}
            for k, vals in acc[scen][meth].items():
                a = np.asarray(vals, dtype=float)
                a = a[np.isfinite(a)]
                mean = float(a.mean()) if a.size else float("nan")
                sd = float(a.std(ddof=1)) if a.size > 1 else float("nan")
                entry[k] = {"mean": _round6(mean), "sd": _round6(sd), "n": int(a.size)}
            out[scen][meth] = entry
    return out


def write_report(reports, directory) -> dict:
    """Write ``replicates.csv``, ``times.csv`` and ``summary.json``; return the summary.

    Per-replicate values use 7 significant digits, so reading them back stays
    within 1e-6 relative; the summary is rounded to 6. Timings live in their own
    file so the metrics file is reproducible byte for byte.
    """
    reports = list(reports)
    if not reports:
        raise InvalidArgumentError("no replicate reports to write")
    directory = Path(directory)
    metrics = sorted({k for r in reports for k in r.values})
    timers = sorted({k for r in reports for k in r.times})
    head = ["scenario", "method", "rep", "status"]
    lines = [",".join(head + metrics)]
    tlines = [",".join(head + timers)]
    for r in reports:
        base = [r.scenario, r.method, str(r.rep_index), r.status]
        lines.append(",".join(base + [_g7(r.values.get(k)) for k in metrics]))
        tlines.append(",".join(base + [_g7(r.times.get(k)) for k in timers]))
    atomic_write_text(directory / "replicates.csv", "\n".join(lines) + "\n")
    atomic_write_text(directory / "times.csv", "\n".join(tlines) + "\n")
    errors = [f"{r.scenario},{r.method},{r.rep_index},{r.status},{r.message}" for r in reports if r.status != "ok"]
    if errors:
        atomic_write_text(directory / "errors.log", "\n".join(errors) + "\n")
    summary = summarize(reports)
    atomic_write_text(directory / "summary.json",
                      json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return summary


def read_report(directory) -> list[ReplicateReport]:
    directory = Path(directory)
    out = []
    with open(directory / "replicates.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: float(v) for k, v in row.items() if k not in ("scenario", "method", "rep", "status")}
            out.append(ReplicateReport(row["scenario"], row["method"], int(row["rep"]),
                                       {k: v for k, v in vals.items() if not math.isnan(v)},
                                       status=row["status"]))
    return out


# ---------------------------------------------------------------- models

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def model_to_dict(result: PofrFit) -> dict:
    spec = result.spec
    m = result.mixed
    return {
        "format": MODEL_FORMAT,
        "family": m.family,
        "spec": {
            "covariates": [{"dim": c.dim, "cov_basis": list(c.cov_sizes), "coef_basis": list(c.coef_sizes),
                            "degree": c.degree} for c in spec.covariates],
            "smoothing_lambdas": None if spec.smoothing_lambdas is None
            else [_floats(l) for l in spec.smoothing_lambdas],
            "shared_smoothing": spec.shared_smoothing,
            "lambdas": None if spec.lambdas is None else _floats(spec.lambdas),
            "tol": spec.tol, "max_iter": spec.max_iter, "refine": spec.refine,
        },
        "covariates": [{"grids": [_floats(g) for g in grids],
                        "smoothing_lambda": None if lam is None else _floats(lam)}
                       for grids, lam in zip(result.grids, result.smoothing_lambdas or [None] * len(result.grids))],
        "theta": _floats(m.theta),
        "nu": _floats(m.nu),
        "delta": _floats(m.delta),
        "tau2": _floats(m.tau2),
        "ed": _floats(m.ed),
        "frozen": [bool(v) for v in m.frozen],
        "component_names": list(m.component_names),
        "dispersion": float(m.dispersion),
        "deviance": float(m.deviance),
        "iterations": int(m.iterations),
        "converged": bool(m.converged),
        "eta": _floats(m.eta),
        "metadata": {"timing": result.timing, "cache_stats": result.cache_stats,
                     "normal_parameterization": "mean, standard deviation"},
    }


def save_model(result: PofrFit, path) -> None:
    """Serialize a fit to versioned JSON; floats round-trip exactly."""
    atomic_write_text(path, json.dumps(model_to_dict(result), indent=1, allow_nan=False) + "\n")


def _require(doc, key, kind, where="model"):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    val = doc[key]
    if kind is not None and not isinstance(val, kind):
        raise SchemaError(f"{where}: field {key!r} has type {type(val).__name__}")
    return val


def model_from_dict(doc: dict) -> PofrFit:
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    fmt = _require(doc, "format", str)
    if fmt != MODEL_FORMAT:
        raise VersionMismatchError(f"model format {fmt!r} is not {MODEL_FORMAT!r}")
    try:
        s = _require(doc, "spec", dict)
        covs = tuple(CovariateSpec(int(c["dim"]), tuple(c["cov_basis"]), tuple(c["coef_basis"]), int(c["degree"]))
                     for c in _require(s, "covariates", list, "spec"))
        sl = s.get("smoothing_lambdas")
        spec = PofrSpec(covs, family=_require(doc, "family", str),
                        smoothing_lambdas=None if sl is None else tuple(tuple(l) for l in sl),
                        shared_smoothing=bool(s.get("shared_smoothing", False)),
                        lambdas=None if s.get("lambdas") is None else tuple(s["lambdas"]),
                        tol=float(s["tol"]), max_iter=int(s["max_iter"]), refine=int(s["refine"]))
        cov_docs = _require(doc, "covariates", list)
        if len(cov_docs) != len(covs):
            raise SchemaError("covariate metadata does not match the spec")
        theta = np.asarray(_require(doc, "theta", list), dtype=float)
        grids, cov_bases, betas, lams = [], [], [], []
        start = 1
        for c, cd in zip(covs, cov_docs):
            g = tuple(np.asarray(x, dtype=float) for x in cd["grids"])
            doms = [(float(x[0]), float(x[-1])) for x in g]
            if c.dim == 1:
                cb = make_basis(*doms[0], c.cov_sizes[0], c.degree)
                kb = make_basis(*doms[0], c.coef_sizes[0], c.degree)
            else:
                cb = make_basis_2d(doms[0], doms[1], c.cov_sizes, c.degree)
                kb = make_basis_2d(doms[0], doms[1], c.coef_sizes, c.degree)
            n = kb.n_basis
            betas.append(CoefficientField(kb, theta[start:start + n].copy()))
            start += n
            grids.append(g)
            cov_bases.append(cb)
            lam = cd.get("smoothing_lambda")
            lams.append(None if lam is None else (lam[0] if len(lam) == 1 else tuple(lam)))
        if start != theta.size:
            raise SchemaError(f"theta has {theta.size} entries, bases need {start}")
        eta = np.asarray(doc.get("eta", []), dtype=float)
        mixed = MixedModelFit(
            nu=np.asarray(_require(doc, "nu", list), dtype=float),
            delta=np.asarray(_require(doc, "delta", list), dtype=float),
            tau2=np.asarray(_require(doc, "tau2", list), dtype=float), theta=theta,
            family=spec.family, dispersion=float(_require(doc, "dispersion", (int, float))),
            eta=eta, mu=eta if spec.family == "gaussian" else 1.0 / (1.0 + np.exp(-eta)),
            iterations=int(_require(doc, "iterations", int)), converged=bool(_require(doc, "converged", bool)),
            ed=np.asarray(doc.get("ed", []), dtype=float), frozen=np.asarray(doc.get("frozen", []), dtype=bool),
            deviance=float(doc.get("deviance", math.nan)), component_names=tuple(doc.get("component_names", ())),
        )
    except PofrmError as exc:
        if isinstance(exc, (SchemaError, VersionMismatchError)):
            raise
        raise SchemaError(f"invalid model: {exc}") from None
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"invalid model: {exc!r}") from None
    meta = doc.get("metadata", {})
    return PofrFit(mixed=mixed, beta_hats=betas, alpha_hat=float(theta[0]), spec=spec, cov_bases=cov_bases,
                   grids=grids, smoothing_lambdas=lams, timing=meta.get("timing", {}),
                   cache_stats=meta.get("cache_stats", []))


def load_model(path) -> PofrFit:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a complete JSON document ({exc.msg})") from None
    return model_from_dict(doc)


def write_curve_table(path, header, columns) -> None:
    cols = [np.asarray(c, dtype=float).ravel() for c in columns]
    lines = [",".join(header)]
    lines += [",".join(repr(float(c[i])) for c in cols) for i in range(cols[0].size)]
    atomic_write_text(path, "\n".join(lines) + "\n")
