"""Command line interface: ``pofrm {simulate,fit,predict,benchmark}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes into a fresh timestamped directory under ``--out``
(default ``$POFRM_OUTPUT_DIR`` or ``./pofrm_runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import io
from .basis import BasisSystem2D
from .errors import (InvalidArgumentError, ParseError, PofrmError, SchemaError,
                     VersionMismatchError)
from .metrics import auc, misclassification, rmse, roc_points
from .model import CovariateSpec, PofrSpec, eval_beta, fit, predict
from .simulation import GAP_GRID, PCT_GRID, ScenarioConfig, run_scenario

logger = logging.getLogger("pofrm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_ERRORS = (InvalidArgumentError, SchemaError, VersionMismatchError, ParseError,
                 FileNotFoundError, json.JSONDecodeError)


def run_directory(out: str | None, command: str) -> Path:
    base = Path(out or os.environ.get("POFRM_OUTPUT_DIR") or "pofrm_runs")
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = base / f"{command}-{stamp}"
    k = 1
    while path.exists():
        path = base / f"{command}-{stamp}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------- scenarios

def _scenario_args(p):
    p.add_argument("--config", help="JSON file with scenario fields (overridden by flags)")
    p.add_argument("--study", type=int, choices=(1, 2))
    p.add_argument("--family", choices=("gaussian", "binomial"))
    p.add_argument("--pct", type=float, help="fraction of subjects with a gap")
    p.add_argument("--gap", type=float, help="gap size as a fraction of the domain")
    p.add_argument("--reps", type=int, help="replicates per scenario")
    p.add_argument("-n", "--n-subjects", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--all", action="store_true", help="run every pct/gap combination of the study")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)


def _scenarios(args) -> list[ScenarioConfig]:
    fields = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if not isinstance(doc, dict):
            raise SchemaError(f"{args.config}: scenario file must hold a JSON object")
        known = set(ScenarioConfig.__dataclass_fields__)
        unknown = set(doc) - known - {"normal_parameterization"}
        if unknown:
            raise SchemaError(f"{args.config}: unknown fields {sorted(unknown)}")
        fields = {k: v for k, v in doc.items() if k in known}
        if "group_means" in fields:
            fields["group_means"] = tuple(tuple(g) for g in fields["group_means"])
    flags = {"study": args.study, "family": args.family, "pct_incomplete": args.pct,
             "gap_size": args.gap, "replicates": args.reps, "n_subjects": args.n_subjects,
             "seed": args.seed}
    fields.update({k: v for k, v in flags.items() if v is not None})
    if args.jobs < 1:
        raise InvalidArgumentError("--jobs must be at least 1")
    base = ScenarioConfig(**fields)
    if not args.all:
        return [base]
    return [replace(base, pct_incomplete=p, gap_size=g) for p in PCT_GRID[base.study] for g in GAP_GRID]


def _cell(entry, metric):
    m = entry.get(metric) if entry else None
    if not m or m["mean"] is None:
        return "-"
    sd = "-" if m["sd"] is None else f"{m['sd']:.3g}"
    return f"{m['mean']:.4g} ({sd})"


def format_tables(summary: dict, configs, methods) -> str:
    """Aligned text: one table per metric with incompleteness rows and gap-size columns."""
    by_id = {c.scenario_id: c for c in configs}
    metrics = sorted({k for s in summary.values() for m in s.values() for k in m
                      if k != "replicates" and not k.startswith("time_")} | {"time_total"})
    pcts = sorted({c.pct_incomplete for c in configs})
    gaps = sorted({c.gap_size for c in configs})
    blocks = []
    for metric in metrics:
        header = ["% incomplete"] + [f"gap {g:.0%} {meth}" for g in gaps for meth in methods]
        rows = []
        for p in pcts:
            row = [f"{p:.0%}"]
            for g in gaps:
                sid = next((s for s, c in by_id.items() if c.pct_incomplete == p and c.gap_size == g), None)
                for meth in methods:
                    row.append(_cell(summary.get(sid, {}).get(meth), metric))
            rows.append(row)
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = [metric, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def _run_campaign(args, methods, command) -> int:
    configs = _scenarios(args)
    out = run_directory(args.out, command)
    reports = []
    for cfg in configs:
        logger.info("scenario %s: %d replicates", cfg.scenario_id, cfg.replicates)
        reports += run_scenario(cfg, methods=methods, jobs=args.jobs)
    summary = io.write_report(reports, out)
    io.atomic_write_text(out / "config.json",
                         json.dumps([c.to_dict() for c in configs], indent=2) + "\n")
    table = format_tables(summary, configs, methods)
    if command == "benchmark":
        table += "\n" + _paired_lines(reports)
    io.atomic_write_text(out / "tables.txt", table)
    print(table, end="")
    print(f"results in {out}")
    failed = [r for r in reports if r.status == "error" and (r.method == "pofrm" or command == "simulate")]
    if failed:
        print(f"{len(failed)} replicate(s) failed; see {out / 'errors.log'}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _paired_lines(reports) -> str:
    """Mean wall time per method and the baseline-to-direct ratio per scenario."""
    lines = ["scenario  pofrm_s  pofrm_i_s  ratio  pofrm_i_status"]
    for sid in dict.fromkeys(r.scenario for r in reports):
        a = [r for r in reports if r.scenario == sid and r.method == "pofrm" and r.status == "ok"]
        b = [r for r in reports if r.scenario == sid and r.method == "pofrm_i"]
        ok_b = [r for r in b if r.status == "ok"]
        ta = float(np.mean([r.times["total"] for r in a])) if a else float("nan")
        tb = float(np.mean([r.times["total"] for r in ok_b])) if ok_b else float("nan")
        status = "ok" if len(ok_b) == len(b) else f"{len(b) - len(ok_b)} infeasible/failed"
        lines.append(f"{sid}  {ta:.4g}  {tb:.4g}  {tb / ta if ta else float('nan'):.3g}  {status}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    methods = tuple(args.methods.split(","))
    if not set(methods) <= {"pofrm", "pofrm_i"}:
        raise InvalidArgumentError(f"unknown method in {args.methods!r}")
    return _run_campaign(args, methods, "simulate")


def cmd_benchmark(args) -> int:
    return _run_campaign(args, ("pofrm", "pofrm_i"), "benchmark")


# ---------------------------------------------------------------- fit / predict

def _spec_from_args(args, manifest) -> PofrSpec:
    covs = []
    for c in manifest.covariates:
        sizes = {1: (args.cov_basis_1d, args.coef_basis_1d), 2: (args.cov_basis_2d, args.coef_basis_2d)}[c["dim"]]
        covs.append(CovariateSpec(c["dim"], *(None if s is None else (s,) * c["dim"] for s in sizes)))
    return PofrSpec(tuple(covs), family=args.family, shared_smoothing=args.shared_smoothing)


def _write_outputs(out: Path, result, y, eta, mu, prefix: str):
    io.write_curve_table(out / f"{prefix}.csv", ["eta", "mu"], [eta, mu])
    if y is None:
        return {}
    if result.family == "gaussian":
        return {"rmse": rmse(y, mu)}
    pct, cm = misclassification(y, mu)
    metrics = {"misclassification": pct, "accuracy": float(np.trace(cm) / cm.sum())}
    lines = ["predicted\\true,0,1", f"0,{cm[0, 0]},{cm[0, 1]}", f"1,{cm[1, 0]},{cm[1, 1]}"]
    io.atomic_write_text(out / "confusion.csv", "\n".join(lines) + "\n")
    if 0 < y.sum() < y.size:
        metrics["auc"] = auc(y, mu)
        fpr, tpr = roc_points(y, mu)
        io.write_curve_table(out / "roc.csv", ["fpr", "tpr"], [fpr, tpr])
    return metrics


def cmd_fit(args) -> int:
    manifest = io.load_manifest(args.manifest)
    data = io.load_dataset(manifest)
    spec = _spec_from_args(args, manifest)
    out = run_directory(args.out, "fit")
    result = fit(data, spec)
    io.save_model(result, out / "model.json")
    for j, beta in enumerate(result.beta_hats):
        if isinstance(beta.basis, BasisSystem2D):
            (lo1, hi1), (lo2, hi2) = beta.basis.basis_t1.domain, beta.basis.basis_t2.domain
            t1, t2 = np.linspace(lo1, hi1, args.dense), np.linspace(lo2, hi2, args.dense)
            surf = eval_beta(result, j, (t1, t2))
            text = "\n".join(",".join(repr(float(v)) for v in row) for row in surf) + "\n"
            io.atomic_write_text(out / f"beta_{j}.csv", text)
        else:
            t = np.linspace(*beta.basis.domain, args.dense)
            io.write_curve_table(out / f"beta_{j}.csv", ["t", "beta"], [t, eval_beta(result, j, t)])
    metrics = _write_outputs(out, result, data.y, result.eta, result.mu, "fitted")
    m = result.mixed
    summary = {"family": result.family, "iterations": m.iterations, "tau2": [float(v) for v in m.tau2],
               "components": list(m.component_names), "timing": result.timing, **metrics}
    io.atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    print(f"results in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    result = io.load_model(args.model)
    manifest = io.load_manifest(args.manifest)
    data = io.load_dataset(manifest)
    out = run_directory(args.out, "predict")
    eta, mu = predict(result, data.covariates)
    metrics = _write_outputs(out, result, data.y, eta, mu, "predictions")
    io.atomic_write_text(out / "summary.json", json.dumps(metrics, indent=2) + "\n")
    print(json.dumps(metrics, indent=2))
    print(f"results in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pofrm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run simulation replicates and aggregate metrics")
    _scenario_args(sim)
    sim.add_argument("--methods", default="pofrm", help="comma-separated: pofrm,pofrm_i")
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark", help="direct fit vs impute-then-fit on shared replicates")
    _scenario_args(bench)
    bench.set_defaults(func=cmd_benchmark)

    fp = sub.add_parser("fit", help="fit a model to a dataset manifest")
    fp.add_argument("--manifest", required=True)
    fp.add_argument("--family", choices=("gaussian", "binomial"), default="gaussian")
    fp.add_argument("--cov-basis-1d", type=int)
    fp.add_argument("--coef-basis-1d", type=int)
    fp.add_argument("--cov-basis-2d", type=int)
    fp.add_argument("--coef-basis-2d", type=int)
    fp.add_argument("--shared-smoothing", action="store_true")
    fp.add_argument("--dense", type=int, default=101, help="points per axis for coefficient output")
    fp.set_defaults(func=cmd_fit)

    pp = sub.add_parser("predict", help="apply a saved model to a dataset manifest")
    pp.add_argument("--model", required=True)
    pp.add_argument("--manifest", required=True)
    pp.set_defaults(func=cmd_predict)

    for p in (sim, bench, fp, pp):
        p.add_argument("--out", help="output root (default $POFRM_OUTPUT_DIR or ./pofrm_runs)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"pofrm: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PofrmError as exc:
        print(f"pofrm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
