"""Command-line front end.

Subcommands: datasets (bundled fixtures), bf (Bayes factors from a run
manifest), sensitivity (prior-concentration sweep), fit (constrained MLE),
posterior (accepted-draw summaries). Exit codes: 0 success, 1 input error,
2 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (
    LN10,
    EngineError,
    EpsilonSchedule,
    PriorSpec,
    RunSettings,
    UnboundedEstimateError,
    compare_models,
    jeffreys_label,
    posterior_draws_under_model,
    replicate_bf,
)
from .fit import FitError, FitOptions, constrained_mle
from .hypotheses import ConstraintError, model_from_dict
from .link import LinkError
from .tables import TableError, list_fixtures, load_fixture, load_table, validate

INPUT_ERRORS = (TableError, ConstraintError, LinkError, FitError, FileNotFoundError,
                json.JSONDecodeError, KeyError, ValueError)


def _load_dataset(ref: str, base: Path):
    try:
        return load_fixture(ref)
    except TableError:
        return load_table(base / ref if not Path(ref).is_absolute() else ref)


def _load_manifest(path: str) -> dict:
    p = Path(path)
    manifest = json.loads(p.read_text())
    manifest["_base"] = p.parent
    return manifest


def _models_from_manifest(manifest: dict, table):
    base = manifest["_base"]
    models = []
    for entry in manifest.get("models", []):
        if isinstance(entry, str):
            obj = json.loads((base / entry).read_text())
        else:
            obj = entry
        models.append(model_from_dict(obj, table.dims, table.s))
    if not models:
        raise ValueError("manifest lists no models")
    return models


def _settings_from(manifest: dict, args) -> RunSettings:
    s = RunSettings()
    for k, v in manifest.get("settings", {}).items():
        if not hasattr(s, k):
            raise ValueError(f"unknown setting {k!r}")
        setattr(s, k, type(getattr(s, k))(v) if not isinstance(v, list) else tuple(v))
    if args.draws:
        s.n_draws = args.draws
    if args.pilot:
        s.pilot_n = args.pilot
    if args.log_base:
        s.log_base = args.log_base
    return s


def _schedule_from(manifest: dict) -> EpsilonSchedule | None:
    sched = manifest.get("epsilon_schedule")
    return EpsilonSchedule(**sched) if sched else None


def _display_log(est_log10: float, base: str) -> float:
    return est_log10 if base == "10" else est_log10 * LN10


def _emit(report: dict, args) -> None:
    fmt = args.format
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    if fmt == "json":
        print(json.dumps(report, indent=1, sort_keys=True))
    elif fmt == "csv":
        rows = report.get("results", [])
        cols = ["model", "log_bf", "sd", "label", "route", "vs_reference"]
        print(",".join(cols))
        for r in rows:
            print(",".join(str(r.get(c, "")) for c in cols))
    else:
        print(f"# {report.get('command')} (base {report.get('log_base')}, seed {report.get('seed')})")
        for r in report.get("results", []):
            ref = f"  vs-ref {r['vs_reference']:+.3f}" if "vs_reference" in r else ""
            print(f"{r['model']:>24}: log BF = {r['log_bf']:+9.3f}  sd {r['sd']:.3f}  "
                  f"[{r['label']}] ({r['route']}){ref}")
        for k in ("dataset", "n", "elapsed_s"):
            if k in report:
                print(f"# {k} = {report[k]}")


def _bf_table(manifest, table, models, prior, settings, schedule, seed, B, reference):
    results = []
    estimates = {}
    for model in models:
        est = replicate_bf(model, table, prior, settings, B, seed, schedule)
        estimates[model.name] = est
        results.append({
            "model": model.name,
            "log10_bf": est.log10_bf,
            "ln_bf": est.ln_bf,
            "sd": est.sd if settings.log_base == "10" else est.sd * LN10,
            "log_bf": _display_log(est.log10_bf, settings.log_base),
            "label": jeffreys_label(_display_log(est.log10_bf, settings.log_base)),
            "route": est.route,
            "replicates": est.replicates,
            "estimate": est.to_dict(),
        })
    if reference:
        if reference not in estimates:
            raise ValueError(f"reference model {reference!r} not among {sorted(estimates)}")
        ref_est = estimates[reference]
        for row in results:
            delta10 = compare_models(estimates[row["model"]], ref_est)
            row["vs_reference"] = _display_log(delta10, settings.log_base)
    return results


def cmd_datasets(args) -> int:
    rows = list_fixtures()
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        for row in rows:
            dims = "x".join(str(d) for d in row["dims"])
            print(f"{row['name']:>12}: {dims} table, {row['strata']} stratum(s)")
    return 0


def cmd_bf(args) -> int:
    manifest = _load_manifest(args.manifest)
    table = _load_dataset(manifest["dataset"], manifest["_base"])
    models = _models_from_manifest(manifest, table)
    settings = _settings_from(manifest, args)
    schedule = _schedule_from(manifest)
    seed = args.seed if args.seed is not None else int(manifest.get("seed", 20240901))
    B = args.replicates or int(manifest.get("replicates", 1))
    kappa = float(manifest.get("prior", {}).get("concentration", 1.0))
    prior = PriorSpec.flat(table.r, table.s, kappa)
    reference = args.reference or manifest.get("reference")
    t0 = time.time()
    results = _bf_table(manifest, table, models, prior, settings, schedule, seed, B, reference)
    report = {
        "command": "bf",
        "dataset": manifest["dataset"],
        "n": table.n,
        "seed": seed,
        "replicates": B,
        "prior_concentration": kappa,
        "log_base": settings.log_base,
        "reference": reference,
        "settings": settings.to_dict(),
        "results": results,
        "elapsed_s": round(time.time() - t0, 3),
        "version": __version__,
    }
    _emit(report, args)
    return 0


def cmd_sensitivity(args) -> int:
    manifest = _load_manifest(args.manifest)
    table = _load_dataset(manifest["dataset"], manifest["_base"])
    models = _models_from_manifest(manifest, table)
    settings = _settings_from(manifest, args)
    schedule = _schedule_from(manifest)
    seed = args.seed if args.seed is not None else int(manifest.get("seed", 20240901))
    B = args.replicates or int(manifest.get("replicates", 1))
    kappas = [float(k) for k in (args.concentrations or manifest.get("concentrations", [1.0]))]
    reference = args.reference or manifest.get("reference")
    sweeps = []
    t0 = time.time()
    for kappa in kappas:
        prior = PriorSpec.flat(table.r, table.s, kappa)
        rows = _bf_table(manifest, table, models, prior, settings, schedule, seed, B, reference)
        sweeps.append({"concentration": kappa, "results": rows})
    flat = [dict(r, model=f"{r['model']} @k={sw['concentration']}")
            for sw in sweeps for r in sw["results"]]
    report = {
        "command": "sensitivity",
        "dataset": manifest["dataset"],
        "n": table.n,
        "seed": seed,
        "replicates": B,
        "concentrations": kappas,
        "log_base": settings.log_base,
        "settings": settings.to_dict(),
        "sweeps": sweeps,
        "results": flat,
        "elapsed_s": round(time.time() - t0, 3),
        "version": __version__,
    }
    _emit(report, args)
    return 0


def cmd_fit(args) -> int:
    table = _load_dataset(args.dataset, Path.cwd())
    obj = json.loads(Path(args.model).read_text())
    model = model_from_dict(obj, table.dims, table.s)
    options = FitOptions(smoothing=args.smoothing)
    res = constrained_mle(table, model, options)
    report = {
        "command": "fit",
        "dataset": args.dataset,
        "model": model.name,
        "fit": res.to_dict(),
        "diagnostics": asdict(validate(table)),
        "version": __version__,
    }
    if args.format == "text":
        print(f"model {model.name}: loglik {res.loglik:.4f}  converged {res.converged}  "
              f"kkt {res.kkt_residual:.2e}  outer {res.n_outer}")
    else:
        print(json.dumps(report, indent=1, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "fit.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_posterior(args) -> int:
    table = _load_dataset(args.dataset, Path.cwd())
    obj = json.loads(Path(args.model).read_text())
    model = model_from_dict(obj, table.dims, table.s)
    prior = PriorSpec.flat(table.r, table.s, args.concentration)
    summary = posterior_draws_under_model(model, table, prior, args.draws or 100_000,
                                          args.seed if args.seed is not None else 20240901)
    report = {
        "command": "posterior",
        "dataset": args.dataset,
        "model": model.name,
        "summary": summary.to_dict(),
        "version": __version__,
    }
    if args.format == "text":
        print(f"model {model.name}: accepted {summary.n_accepted}/{summary.n_drawn} "
              f"({summary.acceptance:.3%})")
        for w in summary.warnings:
            print(f"warning: {w}")
    else:
        print(json.dumps(report, indent=1, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "posterior.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="margbayes",
                                description="Bayes factors for constrained marginal models")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datasets", help="list bundled fixtures")
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_datasets)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--draws", type=int, default=None)
        sp.add_argument("--pilot", type=int, default=None)
        sp.add_argument("--replicates", type=int, default=None)
        sp.add_argument("--reference", default=None)
        sp.add_argument("--log-base", choices=["10", "e"], default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--format", choices=["text", "json", "csv"], default="text")

    b = sub.add_parser("bf", help="Bayes factors for the models in a manifest")
    b.add_argument("manifest")
    common(b)
    b.set_defaults(func=cmd_bf)

    s = sub.add_parser("sensitivity", help="prior-concentration sweep")
    s.add_argument("manifest")
    s.add_argument("--concentrations", type=float, nargs="+", default=None)
    common(s)
    s.set_defaults(func=cmd_sensitivity)

    f = sub.add_parser("fit", help="constrained maximum likelihood")
    f.add_argument("dataset")
    f.add_argument("model", help="model-spec JSON path")
    f.add_argument("--smoothing", type=float, default=0.5)
    f.add_argument("--format", choices=["text", "json"], default="text")
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("posterior", help="accepted posterior draw summaries")
    q.add_argument("dataset")
    q.add_argument("model", help="model-spec JSON path")
    q.add_argument("--draws", type=int, default=None)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--concentration", type=float, default=1.0)
    q.add_argument("--format", choices=["text", "json"], default="text")
    q.add_argument("--out", default=None)
    q.set_defaults(func=cmd_posterior)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnboundedEstimateError as err:
        print(f"estimation failure: {err}", file=sys.stderr)
        return 2
    except EngineError as err:
        print(f"estimation failure: {err}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as err:
        print(f"input error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
