"""Command-line front end: ``smrt fit | test | simulate | report``.

Exit status is 0 on success, 2 for invalid input (missing files, malformed
data or options) and 3 for numerical failures (non-convergence, singular
information, too many failed resampling draws).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .data import DataError, load_dataset
from .hierlasso import PenaltySpec, fit_hierarchical, tune_bic
from .marginal import ConvergenceError, MarginalFit, SeparationError, fit_marginal
from .permute import build_reference_pair, resampling_reference_pair
from .quadratic import assemble
from .resample import confidence_intervals, perturb_fit, read_draws, write_draws
from .simulation import SimConfig, run_experiment, write_metrics
from .stepdown import METHODS, result_table, run_methods, test_stats

EXIT_INPUT = 2
EXIT_NUMERIC = 3
DEFAULT_SEED = 1


class InputError(Exception):
    """Invalid command-line input."""


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SMRT_SEED")
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError as exc:
        raise InputError(f"SMRT_SEED must be an integer, got {env!r}") from exc


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_tsv(path: Path, header: list, rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_fit(args) -> int:
    seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.data, args.meta)
    fits = [fit_marginal(data, m) for m in range(data.M)]
    system = assemble(fits)
    if args.lam == "auto":
        sf = tune_bic(system)
    else:
        try:
            lam = float(args.lam)
        except ValueError as exc:
            raise InputError(f"--lambda must be 'auto' or a number, got {args.lam!r}") from exc
        sf = fit_hierarchical(system, PenaltySpec.adaptive(system.beta_tilde, lam))
    sig = np.column_stack([f.sigma_tilde for f in fits])
    record = {
        "data": str(Path(args.data).resolve()),
        "meta": str(Path(args.meta).resolve()),
        "n": data.n,
        "predictors": list(data.predictor_names),
        "outcomes": list(data.outcome_names),
        "seed": seed,
        "lambdaMode": args.lam,
        "fit": sf.to_dict(),
        "lambdaPath": [list(row) for row in sf.path],
        "marginals": [f.to_dict() for f in fits],
    }
    _dump(out / "fit.json", record)

    cols = ["predictor", "outcome", "betaTilde", "sigmaTilde", "betaHat"]
    extra = {}
    if args.resample:
        pen = PenaltySpec.adaptive(system.beta_tilde, sf.lam)
        draws = perturb_fit(system, fits, pen, args.resample, seed, threads=args.threads)
        write_draws(draws, out / "draws.jsonl")
        extra["sigmaHat"] = draws.sigma_hat
        lo_hi = confidence_intervals(draws, sf.beta_hat, args.level, "normal")
        extra["normalLow"], extra["normalHigh"] = lo_hi[..., 0], lo_hi[..., 1]
        if draws.B - len(draws.failures) >= 20:
            lo_hi = confidence_intervals(draws, sf.beta_hat, args.level, "quantile")
            extra["quantileLow"], extra["quantileHigh"] = lo_hi[..., 0], lo_hi[..., 1]
    rows = []
    for j, pname in enumerate(data.predictor_names):
        for m, oname in enumerate(data.outcome_names):
            rows.append([pname, oname, system.beta_tilde[j, m], sig[j, m], sf.beta_hat[j, m]]
                        + [v[j, m] for v in extra.values()])
    _write_tsv(out / "ci.tsv", cols + list(extra), rows)
    print(f"lambda={sf.lam:.6g} df={sf.df} converged={sf.converged} -> {out / 'fit.json'}")
    return 0


def _methods(spec: str) -> list:
    names = {m.lower(): m for m in METHODS}
    if spec == "all":
        return list(METHODS)
    chosen = ["SMRT"]
    for token in spec.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token not in names:
            raise InputError(f"unknown method {token!r}; choose from {', '.join(METHODS)}")
        if names[token] not in chosen:
            chosen.append(names[token])
    return chosen


def cmd_test(args) -> int:
    seed = _seed(args)
    fit_path = Path(args.fit)
    if fit_path.is_dir():
        fit_path = fit_path / "fit.json"
    if not fit_path.is_file():
        raise InputError(f"fit file not found: {fit_path}")
    record = json.loads(fit_path.read_text())
    data = load_dataset(args.data or record["data"], args.meta or record["meta"])
    fits = [MarginalFit.from_dict(d) for d in record["marginals"]]
    if data.n != fits[0].n or data.M != len(fits):
        raise InputError("dataset does not match the stored fit")
    beta_hat = np.asarray(record["fit"]["betaHat"], dtype=float)
    lam = float(record["fit"]["lambda"])
    system = assemble(fits)
    sig = np.column_stack([f.sigma_tilde for f in fits])
    if not 1 <= args.k <= data.M:
        raise InputError(f"--k must lie in 1..{data.M}")
    if not 0.0 < args.alpha < 1.0:
        raise InputError("--alpha must lie in (0, 1)")
    psi = 1.0 - args.alpha if args.psi is None else args.psi
    if not 0.0 < psi < 1.0:
        raise InputError("--psi must lie in (0, 1)")
    B = args.B
    draws = None
    if args.ref == "permutation":
        ref_hat, ref_tilde = build_reference_pair(data, fits, lam, B or 200, seed, args.threads)
    else:
        stored = fit_path.parent / "draws.jsonl"
        if B is None and stored.is_file():
            draws = read_draws(stored)
        else:
            pen = PenaltySpec.adaptive(system.beta_tilde, lam)
            draws = perturb_fit(system, fits, pen, B or 200, seed, threads=args.threads)
        ref_hat, ref_tilde = resampling_reference_pair(draws, beta_hat, system.beta_tilde, sig)
    t_hat = test_stats(beta_hat, sig, data.n)
    t_tilde = test_stats(system.beta_tilde, sig, data.n)
    methods = _methods(args.method)
    results = run_methods(t_hat, ref_hat, t_tilde, ref_tilde, args.alpha, psi, args.k, methods, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "test.json", {
        "seed": seed, "B": ref_hat.B, "alpha": args.alpha, "psi": psi, "k": args.k,
        "refKind": ref_hat.kind, "mode": args.mode,
        "predictors": list(data.predictor_names), "outcomes": list(data.outcome_names),
        "results": {name: res.to_dict() for name, res in results.items()},
    })
    table = result_table(results, data.predictor_names, data.outcome_names, beta_hat)
    table.to_csv(out / "test.tsv", sep="\t", index=False)
    n_rej = int(results["SMRT"].rejected.sum())
    print(f"SMRT rejected {n_rej} of {beta_hat.size} hypotheses -> {out / 'test.tsv'}")
    return 0


def _load_config(spec: str) -> SimConfig:
    path = Path(spec)
    if path.is_file():
        return SimConfig.from_json(path)
    name = spec if spec.endswith(".json") else spec + ".json"
    bundled = resources.files("smrt") / "configs" / name
    if bundled.is_file():
        return SimConfig.from_dict(json.loads(bundled.read_text()))
    raise InputError(f"config not found: {spec}")


def cmd_simulate(args) -> int:
    try:
        raw = _load_config(args.config).to_dict()
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    for key in ("reps", "B", "n", "B_perturb"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = val
    if args.seed is not None or "SMRT_SEED" in os.environ:
        raw["seed"] = _seed(args)
    try:
        config = SimConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc
    metrics = run_experiment(config, threads=args.threads)
    js, tsv = write_metrics(metrics, args.out)
    print(f"{config.reps} replicates in {metrics['_seconds']:.1f}s -> {js}, {tsv}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        for name in ("metrics.json", "test.json"):
            if (path / name).is_file():
                path = path / name
                break
    if not path.is_file():
        raise InputError(f"nothing to report at {args.path}")
    obj = json.loads(path.read_text())
    if "testing" in obj or "estimation" in obj:
        print(f"replicates: {obj['reps']}  n: {obj['config']['n']}")
        for key, block in obj.get("testing", {}).items():
            power = block.get("power")
            print(f"{key:16s} fwer={block['fwer']:.4f}" + ("" if power is None else f"  power={power:.4f}"))
        for key, v in obj.get("sparsity", {}).items():
            print(f"{key:28s} {v:.4f}")
        for kind, vals in obj.get("estimation", {}).get("coverage", {}).items():
            print(f"coverage[{kind}] {vals['overall']:.4f}")
    elif "results" in obj:
        preds, outs = obj["predictors"], obj["outcomes"]
        for name, res in obj["results"].items():
            hits = [f"{preds[j]}:{','.join(outs[m] for m in ms)}" for j, ms in enumerate(res["rejected"]) if ms]
            print(f"{name} (k={res['k']}): " + ("; ".join(hits) if hits else "no rejections"))
    else:
        raise InputError(f"unrecognized report input: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smrt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--seed", type=int, default=None, help="master seed (default: $SMRT_SEED or 1)")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("fit", help="marginal fits, joint sparse fit, optional perturbation draws")
    p.add_argument("--data", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' (BIC) or a fixed value")
    p.add_argument("--resample", type=int, default=0, metavar="B", help="perturbation draws")
    p.add_argument("--level", type=float, default=0.95, help="interval confidence level")
    common(p, ".")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="stepdown tests on a stored fit")
    p.add_argument("--fit", default="fit.json", help="fit.json or its directory")
    p.add_argument("--data", default=None, help="override the stored data path")
    p.add_argument("--meta", default=None, help="override the stored metadata path")
    p.add_argument("--ref", choices=("permutation", "resampling"), default="permutation")
    p.add_argument("--B", type=int, default=None, help="reference draws (default 200)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--psi", type=float, default=None, help="cutoff quantile (default 1 - alpha)")
    p.add_argument("--method", default="smrt",
                   help="comma list of smrt,mrt,sup,bonferroni or 'all' (SMRT always runs)")
    p.add_argument("--mode", choices=("predictor", "all", "split"), default="predictor")
    common(p, ".")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="run a simulation config")
    p.add_argument("--config", default="nested_n250", help="config file or bundled name")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--B-perturb", dest="B_perturb", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    common(p, ".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="print a summary of metrics.json or test.json")
    p.add_argument("path", nargs="?", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (ConvergenceError, SeparationError, FloatingPointError, np.linalg.LinAlgError,
            RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
