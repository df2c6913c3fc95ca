"""Synthetic genotype-to-multi-outcome experiments.

Genotypes ``x_ij`` take values 0/1/2 under Hardy-Weinberg proportions for a
minor-allele frequency ``maf``; outcome errors are logistic transforms of an
exchangeable multivariate normal,

    eps_im = logit(Phi(z_im)),   z_i ~ N(0, (1 - rho) I + rho 11'),

and ``y_im = exp(x_i' beta0_m + eps_im)`` is rank-discretized into ``levels``
categories. Under the cumulative-logit parameterization used for fitting,
``P(Y <= l | x) = expit(theta_l - x'beta)``, the fitted coefficients estimate
``+beta0``.

``run_experiment`` repeats the full pipeline and summarizes estimation
(bias, standard errors, interval coverage), testing (FWER and power for each
method), and sparsity.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from .data import Dataset, OutcomeColumn, discretize
from .hierlasso import PenaltySpec, fit_marginal_adaptive, tune_bic
from .marginal import fit_marginal
from .parallel import pmap
from .permute import build_reference_pair, resampling_reference_pair
from .quadratic import assemble
from .resample import confidence_intervals, perturb_fit
from .rng import child_seed, stream
from .stepdown import METHODS, run_methods, test_stats

__all__ = ["SimConfig", "nested_beta0", "generate", "replicate", "summarize", "run_experiment",
           "metrics_rows", "write_metrics"]


def nested_beta0() -> np.ndarray:
    """30 x 4 effect matrix: nested blocks of 20, 16, 12 and 8 active predictors."""
    b = np.zeros((30, 4))
    b[:20, 0] = 1.0
    b[:16, 1] = 0.5
    b[:12, 2] = 1.0
    b[:8, 3] = 0.5
    return b


@dataclass(frozen=True)
class SimConfig:
    n: int = 250
    p: int = 30
    M: int = 4
    maf: float = 0.15
    rho: float = 0.15
    beta0: np.ndarray = field(default_factory=nested_beta0)
    levels: int = 10
    reps: int = 200
    B: int = 200               # reference draws for testing (0 skips testing)
    B_perturb: int = 0         # perturbation draws for SEs and intervals (0 skips)
    alpha: float = 0.05
    psi: float | None = None
    ks: tuple = (1, 2)
    methods: tuple = METHODS
    ref: str = "permutation"
    level: float = 0.95
    marginal_compare: bool = False
    seed: int = 20240601

    def __post_init__(self):
        b = np.asarray(self.beta0, dtype=float)
        object.__setattr__(self, "beta0", b)
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not 0.0 < self.maf < 1.0:
            raise ValueError("maf must lie in (0, 1)")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if b.shape != (self.p, self.M):
            raise ValueError(f"beta0 has shape {b.shape}, expected ({self.p}, {self.M})")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")
        if self.ref not in ("permutation", "resampling"):
            raise ValueError("ref must be 'permutation' or 'resampling'")
        if self.ref == "resampling" and self.B > 0 and self.B_perturb < 2:
            raise ValueError("a resampling reference needs B_perturb >= 2")
        if any(not 1 <= k <= self.M for k in self.ks):
            raise ValueError("every k must lie in 1..M")

    @property
    def psi_value(self) -> float:
        return 1.0 - self.alpha if self.psi is None else float(self.psi)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d.pop("description", None)
        beta0 = d.pop("beta0", "nested")
        p, M = int(d.get("p", 30)), int(d.get("M", 4))
        if isinstance(beta0, str):
            if beta0 == "nested":
                b = nested_beta0()
            elif beta0 == "null":
                b = np.zeros((p, M))
            else:
                raise ValueError(f"unknown beta0 preset {beta0!r}")
        else:
            b = np.asarray(beta0, dtype=float)
        d.setdefault("p", b.shape[0])
        d.setdefault("M", b.shape[1] if b.ndim == 2 else M)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(beta0=b, **d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta0"] = self.beta0.tolist()
        d["ks"] = list(self.ks)
        d["methods"] = list(self.methods)
        return d


def generate(config: SimConfig, rng: np.random.Generator) -> Dataset:
    """Draw one dataset from the design in ``config``."""
    q = config.maf
    probs = [q * q, 2 * q * (1 - q), (1 - q) ** 2]
    X = rng.choice(3, size=(config.n, config.p), p=probs).astype(float)
    cov = (1 - config.rho) * np.eye(config.M) + config.rho
    z = rng.standard_normal((config.n, config.M)) @ np.linalg.cholesky(cov).T
    eps = special.log_ndtr(z) - special.log_ndtr(-z)  # logit(Phi(z)) without cancellation
    latent = X @ config.beta0 + eps
    # exp(latent) is monotone in latent, so ranks and levels are unchanged
    cols = []
    for m in range(config.M):
        v = discretize(latent[:, m], config.levels)
        cols.append(OutcomeColumn("ordinal" if v.max() > 1 else "binary", int(v.max()) + 1, v))
    return Dataset(X, tuple(cols))


def replicate(config: SimConfig, r: int) -> dict:
    """Run the pipeline on replicate ``r``; depends only on ``(config.seed, r)``."""
    sub = child_seed(config.seed, "rep", r)
    data = generate(config, stream(sub, "data"))
    fits = [fit_marginal(data, m) for m in range(data.M)]
    system = assemble(fits)
    sf = tune_bic(system)
    bt = system.beta_tilde
    sig = np.column_stack([f.sigma_tilde for f in fits])
    n = data.n
    out = {"beta_tilde": bt, "beta_hat": sf.beta_hat, "sigma_tilde": sig, "lam": sf.lam, "df": sf.df}
    z = stats.norm.ppf(0.5 + config.level / 2)
    half = z * sig / math.sqrt(n)
    out["ci_asymptotic"] = np.stack([sf.beta_hat - half, sf.beta_hat + half], axis=-1)
    draws = None
    if config.B_perturb > 0:
        pen = PenaltySpec.adaptive(bt, sf.lam)
        draws = perturb_fit(system, fits, pen, config.B_perturb, sub)
        out["sigma_hat"] = draws.sigma_hat
        out["ci_normal"] = confidence_intervals(draws, sf.beta_hat, config.level, "normal")
        out["ci_quantile"] = confidence_intervals(draws, sf.beta_hat, config.level, "quantile")
    if config.B > 0:
        if config.ref == "permutation":
            ref_hat, ref_tilde = build_reference_pair(data, fits, sf.lam, config.B, sub)
        else:
            ref_hat, ref_tilde = resampling_reference_pair(draws, sf.beta_hat, bt, sig)
        t_hat = test_stats(sf.beta_hat, sig, n)
        t_tilde = test_stats(bt, sig, n)
        out["t_hat"], out["t_tilde"] = t_hat, t_tilde
        rej = {}
        for k in config.ks:
            methods = config.methods if k == 1 else [m for m in config.methods if m in ("SMRT", "MRT")]
            res = run_methods(t_hat, ref_hat, t_tilde, ref_tilde, config.alpha, config.psi_value, k, methods)
            for name, tr in res.items():
                rej[f"{name}:k{k}"] = tr.rejected
        out["rejected"] = rej
    if config.marginal_compare:
        out["beta_dagger"] = fit_marginal_adaptive(system)
    return out


def _task(args):
    config, r = args
    return replicate(config, r)


def _sparsity(est: np.ndarray, beta0: np.ndarray) -> dict:
    null = beta0 == 0
    full_null = np.all(null, axis=1)
    zero = est == 0
    res = {"nullZeroRate": float(zero[:, null].mean()) if null.any() else math.nan}
    if full_null.any():
        rows = np.all(zero[:, full_null, :], axis=2)
        res["nullPredictorElimination"] = float(rows.mean())
        res["allNullPredictorsEliminated"] = float(np.all(rows, axis=1).mean())
    res["nonNullKeptRate"] = float((~zero[:, ~null]).mean()) if (~null).any() else math.nan
    return res


def _patterns(beta0: np.ndarray) -> list:
    """Hypothesis groups: (label, mask) by effect size and predictor activity count."""
    active = (beta0 != 0).sum(axis=1)
    out = []
    for a in sorted(set(active[active > 0].tolist()), reverse=True):
        for v in sorted(set(np.abs(beta0[active == a]).ravel().tolist()) - {0.0}, reverse=True):
            mask = (active[:, None] == a) & (np.abs(beta0) == v)
            out.append((f"active{a}_effect{v:g}", mask))
    return out


def summarize(config: SimConfig, results: list) -> dict:
    """Aggregate per-replicate records into the metrics report."""
    if not results:
        raise ValueError("no replicates to summarize")
    beta0 = config.beta0
    R = len(results)
    effects = sorted(set(beta0.ravel().tolist()))
    stack = lambda key: np.stack([r[key] for r in results])  # noqa: E731
    bt, bh = stack("beta_tilde"), stack("beta_hat")
    out = {"config": config.to_dict(), "reps": R}

    est = {}
    for name, arr in (("betaHat", bh), ("betaTilde", bt)):
        bias = arr.mean(axis=0) - beta0
        sd = arr.std(axis=0, ddof=1) if R > 1 else np.zeros_like(beta0)
        g = {}
        for v in effects:
            mask = beta0 == v
            g[f"{v:g}"] = {
                "bias": float(bias[mask].mean()),
                "absBias": float(np.abs(bias[mask]).mean()),
                "absBiasSE": float((sd[mask] / math.sqrt(R)).mean()),
                "empiricalSD": float(sd[mask].mean()),
            }
        est[name] = g
    sig = stack("sigma_tilde") / math.sqrt(config.n)
    sd_t = bt.std(axis=0, ddof=1) if R > 1 else np.zeros_like(beta0)
    sd_h = bh.std(axis=0, ddof=1) if R > 1 else np.zeros_like(beta0)
    se = {}
    for v in effects:
        mask = beta0 == v
        se[f"{v:g}"] = {"asymptoticMinusEmpiricalTilde": float((sig.mean(axis=0) - sd_t)[mask].mean())}
        if "sigma_hat" in results[0]:
            sh = stack("sigma_hat").mean(axis=0)
            se[f"{v:g}"]["perturbMinusEmpiricalHat"] = float((sh - sd_h)[mask].mean())
            se[f"{v:g}"]["asymptoticMinusEmpiricalHat"] = float((sig.mean(axis=0) - sd_h)[mask].mean())
    est["seBias"] = se
    cover = {}
    for kind in ("asymptotic", "normal", "quantile"):
        key = f"ci_{kind}"
        if key not in results[0]:
            continue
        ci = stack(key)
        hit = (ci[..., 0] <= beta0) & (beta0 <= ci[..., 1])
        cover[kind] = {"overall": float(hit.mean())}
        cover[kind].update({f"{v:g}": float(hit[:, beta0 == v].mean()) for v in effects})
    est["coverage"] = cover
    out["estimation"] = est
    out["sparsity"] = _sparsity(bh, beta0)
    if "beta_dagger" in results[0]:
        out["sparsityMarginal"] = _sparsity(stack("beta_dagger"), beta0)
    out["lambda"] = {"mean": float(np.mean([r["lam"] for r in results])),
                     "dfMean": float(np.mean([r["df"] for r in results]))}

    if "rejected" in results[0]:
        null = beta0 == 0
        fam = np.any(null, axis=1)
        pats = _patterns(beta0)
        testing = {}
        per_rep_power = {}
        for key in results[0]["rejected"]:
            rej = np.stack([r["rejected"][key] for r in results])  # (R, p, M)
            err = np.any(rej & null, axis=2)  # (R, p)
            fwer_j = err[:, fam].mean(axis=0) if fam.any() else np.array([])
            fwer_se = math.nan
            if fam.any() and R > 1:
                fwer_se = float(err[:, fam].mean(axis=1).std(ddof=1) / math.sqrt(R))
            block = {
                "fwer": float(fwer_j.mean()) if fam.any() else math.nan,
                "fwerSE": fwer_se,
                "fwerAllPredictors": float(np.any(err, axis=1).mean()),
            }
            if (~null).any():
                pw = rej[:, ~null].mean(axis=1)
                per_rep_power[key] = pw
                block["power"] = float(pw.mean())
                block["powerSE"] = float(pw.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan
                block["powerByPattern"] = {lab: float(rej[:, mask].mean()) for lab, mask in pats}
            testing[key] = block
        diffs = {}
        keys = list(per_rep_power)
        for a in keys:
            for b in keys:
                if a < b and a.split(":")[1] == b.split(":")[1]:
                    d = per_rep_power[a] - per_rep_power[b]
                    diffs[f"{a}-{b}"] = {"mean": float(d.mean()),
                                         "se": float(d.std(ddof=1) / math.sqrt(R)) if R > 1 else math.nan}
        out["testing"] = testing
        out["powerDifferences"] = diffs
    return out


def run_experiment(config: SimConfig, threads: int = 1, keep_replicates: bool = False) -> dict:
    """Run ``config.reps`` replicates (in parallel when ``threads > 1``) and summarize."""
    if config.reps < 1:
        raise ValueError("reps must be at least 1")
    start = time.perf_counter()
    results = pmap(_task, [(config, r) for r in range(config.reps)], threads)
    metrics = summarize(config, results)
    if keep_replicates:
        metrics["_replicates"] = results
    metrics["_seconds"] = time.perf_counter() - start
    return metrics


def metrics_rows(metrics: dict) -> list:
    """Long-format rows ``(n, effect, method, k, metric, value, se)`` for plotting."""
    n = metrics["config"]["n"]
    rows = []
    est = metrics["estimation"]
    for name in ("betaHat", "betaTilde"):
        for eff, vals in est[name].items():
            rows.append((n, eff, name, "", "bias", vals["bias"], vals["absBiasSE"]))
            rows.append((n, eff, name, "", "absBias", vals["absBias"], vals["absBiasSE"]))
            rows.append((n, eff, name, "", "empiricalSD", vals["empiricalSD"], ""))
    for eff, vals in est["seBias"].items():
        for key, v in vals.items():
            rows.append((n, eff, "betaHat" if key.endswith("Hat") else "betaTilde", "", key, v, ""))
    for kind, vals in est["coverage"].items():
        for eff, v in vals.items():
            rows.append((n, eff, f"ci_{kind}", "", "coverage", v, ""))
    for key, v in metrics["sparsity"].items():
        rows.append((n, "0", "betaHat", "", key, v, ""))
    for key, v in metrics.get("sparsityMarginal", {}).items():
        rows.append((n, "0", "betaDagger", "", key, v, ""))
    for key, block in metrics.get("testing", {}).items():
        method, k = key.split(":")
        rows.append((n, "0", method, k[1:], "fwer", block["fwer"], block["fwerSE"]))
        if "power" in block:
            rows.append((n, "nonzero", method, k[1:], "power", block["power"], block["powerSE"]))
            for lab, v in block["powerByPattern"].items():
                rows.append((n, lab, method, k[1:], "power", v, ""))
    return rows


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_metrics(metrics: dict, out_dir) -> tuple:
    """Write ``metrics.json`` and ``metrics.tsv``; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "metrics.json"
    js.write_text(json.dumps(_clean(metrics), indent=2, sort_keys=True) + "\n")
    tsv = out_dir / "metrics.tsv"
    with open(tsv, "w") as fh:
        fh.write("n\teffect\tmethod\tk\tmetric\tvalue\tse\n")
        for row in metrics_rows(metrics):
            fh.write("\t".join("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v))
                               for v in row) + "\n")
    return js, tsv
