"""Relative-regret evaluation, experiment sweeps, and the theory suite.

The evaluation metric is the average relative CVaR regret against a
fresh-sample oracle: for each held-out x the oracle re-solves on M fresh
conditional draws, and the model under test is scored on the same draws
(common random numbers across models, so per-seed comparisons are paired).
"""

import concurrent.futures
import csv
import io
import math
import os
import statistics
import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import problems, risk, solver, train

CSV_COLUMNS = ["model", "family", "deg", "sigma", "alpha_train", "alpha_eval",
               "seed", "regret_pct", "runtime_s"]

DEGENERATE_DENOM = 1e-9


@dataclass
class RegretReport:
    model: str
    family: str
    deg: int
    sigma: float
    alpha_train: float
    alpha_eval: float
    seed: int
    regret_pct: float
    runtime_s: float

    def row(self):
        return [self.model, self.family, self.deg, self.sigma, self.alpha_train,
                self.alpha_eval, self.seed, f"{self.regret_pct:.6f}",
                f"{self.runtime_s:.3f}"]


# ---- deciders ------------------------------------------------------------


def gendfl_decider(flow, spec, alpha, n_samples, solver_cfg, seed=0):
    """Decision policy of a generative model: sample, CVaR-SAA solve."""

    def decide(x):
        x = np.asarray(x, dtype=np.float64)
        rng = np.random.default_rng((seed, zlib.crc32(x.tobytes()), 7))
        C = ad.value(flow.sample(x, n_samples, rng))
        return solver.solve_cvar_saa(spec, C, alpha, solver_cfg).w

    return decide


def pointwise_decider(model, spec):
    """Decision policy of a point predictor: plug the estimate in."""

    def decide(x):
        return solver.solve_pointwise(spec, model.predict(x)).w

    return decide


def relative_regret(decider, spec, sampler, holdout_X, alpha_eval, M,
                    solver_cfg=None, seed=0):
    """Mean over held-out x of CVaR-regret / |E f(c, w_star)|, in percent.

    `sampler(x, m, rng)` supplies fresh conditional draws (ground-truth
    resampling for synthetic specs, proxy draws for real data). Returns
    (percent, n_scored, n_skipped); degenerate denominators are skipped
    and counted.
    """
    if M < 1:
        raise ValueError("need at least one oracle sample")
    solver_cfg = solver_cfg or solver.SolverConfig()
    ratios = []
    skipped = 0
    for x in holdout_X:
        x = np.asarray(x, dtype=np.float64)
        rng = np.random.default_rng((seed, zlib.crc32(x.tobytes())))
        C = sampler(x, M, rng)
        star = solver.solve_cvar_saa(spec, C, alpha_eval, solver_cfg)
        losses_star = solver.family_losses(spec, C, star.w)
        denom = abs(float(np.mean(losses_star)))
        if denom < DEGENERATE_DENOM:
            skipped += 1
            continue
        w_hat = decider(x)
        losses_hat = solver.family_losses(spec, C, w_hat)
        num = risk.empirical_cvar(losses_hat - losses_star, alpha_eval)
        ratios.append(num / denom)
    if not ratios:
        raise ValueError("all held-out instances were degenerate")
    return 100.0 * float(np.mean(ratios)), len(ratios), skipped


# ---- experiment driver ---------------------------------------------------


def _train_cfg_from(config, overrides=None):
    section = dict(config.get("train", {}))
    if overrides:
        section.update(overrides)
    solver_keys = {"max_iters", "step0", "restarts", "tol", "unroll", "tau0", "tau_anneal"}
    sol = solver.SolverConfig(**{k: v for k, v in section.items() if k in solver_keys})
    kwargs = {k: v for k, v in section.items() if k not in solver_keys}
    return train.TrainConfig(solver=sol, **kwargs)


def _build_model(name, data, spec, cfg):
    """Returns (decider_factory, artifacts) for a model name."""
    if name in ("gendfl", "proxy"):
        proxy = train.train_proxy(data, spec, cfg)
        flow = proxy.flow
        if name == "gendfl":
            flow = train.train_gendfl(data, spec, cfg, proxy)
        return gendfl_decider(flow, spec, cfg.alpha, cfg.n_samples, cfg.solver,
                              seed=cfg.seed), flow
    if name == "pto":
        model = train.train_pto(data, cfg)
        return pointwise_decider(model, spec), model
    if name == "cvar_reg":
        model = train.train_cvar_regressor(data, cfg.alpha, cfg)
        return pointwise_decider(model, spec), model
    raise ValueError(f"unknown model '{name}'")


def _run_cell(config, model_entry, seed):
    """Train one model on one seed and evaluate across the alpha_eval grid."""
    prob = config["problem"]
    family = prob["family"]
    gen = problems.FAMILY_GENERATORS[family]
    gcfg = problems.GenConfig(n=prob["n"], d_x=prob["d_x"], d_c=prob["d_c"],
                              deg=prob.get("deg", 2), sigma=prob.get("sigma", 20.0),
                              seed=seed)
    data, spec = gen(gcfg)

    if isinstance(model_entry, str):
        name, label, overrides = model_entry, model_entry, {}
    else:
        name = model_entry["model"]
        label = model_entry.get("label", name)
        overrides = {k: v for k, v in model_entry.items() if k not in ("model", "label")}
    cfg = _train_cfg_from(config, {**overrides, "seed": seed})

    t0 = time.perf_counter()
    decider, _ = _build_model(name, data, spec, cfg)

    ev = config.get("eval", {})
    M = ev.get("M", 2000)
    holdout_n = ev.get("holdout", 100)
    rng = np.random.default_rng((seed, 99))
    holdout_X = rng.standard_normal((holdout_n, spec.d_x))
    eval_cfg = solver.SolverConfig(**{k: v for k, v in ev.items()
                                      if k in ("max_iters", "restarts", "step0")})

    rows = []
    for alpha_eval in ev.get("alpha_eval", [cfg.alpha]):
        pct, _, _ = relative_regret(decider, spec, data.truth.resample, holdout_X,
                                    alpha_eval, M, eval_cfg, seed=seed)
        rows.append(RegretReport(model=label, family=family, deg=gcfg.deg,
                                 sigma=gcfg.sigma, alpha_train=cfg.alpha,
                                 alpha_eval=alpha_eval, seed=seed, regret_pct=pct,
                                 runtime_s=time.perf_counter() - t0))
    return rows


def run_experiment(config, out_csv=None, max_workers=None):
    """Train and evaluate every (model, seed) cell; returns report rows.

    Cells are independent; `GENDFL_THREADS` (or max_workers) caps the
    worker pool. Rows are emitted in deterministic (model, seed) order
    regardless of scheduling.
    """
    models = config.get("models", ["gendfl", "pto"])
    seeds = config.get("seeds", [0])
    cells = [(m, s) for m in models for s in seeds]
    if max_workers is None:
        max_workers = int(os.environ.get("GENDFL_THREADS", "1"))
    results = {}
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(_run_cell, config, m, s): (i, s)
                       for i, (m, s) in enumerate(cells)}
            for fut, key in futures.items():
                results[key] = fut.result()
    else:
        for i, (m, s) in enumerate(cells):
            results[(i, s)] = _run_cell(config, m, s)
    rows = [r for key in sorted(results) for r in results[key]]
    if out_csv is not None:
        write_report_csv(rows, out_csv)
    return rows


def write_report_csv(rows, path):
    """RFC-4180 CSV; the only nondeterministic content is a comment line."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(r.row())


def read_report_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        body = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(io.StringIO("".join(body)))
    if reader.fieldnames != CSV_COLUMNS:
        raise ValueError(f"bad report header: {reader.fieldnames}")
    for row in reader:
        rows.append(RegretReport(model=row["model"], family=row["family"],
                                 deg=int(row["deg"]), sigma=float(row["sigma"]),
                                 alpha_train=float(row["alpha_train"]),
                                 alpha_eval=float(row["alpha_eval"]),
                                 seed=int(row["seed"]),
                                 regret_pct=float(row["regret_pct"]),
                                 runtime_s=float(row["runtime_s"])))
    return rows


def summarize(rows):
    """Per (model, family, deg, sigma, alphas) mean and standard error."""
    groups = {}
    for r in rows:
        key = (r.model, r.family, r.deg, r.sigma, r.alpha_train, r.alpha_eval)
        groups.setdefault(key, []).append(r.regret_pct)
    out = []
    for key in sorted(groups):
        vals = groups[key]
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append({"key": key, "mean": mean, "stderr": se, "n": len(vals)})
    return out


# ---- theory suite --------------------------------------------------------


def _norm_quantiles(mu, sd, n=4000):
    inv = statistics.NormalDist(mu, sd).inv_cdf
    return np.array([inv((i + 0.5) / n) for i in range(n)])


def theory_suite(rng_seed=0):
    """Executable checks of the package's theoretical claims.

    Returns a list of {name, passed, detail} dicts; failures are entries,
    not exceptions.
    """
    rng = np.random.default_rng(rng_seed)
    report = []

    def record(name, passed, detail):
        report.append({"name": name, "passed": bool(passed), "detail": detail})

    # (a) RU identity exactness on integer-tail samples
    worst = 0.0
    for _ in range(1000):
        k = int(rng.choice([4, 8, 20, 40, 100]))
        alpha = float(rng.choice([0.25, 0.5, 1.0]))
        losses = rng.normal(0.0, 5.0, size=k)
        ru_val, _ = risk.cvar_ru(losses, alpha)
        worst = max(worst, abs(ru_val - risk.empirical_cvar(losses, alpha)))
    record("ru_identity", worst < 1e-9, f"max |RU - empirical| = {worst:.2e}")

    # (b) finite-sample convergence rate of the CVaR estimator
    slope = cvar_error_slope(rng)
    record("cvar_rate", -0.65 <= slope <= -0.35, f"log-log slope = {slope:.3f}")

    # (c) surrogate-loss bound on constructed 1-D Gaussian pairs
    violations, worst_margin = surrogate_bound_check(rng)
    record("surrogate_bound", violations == 0,
           f"{violations} violations; tightest margin = {worst_margin:.3e}")

    # (d) coherence battery
    ok, detail = coherence_battery(rng)
    record("coherence", ok, detail)
    return report


def cvar_error_slope(rng, alpha=0.1, true_cvar=0.95,
                     sizes=(100, 1000, 10000, 100000), replicates=200):
    """Slope of log median |error| vs log n for Uniform[0,1] tails."""
    medians = []
    for n in sizes:
        errs = []
        for _ in range(replicates):
            y = rng.random(n)
            val, _ = risk.cvar_ru(y, alpha)
            errs.append(abs(val - true_cvar))
        medians.append(np.median(errs))
    slope = np.polyfit(np.log(np.asarray(sizes, dtype=float)), np.log(medians), 1)[0]
    return float(slope)


def surrogate_bound_check(rng, n_pairs=100, n_quantiles=4000):
    """|loss(p) - loss(q)| <= 2 L_f E_x[W1(p, q)] on Gaussian pairs.

    Decisions share a sign and alpha >= 0.3, which keeps the constructed
    instances inside the regime where the bound's constant 2*L_f is valid.
    """
    violations = 0
    worst_margin = np.inf
    for _ in range(n_pairs):
        mu_p, mu_q = rng.uniform(-2, 2, size=2)
        sd_p, sd_q = rng.uniform(0.3, 2.0, size=2)
        w_theta, w_star = rng.uniform(0.2, 1.0, size=2)
        alpha = float(rng.choice([0.3, 0.5, 1.0]))
        l_f = max(abs(w_theta), abs(w_star))
        cp = _norm_quantiles(mu_p, sd_p, n_quantiles)
        cq = _norm_quantiles(mu_q, sd_q, n_quantiles)
        loss_p = risk.empirical_cvar((w_theta - w_star) * cp, alpha)
        loss_q = risk.empirical_cvar((w_theta - w_star) * cq, alpha)
        gap = abs(loss_p - loss_q)
        bound = 2.0 * l_f * risk.wasserstein1_1d(cp, cq)
        margin = bound - gap
        worst_margin = min(worst_margin, margin)
        if gap > bound + 1e-12:
            violations += 1
    return violations, float(worst_margin)


def coherence_battery(rng, trials=200):
    """Translation equivariance, positive homogeneity, subadditivity,
    monotonicity in alpha, CVaR >= VaR and CVaR >= mean."""
    for _ in range(trials):
        k = int(rng.choice([4, 8, 16]))
        alpha = float(rng.choice([0.25, 0.5, 1.0]))
        a = rng.normal(0.0, 3.0, size=k)
        b = rng.normal(0.0, 3.0, size=k)
        shift = float(rng.normal())
        scale = float(rng.uniform(0.1, 4.0))
        cv = risk.empirical_cvar(a, alpha)
        if abs(risk.empirical_cvar(a + shift, alpha) - (cv + shift)) > 1e-9:
            return False, "translation equivariance failed"
        if abs(risk.empirical_cvar(scale * a, alpha) - scale * cv) > 1e-9:
            return False, "positive homogeneity failed"
        if risk.empirical_cvar(a + b, alpha) > risk.empirical_cvar(a, alpha) + \
                risk.empirical_cvar(b, alpha) + 1e-9:
            return False, "subadditivity failed"
        if cv < risk.empirical_var(a, alpha) - 1e-12 or cv < np.mean(a) - 1e-12:
            return False, "CVaR >= VaR or CVaR >= mean failed"
        alphas = [(i + 1) / k for i in range(k)]
        cvs = [risk.empirical_cvar(a, al) for al in alphas]
        if any(cvs[i] < cvs[i + 1] - 1e-12 for i in range(len(cvs) - 1)):
            return False, "monotonicity in alpha failed"
    return True, f"{trials} randomized trials passed"


def theory_report_text(report):
    lines = []
    for entry in report:
        status = "PASS" if entry["passed"] else "FAIL"
        lines.append(f"[{status}] {entry['name']}: {entry['detail']}")
    return "\n".join(lines)
