"""Acceptance gate: one test per top-level criterion, each printing a
single pass/fail line with its measured quantity and runtime."""

import time

import numpy as np
import pytest

from gendfl import autodiff as ad, evaluate, problems, risk, solver, train
from gendfl.flow import Flow, FlowConfig
from gendfl.problems import GenConfig
from gendfl.solver import SolverConfig


def _report(name, passed, detail):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


# ---- exact property criteria ---------------------------------------------


def test_ru_identity():
    """RU reformulation equals the empirical CVaR whenever alpha*K is an
    integer: 1000 random loss vectors, error < 1e-9, under 5 s."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.choice([4, 8, 20, 40, 100]))
        alpha = float(rng.choice([0.25, 0.5, 1.0]))
        losses = rng.normal(0.0, 5.0, size=k)
        ru_val, _ = risk.cvar_ru(losses, alpha)
        worst = max(worst, abs(ru_val - risk.empirical_cvar(losses, alpha)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5.0
    _report("ru_identity", ok, f"max error {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 5.0


def test_cvar_finite_sample_rate():
    """Median CVaR estimation error on Uniform[0,1] tails decays with a
    log-log slope in [-0.65, -0.35] over n up to 1e5, 200 replicates."""
    t0 = time.perf_counter()
    slope = evaluate.cvar_error_slope(np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    ok = -0.65 <= slope <= -0.35 and elapsed < 60.0
    _report("cvar_rate", ok, f"slope {slope:.3f} in {elapsed:.1f}s")
    assert -0.65 <= slope <= -0.35
    assert elapsed < 60.0


def test_surrogate_loss_bound():
    """|loss(p) - loss(q)| <= 2 L_f E[W1(p,q)] on 100 constructed 1-D
    Gaussian pairs, zero violations, under 30 s."""
    t0 = time.perf_counter()
    violations, margin = evaluate.surrogate_bound_check(np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 30.0
    _report("surrogate_bound", ok,
            f"{violations} violations, tightest margin {margin:.3e}, {elapsed:.1f}s")
    assert violations == 0
    assert elapsed < 30.0


def test_autodiff_and_flow():
    """Gradient checks under 1e-4, flow round trip under 1e-6, and 2-D
    density quadrature mass within 2%, all inside 60 s."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    params = {"W1": rng.normal(0, 0.5, (3, 8)), "b1": rng.normal(0, 0.5, 8),
              "W2": rng.normal(0, 0.5, (8, 1)), "b2": rng.normal(0, 0.5, 1)}
    xb = rng.normal(0, 1, (4, 3))

    def mlp(p):
        return (ad.tanh(xb @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]).sum()

    grad_err = ad.finite_diff_check(mlp, params)

    fl = Flow(FlowConfig(d_c=2, d_x=2), rng=np.random.default_rng(1))
    for k in fl.params:
        fl.params[k] = fl.params[k] + rng.normal(0, 0.05, fl.params[k].shape)
    C = rng.normal(0, 1, (5, 2))
    X = rng.normal(0, 1, (5, 2))
    nll_err = ad.finite_diff_check(lambda p: fl.nll_loss(C, X, p), fl.params)

    c = rng.normal(0, 1, (1000, 2))
    x = rng.normal(0, 1, (1000, 2))
    z, _ = fl.forward_map(c, x)
    round_trip = float(np.max(np.abs(ad.value(fl.inverse_map(ad.value(z), x)) - c)))

    x0 = np.array([[0.3, -0.5]])
    samples = ad.value(fl.sample(x0[0], 4000, np.random.default_rng(2)))
    lo = np.percentile(samples, 0.05, axis=0)
    hi = np.percentile(samples, 99.95, axis=0)
    pad = 0.5 * (hi - lo)
    g1 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], 601)
    g2 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], 601)
    G1, G2 = np.meshgrid(g1, g2)
    pts = np.stack([G1.ravel(), G2.ravel()], axis=1)
    lp = ad.value(fl.log_prob(pts, np.repeat(x0, pts.shape[0], axis=0)))
    mass_err = abs(np.exp(lp).sum() * (g1[1] - g1[0]) * (g2[1] - g2[0]) - 1.0)

    elapsed = time.perf_counter() - t0
    ok = grad_err < 1e-4 and nll_err < 1e-4 and round_trip < 1e-6 \
        and mass_err < 0.02 and elapsed < 60.0
    _report("autodiff_flow", ok,
            f"grads {max(grad_err, nll_err):.1e}, round trip {round_trip:.1e}, "
            f"mass error {mass_err:.4f}, {elapsed:.1f}s")
    assert grad_err < 1e-4 and nll_err < 1e-4
    assert round_trip < 1e-6
    assert mass_err < 0.02
    assert elapsed < 60.0


def test_solver_against_oracles():
    """Projection KKT cases at 1e-8, knapsack greedy at 1e-6, Dijkstra on
    50 instances, and the 2-asset grid oracle at 1e-3, inside 120 s."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    proj = solver.project(np.array([0.8, 0.7]), solver.capped_simplex(2))
    proj_err = float(np.max(np.abs(proj - [0.55, 0.45])))
    fs2 = solver.FeasibleSet(kind="capacity", n=2, ub=np.ones(2),
                             a=np.ones(2), cap=2.0).validate()
    proj_err = max(proj_err, float(np.max(np.abs(
        solver.project(np.array([2.0, 2.0]), fs2) - 1.0))))

    greedy_err = 0.0
    for seed in range(5):
        _, kspec = problems.gen_knapsack(GenConfig(n=4, d_x=2, d_c=6, deg=1,
                                                   sigma=1, seed=seed))
        c = rng.uniform(0.1, 1.0, (1, 6))
        dec = solver.solve_cvar_saa(kspec, c, 1.0)
        greedy_err = max(greedy_err, abs(dec.objective -
                                         solver.solve_pointwise(kspec, c[0]).objective))

    _, pspec = problems.gen_shortest_path(GenConfig(n=2, d_x=3, d_c=40, deg=1,
                                                    sigma=5, seed=0))
    dijkstra_err = 0.0
    for _ in range(50):
        costs = rng.uniform(0.5, 3.0, 40)
        dec = solver.solve_pointwise(pspec, costs)
        _, dist = solver.dijkstra_grid(costs, 5)
        dijkstra_err = max(dijkstra_err, abs(dec.objective - dist))

    grid_rng = np.random.default_rng(0)
    cov = np.array([[0.05, 0.01], [0.01, 0.02]])
    spec2 = problems.ProblemSpec(family="portfolio", d_x=1, d_c=2,
                                 feasible=solver.capped_simplex(2), cov=cov)
    C = grid_rng.normal([0.30, 0.18], [0.20, 0.10], size=(50, 2))
    dec = solver.solve_cvar_saa(spec2, C, 0.3)
    g = np.linspace(0, 1, 401)
    W = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    W = W[W.sum(axis=1) <= 1.0 + 1e-12]
    L = -C @ W.T + np.einsum("ij,jk,ik->i", W, cov, W)[None, :]
    k = risk.tail_size(50, 0.3)
    grid_best = np.sort(L, axis=0)[::-1][:k].mean(axis=0).min()
    grid_gap = dec.objective - grid_best

    elapsed = time.perf_counter() - t0
    ok = proj_err < 1e-8 and greedy_err < 1e-6 and dijkstra_err < 1e-9 \
        and grid_gap < 1e-3 and elapsed < 120.0
    _report("solver_oracles", ok,
            f"projection {proj_err:.1e}, greedy {greedy_err:.1e}, "
            f"dijkstra {dijkstra_err:.1e}, grid gap {grid_gap:.1e}, {elapsed:.1f}s")
    assert proj_err < 1e-8
    assert greedy_err < 1e-6
    assert dijkstra_err < 1e-9
    assert grid_gap < 1e-3
    assert elapsed < 120.0


# ---- desk-scale end-to-end criteria --------------------------------------

SEEDS = list(range(10))
PHASES = ("proxy", "gendfl", "beta0", "alpha1", "pto",
          "eval_gendfl", "eval_beta0", "eval_alpha1", "eval_pto")


def _run_desk_seed(seed, regrets, times):
    """Portfolio deg=2 sigma=20 cell: all four models trained and scored
    on a common holdout with paired oracle draws."""
    data, spec = problems.gen_portfolio(
        GenConfig(n=320, d_x=5, d_c=10, deg=2, sigma=20, seed=seed))
    scfg = SolverConfig(max_iters=200, restarts=2, unroll=15)
    base = dict(batch_size=32, n_samples=32, proxy_samples=128, seed=seed,
                solver=scfg)
    gkw = dict(epochs=6, regret_subsample=16, lr=5e-4)

    t0 = time.perf_counter()
    proxy = train.train_proxy(data, spec,
                              train.TrainConfig(epochs=30, alpha=0.5, **base))
    times["proxy"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    fl = train.train_gendfl(data, spec,
                            train.TrainConfig(alpha=0.5, beta=10.0, **gkw, **base),
                            proxy)
    times["gendfl"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    fl0 = train.train_gendfl(data, spec,
                             train.TrainConfig(alpha=0.5, beta=0.0, **gkw, **base),
                             proxy)
    times["beta0"] += time.perf_counter() - t0

    proxy1 = train.ProxyModel(proxy.flow, spec, 1.0, scfg, seed=seed)
    t0 = time.perf_counter()
    fl1 = train.train_gendfl(data, spec,
                             train.TrainConfig(alpha=1.0, beta=10.0, **gkw, **base),
                             proxy1)
    times["alpha1"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    pto = train.train_pto(data, train.TrainConfig(epochs=30, alpha=0.5, **base))
    times["pto"] += time.perf_counter() - t0

    holdout = np.random.default_rng((seed, 99)).standard_normal((80, 5))
    ecfg = SolverConfig(max_iters=300, restarts=3)
    deciders = [
        ("gendfl", evaluate.gendfl_decider(fl, spec, 0.5, 32, scfg, seed=seed)),
        ("beta0", evaluate.gendfl_decider(fl0, spec, 0.5, 32, scfg, seed=seed)),
        ("alpha1", evaluate.gendfl_decider(fl1, spec, 1.0, 32, scfg, seed=seed)),
        ("pto", evaluate.pointwise_decider(pto, spec)),
    ]
    for name, dec in deciders:
        t0 = time.perf_counter()
        pct, _, _ = evaluate.relative_regret(dec, spec, data.truth.resample,
                                             holdout, 0.5, 1000, ecfg, seed=seed)
        times[f"eval_{name}"] += time.perf_counter() - t0
        regrets[name].append(pct)


@pytest.fixture(scope="module")
def desk_scale():
    """Trains gendfl / beta0 / alpha1 / pto on 10 seeds of the desk-scale
    portfolio and collects paired relative regrets plus per-phase times."""
    regrets = {"gendfl": [], "beta0": [], "alpha1": [], "pto": []}
    times = dict.fromkeys(PHASES, 0.0)
    for seed in SEEDS:
        _run_desk_seed(seed, regrets, times)
    return regrets, times


def _wins(a, b):
    return sum(x < y for x, y in zip(a, b))


def test_gendfl_beats_pto(desk_scale):
    """Generative end-to-end training beats two-stage MSE prediction on
    at least 8 of 10 seeds, within a 15 minute budget."""
    regrets, times = desk_scale
    wins = _wins(regrets["gendfl"], regrets["pto"])
    budget = times["proxy"] + times["gendfl"] + times["pto"] \
        + times["eval_gendfl"] + times["eval_pto"]
    ok = wins >= 8 and budget < 900.0
    _report("gendfl_vs_pto", ok, f"{wins}/10 seeds, {budget:.0f}s of 900s")
    assert wins >= 8
    assert budget < 900.0


def test_beta_ablation(desk_scale):
    """The decision-regret term helps: beta=10 beats beta=0 on at least
    8 of 10 seeds, within a 15 minute budget."""
    regrets, times = desk_scale
    wins = _wins(regrets["gendfl"], regrets["beta0"])
    budget = times["proxy"] + times["gendfl"] + times["beta0"] \
        + times["eval_gendfl"] + times["eval_beta0"]
    ok = wins >= 8 and budget < 900.0
    _report("beta_ablation", ok, f"{wins}/10 seeds, {budget:.0f}s of 900s")
    assert wins >= 8
    assert budget < 900.0


def test_risk_matching(desk_scale):
    """Training at the evaluation risk level pays off: alpha_train=0.5
    beats alpha_train=1.0 at alpha_eval=0.5 on at least 7 of 10 seeds,
    within a 20 minute budget."""
    regrets, times = desk_scale
    wins = _wins(regrets["gendfl"], regrets["alpha1"])
    budget = times["proxy"] + times["gendfl"] + times["alpha1"] \
        + times["eval_gendfl"] + times["eval_alpha1"]
    ok = wins >= 7 and budget < 1200.0
    _report("risk_matching", ok, f"{wins}/10 seeds, {budget:.0f}s of 1200s")
    assert wins >= 7
    assert budget < 1200.0


def test_regret_floor(desk_scale):
    """Every reported relative regret is above -0.1% (non-negativity up
    to solver tolerance)."""
    regrets, _ = desk_scale
    floor = min(min(v) for v in regrets.values())
    ok = floor >= -0.1
    _report("regret_floor", ok, f"minimum regret {floor:.4f}%")
    assert floor >= -0.1
