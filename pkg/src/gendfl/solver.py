"""Decision optimization over the four feasible-set families.

Provides Euclidean projections (bisection on the capacity/equality dual,
Dykstra for the grid-flow polytope), CVaR-SAA solves by projected
subgradient with smoothing anneal and restarts, a differentiable unrolled
variant whose iterates live on the autodiff graph, and exact point-estimate
solves (greedy knapsack/schedule, Dijkstra shortest path).

Graph-mode projections recompute the active set numerically and express
the dual variable through graph ops, so gradients are exact almost
everywhere.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import risk
from .autodiff import Tensor

_FEAS_TOL = 1e-8


class InfeasibleError(ValueError):
    pass


@dataclass
class FeasibleSet:
    """Tagged union over the supported constraint families.

    kind:
      "capacity"  -- w in [0, ub], a.w <= cap   (capped simplex, knapsack)
      "schedule"  -- lb <= w <= ub, sum(w) = total
      "grid_flow" -- unit s-t flow polytope on a square grid, w in [0,1]
    """

    kind: str
    n: int
    ub: np.ndarray = None
    a: np.ndarray = None
    cap: float = None
    lb: np.ndarray = None
    total: float = None
    A: np.ndarray = None
    b: np.ndarray = None
    A_pinv: np.ndarray = field(default=None, repr=False)
    grid_size: int = None

    def validate(self):
        if self.kind == "capacity":
            if self.cap is None or self.cap <= 0 or np.any(self.a <= 0):
                raise InfeasibleError("capacity set needs cap > 0 and positive weights")
        elif self.kind == "schedule":
            if np.any(self.lb > self.ub):
                raise InfeasibleError("schedule bounds must satisfy lb <= ub")
            if not (self.lb.sum() - _FEAS_TOL <= self.total <= self.ub.sum() + _FEAS_TOL):
                raise InfeasibleError("schedule total outside [sum lb, sum ub]")
        elif self.kind != "grid_flow":
            raise InfeasibleError(f"unknown feasible-set kind '{self.kind}'")
        return self


def capped_simplex(n):
    """w in [0,1]^n, 1.w <= 1."""
    return FeasibleSet(kind="capacity", n=n, ub=np.ones(n), a=np.ones(n),
                       cap=1.0).validate()


def weighted_capacity(weights, cap):
    """w in [0,1]^n, weights.w <= cap."""
    weights = np.asarray(weights, dtype=np.float64)
    return FeasibleSet(kind="capacity", n=weights.size, ub=np.ones(weights.size),
                       a=weights, cap=float(cap)).validate()


def schedule(lb, ub, total):
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    return FeasibleSet(kind="schedule", n=lb.size, lb=lb, ub=ub,
                       total=float(total)).validate()


def grid_arcs(size):
    """East/south arcs of a size x size grid, row-major node order.

    Returns (arcs, n_arcs) where arcs is a list of (from_node, to_node).
    """
    arcs = []
    for i in range(size):
        for j in range(size):
            u = i * size + j
            if j + 1 < size:
                arcs.append((u, u + 1))
            if i + 1 < size:
                arcs.append((u, u + size))
    return arcs


def grid_flow(size):
    """Unit s-t flow polytope on the size x size grid (top-left to bottom-right)."""
    arcs = grid_arcs(size)
    n_nodes, n_arcs = size * size, len(arcs)
    A = np.zeros((n_nodes, n_arcs))
    for e, (u, v) in enumerate(arcs):
        A[u, e] = 1.0
        A[v, e] = -1.0
    b = np.zeros(n_nodes)
    b[0] = 1.0
    b[n_nodes - 1] = -1.0
    return FeasibleSet(kind="grid_flow", n=n_arcs, ub=np.ones(n_arcs),
                       A=A, b=b, A_pinv=np.linalg.pinv(A), grid_size=size).validate()


# ---- projections ---------------------------------------------------------


def _bisect_decreasing(fn, lo, hi, iters=100):
    """Root of a non-increasing fn on [lo, hi] with fn(lo) >= 0 >= fn(hi)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _capacity_lambda(v, fs):
    """Dual multiplier for the capacity constraint (0 if inactive)."""
    w0 = np.clip(v, 0.0, fs.ub)
    if fs.a @ w0 <= fs.cap + 1e-14:
        return 0.0
    hi = 1.0
    while fs.a @ np.clip(v - hi * fs.a, 0.0, fs.ub) > fs.cap:
        hi *= 2.0
    return _bisect_decreasing(
        lambda lam: fs.a @ np.clip(v - lam * fs.a, 0.0, fs.ub) - fs.cap, 0.0, hi)


def _schedule_mu(v, fs):
    """Shift making sum(clip(v - mu, lb, ub)) == total."""
    lo = float(np.min(v - fs.ub)) - 1.0
    hi = float(np.max(v - fs.lb)) + 1.0
    return _bisect_decreasing(
        lambda mu: np.clip(v - mu, fs.lb, fs.ub).sum() - fs.total, lo, hi)


def project(v, fs, sweeps=200, drift_tol=1e-9):
    """Euclidean projection of a plain numpy point onto the feasible set."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (fs.n,):
        raise ValueError(f"expected point of dim {fs.n}, got {v.shape}")
    if fs.kind == "capacity":
        lam = _capacity_lambda(v, fs)
        return np.clip(v - lam * fs.a, 0.0, fs.ub)
    if fs.kind == "schedule":
        mu = _schedule_mu(v, fs)
        return np.clip(v - mu, fs.lb, fs.ub)
    # grid_flow: Dykstra between the box and the flow-conservation subspace
    w = v.copy()
    p_box = np.zeros_like(w)
    for _ in range(sweeps):
        y = np.clip(w + p_box, 0.0, 1.0)
        p_box = w + p_box - y
        w_new = y - fs.A_pinv @ (fs.A @ y - fs.b)
        if np.max(np.abs(w_new - w)) < drift_tol:
            w = w_new
            break
        w = w_new
    return np.clip(w, 0.0, 1.0)


def project_graph(v, fs):
    """Projection as a graph op: numeric active set, symbolic dual.

    At the current point the result equals `project(value(v))`; gradients
    are those of the active-set-smooth projection (correct a.e.).
    """
    vv = ad.value(v)
    if fs.kind == "capacity":
        lam_num = _capacity_lambda(vv, fs)
        if lam_num == 0.0:
            return ad.clip(v, 0.0, fs.ub)
        w_num = np.clip(vv - lam_num * fs.a, 0.0, fs.ub)
        free = (w_num > 1e-10) & (w_num < fs.ub - 1e-10)
        if not free.any():
            return ad.clip(v - lam_num * fs.a, 0.0, fs.ub)
        high = w_num >= fs.ub - 1e-10
        const_part = float(fs.a[high] @ fs.ub[high]) - fs.cap
        lam = ((v[free] * fs.a[free]).sum() + const_part) / float(fs.a[free] @ fs.a[free])
        return ad.clip(v - lam * fs.a, 0.0, fs.ub)
    if fs.kind == "schedule":
        mu_num = _schedule_mu(vv, fs)
        w_num = np.clip(vv - mu_num, fs.lb, fs.ub)
        free = (w_num > fs.lb + 1e-10) & (w_num < fs.ub - 1e-10)
        if not free.any():
            return ad.clip(v - mu_num, fs.lb, fs.ub)
        high = w_num >= fs.ub - 1e-10
        low = w_num <= fs.lb + 1e-10
        const_part = float(fs.ub[high].sum() + fs.lb[low].sum()) - fs.total
        mu = (v[free].sum() + const_part) / float(free.sum())
        return ad.clip(v - mu, fs.lb, fs.ub)
    # grid_flow: fixed alternating sweeps, all linear/clip graph ops
    w = v
    for _ in range(40):
        y = ad.clip(w, 0.0, 1.0)
        w = y - fs.A_pinv @ (fs.A @ y - fs.b)
    return w


def feasibility_residual(w, fs):
    """Max constraint violation of a plain point."""
    w = np.asarray(w, dtype=np.float64)
    if fs.kind == "capacity":
        return max(float(np.max(-w)), float(np.max(w - fs.ub)),
                   float(fs.a @ w - fs.cap), 0.0)
    if fs.kind == "schedule":
        return max(float(np.max(fs.lb - w)), float(np.max(w - fs.ub)),
                   abs(float(w.sum() - fs.total)), 0.0)
    return max(float(np.max(-w)), float(np.max(w - 1.0)),
               float(np.max(np.abs(fs.A @ w - fs.b))), 0.0)


def midpoint(fs):
    """Projection of the bound-box midpoint; the solver's default start."""
    if fs.kind == "capacity":
        return project(0.5 * fs.ub, fs)
    if fs.kind == "schedule":
        return project(0.5 * (fs.lb + fs.ub), fs)
    return project(np.full(fs.n, 0.5), fs)


# ---- family objectives ---------------------------------------------------


def family_losses(spec, C, w):
    """Per-sample losses f(c_k, w); works on Tensors and arrays.

    C has shape (K, n); the result has shape (K,).
    """
    lin = C @ w
    if spec.family == "portfolio":
        quad = (spec.cov @ w) @ w if isinstance(w, Tensor) else float(w @ spec.cov @ w)
        return -lin + quad
    if spec.family == "knapsack":
        return -lin
    return lin


def weighted_grad(spec, C, w, weights):
    """sum_k weights_k * grad_w f(c_k, w) as a graph-compatible expression."""
    lin = weights @ C
    if spec.family == "portfolio":
        return -lin + (spec.cov @ w) * (2.0 * weights.sum())
    if spec.family == "knapsack":
        return -lin
    return lin


# ---- CVaR-SAA solves -----------------------------------------------------


@dataclass
class SolverConfig:
    max_iters: int = 600
    step0: float = 0.5
    restarts: int = 3
    tol: float = 1e-9
    unroll: int = 40
    tau0: float = None       # default: 0.05 * (loss IQR + 1e-9)
    tau_anneal: float = 0.5  # per restart
    seed: int = 0
    track_best: bool = True  # unrolled mode: keep the best iterate, not the last

    def __post_init__(self):
        if self.max_iters < 0 or self.restarts < 1 or self.unroll < 0:
            raise ValueError("counts must be positive")
        if self.tol <= 0 or self.step0 <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Decision:
    w: np.ndarray
    eta: float
    objective: float
    iterations: int
    converged: bool
    w_graph: object = None          # Tensor, unrolled mode only
    objective_graph: object = None  # Tensor, unrolled mode only


def _var_index(loss_values, alpha):
    """Index of the empirical VaR element (tail boundary), ties by position."""
    k_tail = risk.tail_size(loss_values.size, alpha)
    order = np.argsort(-loss_values, kind="stable")
    return int(order[k_tail - 1])


def _saa_descent(spec, C, alpha, fs, w0, tau, n_iters, step0, track_best=True):
    """Shared iteration for the numeric and unrolled solves.

    If C (and hence the iterates) are Tensors, every update is recorded on
    the graph; otherwise this is plain numpy. Returns (w, eta, history).
    """
    graph_mode = isinstance(C, Tensor)
    w = Tensor(w0) if graph_mode else w0.copy()
    best_w, best_val = None, np.inf
    alpha_k = alpha * ad.value(C).shape[0]
    eta = None
    for t in range(n_iters):
        losses = family_losses(spec, C, w)
        lvals = ad.value(losses)
        k = lvals.size
        if risk.tail_size(k, alpha) == k:
            # full tail: plain expectation, uniform weights
            if graph_mode:
                s = Tensor(np.ones(k))
            else:
                s = np.ones(k)
        else:
            eta = losses[_var_index(lvals, alpha)]
            s = ad.sigmoid((losses - eta) * (1.0 / tau))
        g = weighted_grad(spec, C, w, s * (1.0 / alpha_k))
        gnorm_val = float(np.linalg.norm(ad.value(g)))
        if gnorm_val < 1e-14:
            break
        if graph_mode:
            # keep the step on the graph so unrolled gradients match
            # finite differences of the whole trajectory
            gnorm = ((g * g).sum() + 1e-30) ** 0.5
            step = (1.0 / gnorm) * (step0 / np.sqrt(t + 1.0))
            w = project_graph(w - g * step, fs)
        else:
            step = step0 / (np.sqrt(t + 1.0) * gnorm_val)
            w = project(w - step * g, fs)
        if track_best:
            val = risk.empirical_cvar(
                ad.value(family_losses(spec, C, w)), alpha)
            if val < best_val - 1e-15:
                best_val = val
                best_w = w if graph_mode else w.copy()
    if track_best and best_w is not None:
        return best_w, eta, best_val
    return w, eta, None


def solve_cvar_saa(spec, samples, alpha, cfg=None):
    """Minimize the SAA CVaR objective over the feasible set.

    Projected subgradient on the smoothed RU objective with the tail
    threshold recomputed each iterate, annealed smoothing across restarts,
    best-iterate tracking. For alpha=1 this is plain expectation SAA.
    """
    cfg = cfg or SolverConfig()
    C = np.asarray(samples, dtype=np.float64)
    if C.ndim == 1:
        C = C.reshape(1, -1)
    fs = spec.feasible
    if C.shape[1] != fs.n:
        raise ValueError("sample dimension does not match the feasible set")
    if alpha >= 1.0:
        # expectation SAA: every family objective is linear in c apart from
        # a c-independent quadratic, so the mean sample solves it exactly
        dec = solve_pointwise(spec, C.mean(axis=0), cfg)
        value, eta = risk.cvar_ru(family_losses(spec, C, dec.w), 1.0)
        return Decision(w=dec.w, eta=eta, objective=value,
                        iterations=dec.iterations, converged=True)
    rng = np.random.default_rng(cfg.seed)
    base_losses = family_losses(spec, C, midpoint(fs))
    tau0 = cfg.tau0 if cfg.tau0 is not None else max(risk.default_tau(base_losses), 1e-9)

    best_w, best_val = midpoint(fs), risk.empirical_cvar(
        family_losses(spec, C, midpoint(fs)), alpha)
    total_iters = 0
    prev_best = np.inf
    for r in range(cfg.restarts):
        w0 = midpoint(fs) if r == 0 else project(rng.uniform(-0.5, 1.5, size=fs.n), fs)
        if r > 0:
            w0 = 0.5 * (w0 + best_w)  # pull restarts toward the incumbent
        tau = tau0 * cfg.tau_anneal**r
        w, _, val = _saa_descent(spec, C, alpha, fs, w0, tau,
                                 cfg.max_iters, cfg.step0)
        total_iters += cfg.max_iters
        if val is not None and val < best_val:
            best_val, best_w = val, w
        converged = abs(prev_best - best_val) < cfg.tol
        prev_best = best_val
    final_losses = family_losses(spec, C, best_w)
    value, eta = risk.cvar_ru(final_losses, alpha)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite SAA objective")
    resid = feasibility_residual(best_w, fs)
    if resid > _FEAS_TOL:
        best_w = project(best_w, fs)
    return Decision(w=best_w, eta=eta, objective=value,
                    iterations=total_iters, converged=bool(converged))


def solve_cvar_saa_unrolled(spec, samples, alpha, cfg=None):
    """Differentiable CVaR-SAA: `cfg.unroll` smoothed projected-gradient
    steps recorded on the autodiff graph.

    `samples` must be a Tensor (K, n) carrying gradient provenance; the
    returned Decision exposes `w_graph` and `objective_graph` Tensors whose
    gradients reach the samples (and through them the generative model).

    With `cfg.track_best` the returned iterate is chosen by a numeric
    comparison, which is piecewise constant in the samples; finite-difference
    checks of quantities downstream of `w_graph` should set it to False.
    """
    cfg = cfg or SolverConfig()
    if not isinstance(samples, Tensor):
        raise TypeError("unrolled solve needs Tensor samples")
    fs = spec.feasible
    C_vals = ad.value(samples)
    w0 = midpoint(fs)
    tau0 = cfg.tau0 if cfg.tau0 is not None else max(
        risk.default_tau(family_losses(spec, C_vals, w0)), 1e-9)
    if cfg.unroll == 0:
        w = project_graph(Tensor(w0), fs)
    else:
        w, _, _ = _saa_descent(spec, samples, alpha, fs, w0, tau0,
                               cfg.unroll, cfg.step0, track_best=cfg.track_best)
    losses = family_losses(spec, samples, w)
    lvals = ad.value(losses)
    eta = losses[_var_index(lvals, alpha)]
    obj = risk.smoothed_cvar(losses, eta, alpha, tau0)
    value, eta_num = risk.cvar_ru(lvals, alpha)
    return Decision(w=ad.value(w).copy(), eta=eta_num, objective=value,
                    iterations=cfg.unroll, converged=True,
                    w_graph=w, objective_graph=obj)


# ---- point-estimate solves ----------------------------------------------


def _greedy_capacity(c, fs):
    """Exact max c.w over a capacity set (fractional knapsack greedy)."""
    w = np.zeros(fs.n)
    remaining = fs.cap
    order = np.argsort(-c / fs.a, kind="stable")
    for i in order:
        if c[i] <= 0 or remaining <= 0:
            break
        take = min(fs.ub[i], remaining / fs.a[i])
        w[i] = take
        remaining -= take * fs.a[i]
    return w


def _greedy_schedule(c, fs):
    """Exact min c.w over a schedule set: fill cheapest slots first."""
    w = fs.lb.copy()
    remaining = fs.total - fs.lb.sum()
    for i in np.argsort(c, kind="stable"):
        if remaining <= 1e-15:
            break
        take = min(fs.ub[i] - fs.lb[i], remaining)
        w[i] += take
        remaining -= take
    return w


def dijkstra_grid(costs, size):
    """Shortest s-t path on the grid as an arc-indicator vector.

    Requires nonnegative arc costs. Returns (w, path_cost).
    """
    import heapq

    costs = np.asarray(costs, dtype=np.float64)
    if np.any(costs < 0):
        raise ValueError("Dijkstra requires nonnegative arc costs")
    arcs = grid_arcs(size)
    out_arcs = {}
    for e, (u, v) in enumerate(arcs):
        out_arcs.setdefault(u, []).append((e, v))
    n_nodes = size * size
    dist = np.full(n_nodes, np.inf)
    prev_arc = np.full(n_nodes, -1, dtype=int)
    dist[0] = 0.0
    heap = [(0.0, 0)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u] + 1e-15:
            continue
        for e, v in out_arcs.get(u, []):
            nd = d + costs[e]
            if nd < dist[v] - 1e-15:
                dist[v] = nd
                prev_arc[v] = e
                heapq.heappush(heap, (nd, v))
    w = np.zeros(len(arcs))
    node = n_nodes - 1
    while node != 0:
        e = prev_arc[node]
        w[e] = 1.0
        node = arcs[e][0]
    return w, float(dist[n_nodes - 1])


def solve_pointwise(spec, c_hat, cfg=None):
    """Solve min_w f(c_hat, w): exact combinatorial shortcut where one
    exists, projected gradient otherwise."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    fs = spec.feasible
    if c_hat.shape != (fs.n,):
        raise ValueError("point estimate dimension mismatch")

    if spec.family == "knapsack":
        w = _greedy_capacity(c_hat, fs)
    elif spec.family == "energy":
        w = _greedy_schedule(c_hat, fs)
    elif spec.family == "shortest_path" and np.all(c_hat >= 0):
        w, _ = dijkstra_grid(c_hat, fs.grid_size)
    elif spec.family == "portfolio" and not np.any(spec.cov):
        w = _greedy_capacity(c_hat, fs)  # linear objective: greedy is exact
    else:
        cfg = cfg or SolverConfig()
        w = midpoint(fs)
        lam_max = float(np.linalg.norm(spec.cov, 2)) if spec.family == "portfolio" else 0.0
        for t in range(max(cfg.max_iters, 2000)):
            g = weighted_grad(spec, c_hat.reshape(1, -1), w, np.ones(1))
            if lam_max > 0:
                step = 1.0 / (2.0 * lam_max)
            else:
                step = cfg.step0 / (np.sqrt(t + 1.0) * (np.linalg.norm(g) + 1e-12))
            w_new = project(w - step * g, fs)
            if np.max(np.abs(w_new - w)) < cfg.tol:
                w = w_new
                break
            w = w_new
    obj = float(family_losses(spec, c_hat.reshape(1, -1), w)[0])
    if not np.isfinite(obj):
        raise FloatingPointError("non-finite pointwise objective")
    return Decision(w=w, eta=obj, objective=obj, iterations=0, converged=True)
