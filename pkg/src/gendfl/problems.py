"""The four problem families and their synthetic data generators.

Portfolio / knapsack / shortest-path parameters come from a polynomial
feature map plus factor noise; the energy family reads (or synthesizes)
half-hourly day-ahead price CSVs. Generators are pure given the seed and
keep their ground truth, so fresh conditional draws c|x are available for
oracle evaluation.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import solver

VALID_DEGREES = (1, 2, 4, 6, 8)

ENERGY_SLOTS = 48
ENERGY_TOTAL = 24.0
FACTOR_RANK = 5
GRID_SIZE = 5


@dataclass
class GenConfig:
    n: int
    d_x: int
    d_c: int
    deg: int = 2
    sigma: float = 20.0
    factor_rank: int = FACTOR_RANK
    seed: int = 0

    def __post_init__(self):
        if self.deg not in VALID_DEGREES:
            raise ValueError(f"deg must be one of {VALID_DEGREES}")
        if self.sigma < 0 or self.n < 1:
            raise ValueError("need sigma >= 0 and n >= 1")


@dataclass
class ProblemSpec:
    family: str  # portfolio | knapsack | shortest_path | energy
    d_x: int
    d_c: int
    feasible: solver.FeasibleSet
    cov: np.ndarray = None  # portfolio only: LL^T + (0.01 sigma)^2 I


@dataclass
class GroundTruth:
    """Generator state enabling fresh conditional draws c|x."""

    family: str
    B: np.ndarray
    L: np.ndarray
    sigma: float
    deg: int
    d_x: int

    def mean_c(self, x):
        """Analytic conditional mean of c given x (noise averaged out)."""
        if self.family in ("portfolio", "knapsack"):
            base = (0.05 / np.sqrt(self.d_x)) * (self.B @ x) + 0.1
            return base**self.deg
        base = (1.0 / 3.5**self.deg) * ((1.0 / np.sqrt(self.d_x)) * (self.B @ x) + 3.0) ** self.deg + 1.0
        return base  # E[eps] = 1 for Uniform[0.5, 1.5]

    def resample(self, x, m, rng):
        """m fresh draws of c|x (resamples the noise only)."""
        if self.family in ("portfolio", "knapsack"):
            base = (0.05 / np.sqrt(self.d_x)) * (self.B @ x) + 0.1
            det = base**self.deg
            f = rng.standard_normal((m, self.L.shape[1]))
            eps = rng.standard_normal((m, det.size))
            return det[None, :] + f @ self.L.T + 0.01 * self.sigma * eps
        det = (1.0 / 3.5**self.deg) * ((1.0 / np.sqrt(self.d_x)) * (self.B @ x) + 3.0) ** self.deg + 1.0
        eps = rng.uniform(0.5, 1.5, size=(m, det.size))
        return det[None, :] * eps


@dataclass
class Dataset:
    X: np.ndarray
    C: np.ndarray
    truth: GroundTruth = None

    def __post_init__(self):
        if self.X.shape[0] != self.C.shape[0]:
            raise ValueError("feature/parameter row counts differ")

    @property
    def n(self):
        return self.X.shape[0]


def _poly_factor_samples(cfg, rng, B, L):
    X = rng.standard_normal((cfg.n, cfg.d_x))
    base = (0.05 / np.sqrt(cfg.d_x)) * (X @ B.T) + 0.1
    det = base**cfg.deg
    f = rng.standard_normal((cfg.n, cfg.factor_rank))
    eps = rng.standard_normal((cfg.n, cfg.d_c))
    C = det + f @ L.T + 0.01 * cfg.sigma * eps
    return X, C


def gen_portfolio(cfg):
    """Portfolio: min CVaR[-c.w + w' Sigma w], w in [0,1]^n, 1.w <= 1."""
    rng = np.random.default_rng(cfg.seed)
    B = rng.binomial(1, 0.5, size=(cfg.d_c, cfg.d_x)).astype(np.float64)
    L = rng.uniform(-0.0025 * cfg.sigma, 0.0025 * cfg.sigma,
                    size=(cfg.d_c, cfg.factor_rank))
    X, C = _poly_factor_samples(cfg, rng, B, L)
    cov = L @ L.T + (0.01 * cfg.sigma) ** 2 * np.eye(cfg.d_c)
    spec = ProblemSpec(family="portfolio", d_x=cfg.d_x, d_c=cfg.d_c,
                       feasible=solver.capped_simplex(cfg.d_c), cov=cov)
    truth = GroundTruth("portfolio", B, L, cfg.sigma, cfg.deg, cfg.d_x)
    return Dataset(X, C, truth), spec


def gen_knapsack(cfg):
    """Knapsack: min CVaR[-c.w], w in [0,1]^n, p.w <= B_cap.

    Item weights are drawn once per seed: p ~ Uniform[0.1, 1],
    capacity = half the total weight.
    """
    rng = np.random.default_rng(cfg.seed)
    B = rng.binomial(1, 0.5, size=(cfg.d_c, cfg.d_x)).astype(np.float64)
    L = rng.uniform(-0.0025 * cfg.sigma, 0.0025 * cfg.sigma,
                    size=(cfg.d_c, cfg.factor_rank))
    weights = np.random.default_rng((cfg.seed, cfg.d_c)).uniform(0.1, 1.0, size=cfg.d_c)
    X, C = _poly_factor_samples(cfg, rng, B, L)
    spec = ProblemSpec(family="knapsack", d_x=cfg.d_x, d_c=cfg.d_c,
                       feasible=solver.weighted_capacity(weights, 0.5 * weights.sum()))
    truth = GroundTruth("knapsack", B, L, cfg.sigma, cfg.deg, cfg.d_x)
    return Dataset(X, C, truth), spec


def gen_shortest_path(cfg, grid_size=GRID_SIZE):
    """Shortest path: min CVaR[c.w] over the unit grid-flow polytope.

    d_c must equal the arc count of the grid (40 for the 5x5 default);
    the multiplicative noise is drawn per arc.
    """
    n_arcs = len(solver.grid_arcs(grid_size))
    if cfg.d_c != n_arcs:
        raise ValueError(f"shortest path on a {grid_size}x{grid_size} grid needs d_c={n_arcs}")
    rng = np.random.default_rng(cfg.seed)
    B = rng.binomial(1, 0.5, size=(cfg.d_c, cfg.d_x)).astype(np.float64)
    X = rng.standard_normal((cfg.n, cfg.d_x))
    det = (1.0 / 3.5**cfg.deg) * ((1.0 / np.sqrt(cfg.d_x)) * (X @ B.T) + 3.0) ** cfg.deg + 1.0
    eps = rng.uniform(0.5, 1.5, size=(cfg.n, cfg.d_c))
    C = det * eps
    spec = ProblemSpec(family="shortest_path", d_x=cfg.d_x, d_c=cfg.d_c,
                       feasible=solver.grid_flow(grid_size))
    truth = GroundTruth("shortest_path", B, np.zeros((cfg.d_c, 1)), cfg.sigma,
                        cfg.deg, cfg.d_x)
    return Dataset(X, C, truth), spec


def objective(spec, c, w):
    """Family objective f(c, w) for a single parameter vector.

    Accepts autodiff Tensors for either argument, in which case the result
    is a scalar Tensor carrying gradients.
    """
    from . import autodiff as ad

    cd = ad.value(c)
    if cd.shape != (spec.feasible.n,):
        raise ValueError("parameter dimension mismatch")
    c_row = c.reshape(1, -1) if isinstance(c, ad.Tensor) else cd.reshape(1, -1)
    out = solver.family_losses(spec, c_row, w)
    if isinstance(out, ad.Tensor):
        return out[0]
    return float(out[0])


# ---- energy prices -------------------------------------------------------


def energy_spec():
    fs = solver.schedule(np.zeros(ENERGY_SLOTS), np.ones(ENERGY_SLOTS), ENERGY_TOTAL)
    return ProblemSpec(family="energy", d_x=ENERGY_SLOTS, d_c=ENERGY_SLOTS, feasible=fs)


def gen_energy_prices(n_days, seed=0):
    """Synthetic half-hourly price curves: daily sinusoid + AR noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(ENERGY_SLOTS)
    days = []
    level = 30.0 + 5.0 * rng.standard_normal()
    for _ in range(n_days):
        level = 0.8 * level + 0.2 * 30.0 + 2.0 * rng.standard_normal()
        curve = (level
                 + 10.0 * np.sin(2.0 * np.pi * (t - 34) / ENERGY_SLOTS)
                 + 4.0 * np.sin(4.0 * np.pi * t / ENERGY_SLOTS)
                 + 1.5 * rng.standard_normal(ENERGY_SLOTS))
        days.append(np.round(curve, 6))
    return np.array(days)


def save_energy_csv(prices, path):
    """Write a day x slot price matrix in the `day_id,slot,price` schema."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("day_id,slot,price\n")
        for day_id, day in enumerate(prices, start=1):
            for slot, price in enumerate(day, start=1):
                fh.write(f"{day_id},{slot},{float(price)!r}\n")


def load_energy_csv(path):
    """Read daily prices and pair each day with the previous day's curve.

    Returns (Dataset, ProblemSpec): x = yesterday's 48 prices, c = today's.
    """
    by_day = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["day_id", "slot", "price"]:
            raise ValueError(f"bad energy CSV header: {reader.fieldnames}")
        last_key = None
        for row_no, row in enumerate(reader, start=2):
            try:
                day = int(row["day_id"])
                slot = int(row["slot"])
                price = float(row["price"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed row {row_no}: {row}") from exc
            if not 1 <= slot <= ENERGY_SLOTS:
                raise ValueError(f"slot out of range on row {row_no}")
            key = (day, slot)
            if last_key is not None and key <= last_key:
                raise ValueError(f"rows not sorted by (day_id, slot) at row {row_no}")
            last_key = key
            by_day.setdefault(day, {})[slot] = price
    days = sorted(by_day)
    if len(days) < 2:
        raise ValueError("need at least two days for lag-1 pairing")
    curves = []
    for day in days:
        slots = by_day[day]
        if len(slots) != ENERGY_SLOTS:
            raise ValueError(f"day {day} is missing slots")
        curves.append(np.array([slots[s] for s in range(1, ENERGY_SLOTS + 1)]))
    if days != list(range(days[0], days[0] + len(days))):
        raise ValueError("missing day in sequence")
    curves = np.array(curves)
    return Dataset(X=curves[:-1], C=curves[1:]), energy_spec()


# ---- generic dataset CSV -------------------------------------------------


def save_dataset_csv(data, path):
    """Export (X, C) rows in the `instance_id,kind,index,value` schema."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("instance_id,kind,index,value\n")
        for i in range(data.n):
            for j, v in enumerate(data.X[i]):
                fh.write(f"{i},x,{j},{float(v)!r}\n")
            for j, v in enumerate(data.C[i]):
                fh.write(f"{i},c,{j},{float(v)!r}\n")


def load_dataset_csv(path):
    rows = {"x": {}, "c": {}}
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["instance_id", "kind", "index", "value"]:
            raise ValueError(f"bad dataset CSV header: {reader.fieldnames}")
        for row in reader:
            kind = row["kind"]
            if kind not in rows:
                raise ValueError(f"unknown kind '{kind}'")
            rows[kind].setdefault(int(row["instance_id"]), {})[int(row["index"])] = float(row["value"])

    def to_matrix(cells):
        ids = sorted(cells)
        dims = {len(v) for v in cells.values()}
        if len(dims) != 1 or ids != list(range(len(ids))):
            raise ValueError("ragged or non-contiguous dataset CSV")
        d = dims.pop()
        return np.array([[cells[i][j] for j in range(d)] for i in ids])

    return Dataset(X=to_matrix(rows["x"]), C=to_matrix(rows["c"]))


FAMILY_GENERATORS = {
    "portfolio": gen_portfolio,
    "knapsack": gen_knapsack,
    "shortest_path": gen_shortest_path,
}
