"""End-to-end training: the decision-focused generative loss, its
frozen-proxy regret term, and the two point-predictor baselines
(MSE two-stage, tail-aware RU regression).

The main loop alternates generate-then-optimize (reparameterized samples
through the unrolled CVaR-SAA solve) with an Adam step on the weighted
sum of decision regret and negative log-likelihood. Non-finite losses
abort the step: it is skipped, the learning rate is halved for a few
steps, and training continues.
"""

import json
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import risk, solver
from .autodiff import Adam, Tensor
from .solver import SolverConfig
from .flow import Flow, FlowConfig


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    alpha: float = 0.5
    n_samples: int = 64        # K: generated samples per inner solve
    proxy_samples: int = 256   # M_q: proxy draws per regret evaluation
    beta: float = 10.0
    gamma: float = 1.0
    seed: int = 0
    regret_subsample: int = 0  # >0: regret on this many batch points only
    grad_clip: float = 5.0     # global-norm clip for the joint loss gradient
    hidden: int = 64
    n_layers: int = 4
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.n_samples < 1 or self.beta < 0 or self.gamma < 0:
            raise ValueError("bad training configuration")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


class ProxyModel:
    """Frozen generative estimate q(c|x) with a lazy cache of its decisions."""

    def __init__(self, flow, spec, alpha, solver_cfg, seed=0):
        self.flow = flow
        self.spec = spec
        self.alpha = alpha
        self.solver_cfg = solver_cfg
        self.seed = seed
        self._decisions = {}

    def samples(self, x, m, rng):
        return ad.value(self.flow.sample(x, m, rng))

    def decision(self, x):
        """w*_q(x; alpha): CVaR-SAA over fixed-seed proxy samples, cached."""
        key = np.asarray(x).tobytes()
        if key not in self._decisions:
            rng = np.random.default_rng((self.seed, zlib.crc32(key)))
            C = self.samples(x, 256, rng)
            self._decisions[key] = solver.solve_cvar_saa(
                self.spec, C, self.alpha, self.solver_cfg)
        return self._decisions[key]


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_proxy(data, spec, cfg):
    """Fit the proxy flow by NLL only, then freeze it."""
    if data.n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    flow = Flow(FlowConfig(d_c=spec.d_c, d_x=spec.d_x, n_layers=cfg.n_layers,
                           hidden=cfg.hidden), rng=rng)
    opt = Adam(lr=cfg.lr)
    for _ in range(cfg.epochs):
        for idx in _minibatches(data.n, cfg.batch_size, rng):
            params = flow.param_tensors()
            loss = flow.nll_loss(data.C[idx], data.X[idx], params)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("proxy NLL diverged")
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            opt.step(flow.params, grads)
    return ProxyModel(flow, spec, cfg.alpha, cfg.solver, seed=cfg.seed)


def regret_theta_q(x, flow, theta, proxy, spec, cfg, rng):
    """Differentiable CVaR regret of the model's decision at one input.

    Draws K reparameterized samples from the model, solves the unrolled
    CVaR-SAA for w_hat, then scores CVaR over proxy draws of
    f(c, w_hat) - f(c, w*_q). Gradients reach theta only through the
    samples -> w_hat path.
    """
    c_model = flow.sample(x, cfg.n_samples, rng, params=theta)
    dec = solver.solve_cvar_saa_unrolled(spec, c_model, cfg.alpha, cfg.solver)
    C_q = proxy.samples(x, cfg.proxy_samples, rng)
    losses_hat = solver.family_losses(spec, C_q, dec.w_graph)
    losses_star = solver.family_losses(spec, C_q, proxy.decision(x).w)
    diff = losses_hat - losses_star
    vals = ad.value(diff)
    k_tail = risk.tail_size(vals.size, cfg.alpha)
    tail_idx = np.argsort(-vals, kind="stable")[:k_tail]
    return diff[tail_idx].mean()


def gendfl_loss(batch_X, batch_C, flow, theta, proxy, spec, cfg, rng):
    """beta * mean regret + gamma * NLL over a batch, as a graph scalar."""
    loss = None
    if cfg.beta > 0:
        reg_idx = range(len(batch_X))
        if cfg.regret_subsample > 0:
            reg_idx = rng.choice(len(batch_X), size=min(cfg.regret_subsample, len(batch_X)),
                                 replace=False)
        regrets = [regret_theta_q(batch_X[i], flow, theta, proxy, spec, cfg, rng)
                   for i in reg_idx]
        total = regrets[0]
        for r in regrets[1:]:
            total = total + r
        loss = total * (cfg.beta / len(regrets))
    if cfg.gamma > 0:
        nll = flow.nll_loss(batch_C, batch_X, theta) * cfg.gamma
        loss = nll if loss is None else loss + nll
    if loss is None:
        loss = Tensor(0.0)
    return loss


def train_gendfl(data, spec, cfg, proxy, log_path=None):
    """Algorithm: sample, solve, score regret, Adam step; warm-started at q."""
    rng = np.random.default_rng((cfg.seed, 1))
    flow = proxy.flow.copy()
    opt = Adam(lr=cfg.lr)
    base_lr = cfg.lr
    cooldown = 0
    records = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_loss, epoch_nll, epoch_reg, n_batches = 0.0, 0.0, 0.0, 0
        for idx in _minibatches(data.n, cfg.batch_size, rng):
            theta = flow.param_tensors()
            try:
                loss = gendfl_loss(data.X[idx], data.C[idx], flow, theta,
                                   proxy, spec, cfg, rng)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise ad.NonFiniteError("loss")
                loss.backward()
            except ad.NonFiniteError:
                cooldown = 10  # skip the step, halve lr for a while
                opt.lr = base_lr * 0.5
                continue
            grads = {k: t.grad for k, t in theta.items() if t.grad is not None}
            gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if gnorm > cfg.grad_clip:
                scale = cfg.grad_clip / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            opt.step(flow.params, grads)
            if cooldown > 0:
                cooldown -= 1
                if cooldown == 0:
                    opt.lr = base_lr
            with_nll = flow.nll_loss(data.C[idx], data.X[idx])
            epoch_loss += loss_val
            epoch_nll += float(ad.value(with_nll))
            epoch_reg += max(loss_val - cfg.gamma * float(ad.value(with_nll)), 0.0) / max(cfg.beta, 1e-12)
            n_batches += 1
        if n_batches:
            records.append({
                "epoch": epoch,
                "nll": epoch_nll / n_batches,
                "mean_regret": epoch_reg / n_batches,
                "loss": epoch_loss / n_batches,
                "wall_ms": 1000.0 * (time.perf_counter() - t0),
            })
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    flow.train_log = records
    return flow


# ---- point-predictor baselines ------------------------------------------


class PredictorMLP:
    """2-layer tanh MLP x -> c_hat, trained with numpy Adam."""

    def __init__(self, d_x, d_out, hidden=64, rng=None):
        rng = rng or np.random.default_rng(0)
        self.d_x, self.d_out, self.hidden = d_x, d_out, hidden
        s1 = 1.0 / np.sqrt(d_x)
        s2 = 1.0 / np.sqrt(hidden)
        self.params = {
            "W1": rng.normal(0.0, s1, size=(d_x, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, s2, size=(hidden, d_out)),
            "b2": np.zeros(d_out),
        }

    def forward(self, X, params=None):
        p = params if params is not None else self.params
        h = ad.tanh(X @ p["W1"] + p["b1"])
        return h @ p["W2"] + p["b2"]

    def predict(self, x):
        out = self.forward(np.asarray(x, dtype=np.float64).reshape(1, -1))
        return ad.value(out)[0]

    def param_tensors(self):
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    def save(self, path):
        record = {"d_x": self.d_x, "d_out": self.d_out, "hidden": self.hidden,
                  "params": {k: v.tolist() for k, v in sorted(self.params.items())}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        model = cls(record["d_x"], record["d_out"], hidden=record["hidden"])
        model.params = {k: np.asarray(v, dtype=np.float64)
                        for k, v in record["params"].items()}
        return model


def _fit_mlp(data, targets, cfg, loss_fn, d_out):
    rng = np.random.default_rng(cfg.seed)
    model = PredictorMLP(data.X.shape[1], d_out, hidden=cfg.hidden, rng=rng)
    opt = Adam(lr=cfg.lr)
    for _ in range(cfg.epochs):
        for idx in _minibatches(data.n, cfg.batch_size, rng):
            params = model.param_tensors()
            pred = model.forward(data.X[idx], params)
            loss = loss_fn(pred, targets[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError("predictor training diverged")
            loss.backward()
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            opt.step(model.params, grads)
    return model


def train_pto(data, cfg):
    """Two-stage baseline: MSE fit of x -> c, decisions via solve_pointwise."""
    if data.n == 0:
        raise ValueError("empty dataset")

    def mse(pred, y):
        d = pred - y
        return (d * d).mean()

    return _fit_mlp(data, data.C, cfg, mse, data.C.shape[1])


def ru_risk(pred, y, alpha):
    """Empirical Rockafellar-Uryasev risk: mean[g + (1/alpha)(y - g)_+].

    Works elementwise for matrix-valued predictions (per-coordinate RU)
    and supports Tensors.
    """
    hinge = ad.relu(y - pred)
    return (pred + hinge * (1.0 / alpha)).mean()


def train_cvar_regressor(data, alpha, cfg):
    """Tail-aware point predictor: per-coordinate empirical RU risk fit.

    The minimizer of g + (1/alpha) E(c_j - g)_+ is the upper alpha-tail
    threshold of c_j|x, so decisions fed to solve_pointwise price each
    coordinate at its tail level rather than its mean.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    return _fit_mlp(data, data.C, cfg, lambda p, y: ru_risk(p, y, alpha),
                    data.C.shape[1])
