"""Conditional normalizing flow p(c|x) built from affine coupling layers.

Each layer passes [masked c, x] through a 2-layer tanh MLP that emits a
per-coordinate log-scale and shift for the unmasked coordinates. The
log-scale is bounded via s_max*tanh so the map stays well conditioned.
The conditioner output layer is zero-initialized, so a fresh flow is the
identity and log_prob starts at the standard-normal base density.

All math runs on `autodiff` ops, so sampling is reparameterized: with
parameters wrapped as Tensors, gradients flow from generated samples back
into the flow weights.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_VERSION = 1


@dataclass
class FlowConfig:
    d_c: int
    d_x: int
    n_layers: int = 4
    hidden: int = 64
    s_max: float = 3.0

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValueError("at least 2 coupling layers are required")
        if self.d_c < 1 or self.d_x < 0:
            raise ValueError("bad dimensions")


def _masks(d_c, n_layers):
    """Alternating even/odd masks; every coordinate is unmasked somewhere."""
    base = np.arange(d_c) % 2
    masks = []
    for i in range(n_layers):
        m = base if i % 2 == 0 else 1 - base
        if d_c == 1:
            # single coordinate: transform it in every layer, condition on x only
            m = np.zeros(1)
        masks.append(m.astype(np.float64))
    return masks


def init_params(cfg, rng):
    """Fresh parameter dict; output layers zeroed so the flow is identity."""
    params = {}
    d_in = cfg.d_c + cfg.d_x
    for i in range(cfg.n_layers):
        scale = 1.0 / np.sqrt(d_in)
        params[f"W1_{i}"] = rng.normal(0.0, scale, size=(d_in, cfg.hidden))
        params[f"b1_{i}"] = np.zeros(cfg.hidden)
        params[f"W2_{i}"] = np.zeros((cfg.hidden, 2 * cfg.d_c))
        params[f"b2_{i}"] = np.zeros(2 * cfg.d_c)
    return params


class Flow:
    """Conditional coupling flow; parameters live in a plain dict."""

    def __init__(self, cfg, rng=None, params=None):
        self.cfg = cfg
        self.masks = _masks(cfg.d_c, cfg.n_layers)
        if params is None:
            if rng is None:
                rng = np.random.default_rng(0)
            params = init_params(cfg, rng)
        self.params = params

    def copy(self):
        return Flow(self.cfg, params={k: v.copy() for k, v in self.params.items()})

    # ---- layer primitives ------------------------------------------------

    def _conditioner(self, c_masked, x, layer, params):
        p = params if params is not None else self.params
        inp = ad.concat([c_masked, x], axis=1)
        h = ad.tanh(inp @ p[f"W1_{layer}"] + p[f"b1_{layer}"])
        out = h @ p[f"W2_{layer}"] + p[f"b2_{layer}"]
        s_raw = out[:, : self.cfg.d_c]
        t = out[:, self.cfg.d_c:]
        s = ad.tanh(s_raw) * self.cfg.s_max
        return s, t

    def forward_map(self, c, x, params=None):
        """c -> (z, logdet) with logdet = log|det dz/dc| per row."""
        self._check_dims(c, x)
        z = c
        logdet = None
        for i, mask in enumerate(self.masks):
            keep = mask
            free = 1.0 - mask
            s, t = self._conditioner(z * keep, x, i, params)
            s = s * free
            t = t * free
            z = z * keep + (z * ad.exp(s) + t) * free
            ld = s.sum(axis=1)
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def inverse_map(self, z, x, params=None):
        """Inverse of forward_map: z -> c."""
        self._check_dims(z, x)
        c = z
        for i in reversed(range(len(self.masks))):
            keep = self.masks[i]
            free = 1.0 - keep
            s, t = self._conditioner(c * keep, x, i, params)
            s = s * free
            t = t * free
            c = c * keep + ((c - t) * ad.exp(-s)) * free
        return c

    def log_prob(self, c, x, params=None):
        """Per-row log p(c|x) under a standard-normal base."""
        z, logdet = self.forward_map(c, x, params)
        base = (z * z).sum(axis=1) * (-0.5) - 0.5 * self.cfg.d_c * LOG_2PI
        return base + logdet

    def sample(self, x, n_samples, rng, params=None):
        """Draw n_samples of c|x for a single feature vector x.

        Reparameterized: with `params` given as Tensors the samples carry
        gradients. Returns an (n_samples, d_c) Tensor or array.
        """
        if n_samples < 1:
            raise ValueError("need at least one sample")
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        z = rng.standard_normal((n_samples, self.cfg.d_c))
        x_rep = np.repeat(x, n_samples, axis=0)
        return self.inverse_map(z, x_rep, params)

    def nll_loss(self, c_batch, x_batch, params=None):
        """Mean negative log-likelihood over a batch; differentiable."""
        if ad.value(c_batch).shape[0] == 0:
            raise ValueError("empty batch")
        return -self.log_prob(c_batch, x_batch, params).mean()

    # ---- plumbing --------------------------------------------------------

    def _check_dims(self, c, x):
        cd = ad.value(c)
        xd = ad.value(x)
        if cd.ndim != 2 or cd.shape[1] != self.cfg.d_c:
            raise ValueError(f"expected (*, {self.cfg.d_c}) parameter batch, got {cd.shape}")
        if xd.ndim != 2 or xd.shape[1] != self.cfg.d_x or xd.shape[0] != cd.shape[0]:
            raise ValueError(f"feature batch shape {xd.shape} does not match {cd.shape}")

    def param_tensors(self):
        """Trainable Tensor views of the parameters (copies the values)."""
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    # ---- checkpointing ---------------------------------------------------

    def save(self, path):
        record = {
            "version": CHECKPOINT_VERSION,
            "d_c": self.cfg.d_c,
            "d_x": self.cfg.d_x,
            "n_layers": self.cfg.n_layers,
            "hidden": self.cfg.hidden,
            "s_max": self.cfg.s_max,
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        if record.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {record.get('version')}")
        cfg = FlowConfig(d_c=record["d_c"], d_x=record["d_x"],
                         n_layers=record["n_layers"], hidden=record["hidden"],
                         s_max=record["s_max"])
        params = {k: np.asarray(v, dtype=np.float64) for k, v in record["params"].items()}
        flow = cls(cfg, params=params)
        expected = init_params(cfg, np.random.default_rng(0))
        for k, v in expected.items():
            if k not in params or params[k].shape != v.shape:
                raise ValueError(f"checkpoint parameter '{k}' missing or wrong shape")
        return flow
