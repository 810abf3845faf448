"""Empirical VaR/CVaR, the Rockafellar-Uryasev form, a smoothed
differentiable CVaR, and exact 1-D Wasserstein-1 distance.

Convention used throughout the package: `alpha` is the tail *fraction*,
i.e. the worst-alpha share of outcomes. alpha -> 1 recovers the plain
mean, alpha -> 0 the worst case. The empirical tail holds the
ceil(alpha*K) largest losses, ties broken by sample index.
"""

import math

import numpy as np

from . import autodiff as ad


def _check_sample(losses):
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        raise ValueError("empty loss sample")
    return losses


def _check_alpha(alpha):
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return float(alpha)


def tail_size(k, alpha):
    """Number of samples in the worst-alpha tail: ceil(alpha*K), at least 1."""
    return max(1, math.ceil(alpha * k - 1e-12))


def empirical_var(losses, alpha):
    """Value-at-risk: the smallest loss inside the worst-alpha tail."""
    losses = _check_sample(losses)
    alpha = _check_alpha(alpha)
    k_tail = tail_size(losses.size, alpha)
    return float(np.sort(losses)[::-1][k_tail - 1])


def empirical_cvar(losses, alpha):
    """Mean of the ceil(alpha*K) largest losses."""
    losses = _check_sample(losses)
    alpha = _check_alpha(alpha)
    k_tail = tail_size(losses.size, alpha)
    return float(np.mean(np.sort(losses)[::-1][:k_tail]))


def cvar_ru(losses, alpha):
    """Exact minimum of the RU objective eta + (1/(alpha*K)) sum (l-eta)_+.

    The piecewise-linear objective attains its minimum at an order
    statistic, so all K candidates are scanned. Returns (value, eta*)
    where eta* is the largest minimizing candidate (= empirical VaR when
    alpha*K is an integer).
    """
    losses = _check_sample(losses)
    alpha = _check_alpha(alpha)
    k = losses.size
    candidates = np.sort(losses)
    # phi(eta) for all candidate etas via suffix sums: for eta = c_j the
    # positive part keeps exactly the entries above it in sorted order
    suffix = np.concatenate([np.cumsum(candidates[::-1])[::-1][1:], [0.0]])
    m = k - 1 - np.arange(k)
    phi = candidates + (suffix - candidates * m) / (alpha * k)
    best = float(phi.min())
    eta_star = float(candidates[phi <= best + 1e-12].max())
    return best, eta_star


def smoothed_cvar(losses, eta, alpha, tau):
    """Differentiable RU surrogate: eta + (1/(alpha*K)) sum sp_tau(l-eta).

    sp_tau(u) = tau*log(1+exp(u/tau)) -> (u)_+ as tau -> 0. `losses` may
    be an autodiff Tensor (K,) and `eta` a scalar Tensor, in which case
    the result carries gradients to both.
    """
    alpha = _check_alpha(alpha)
    if tau <= 0:
        raise ValueError("smoothing temperature tau must be positive")
    k = ad.value(losses).size
    hinge = ad.softplus((losses - eta) * (1.0 / tau)) * tau
    return eta + hinge.sum() * (1.0 / (alpha * k))


def default_tau(losses):
    """Default smoothing temperature: 0.05 * (IQR + 1e-9)."""
    losses = _check_sample(losses)
    q75, q25 = np.percentile(losses, [75, 25])
    return 0.05 * (q75 - q25 + 1e-9)


def wasserstein1_1d(samples_a, samples_b):
    """Exact W1 between two equal-size empirical 1-D laws (sorted coupling)."""
    a = _check_sample(samples_a)
    b = _check_sample(samples_b)
    if a.size != b.size:
        raise ValueError("sample counts must match")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
