"""Reference pricers for European calls on baskets of correlated GBMs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erfc

from .numerics import Rng, cholesky, gauss_hermite

SQRT2 = math.sqrt(2.0)
GH_BUDGET = 10**8


class InvalidInput(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    """Tensor grid larger than the evaluation budget; lower the node count or use Monte-Carlo."""


def norm_cdf(x):
    """Standard normal CDF via erfc (accurate in both tails)."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / SQRT2)


def norm_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _positive(name, v):
    if np.any(~(np.asarray(v) > 0)):
        raise InvalidInput(f"{name} must be positive")


def bs_d1(t, s, r, sigma, K):
    vol = sigma * np.sqrt(t)
    return (np.log(s / K) + r * t + 0.5 * vol * vol) / vol


def bs_closed_form(t, s, r, sigma, K):
    """Black-Scholes call value Phi(d1) s - Phi(d2) K exp(-r t)."""
    t, s, r, sigma, K = (np.asarray(v, dtype=np.float64) for v in (t, s, r, sigma, K))
    for name, v in (("t", t), ("s", s), ("sigma", sigma), ("K", K)):
        _positive(name, v)
    vol = sigma * np.sqrt(t)
    d1 = (np.log(s / K) + r * t) / vol + 0.5 * vol
    d2 = d1 - vol
    return norm_cdf(d1) * s - norm_cdf(d2) * K * np.exp(-r * t)


def bs_vega(t, s, r, sigma, K):
    t, s, r, sigma, K = (np.asarray(v, dtype=np.float64) for v in (t, s, r, sigma, K))
    return s * norm_pdf(bs_d1(t, s, r, sigma, K)) * np.sqrt(t)


def bs_delta(t, s, r, sigma, K):
    return norm_cdf(bs_d1(t, s, r, sigma, K))


def geometric_closed_form(t, x, r, sigma, rho, K, d=None):
    """Call on the geometric mean of d assets with equal vol ``sigma`` and correlation ``rho``.

    ``x`` holds log-prices on its last axis.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1] if d is None else d
    if x.shape[-1] != d:
        raise InvalidInput("x must have d entries on its last axis")
    sigma = np.asarray(sigma, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    _positive("sigma", sigma)
    if d > 1 and np.any((rho <= -1.0 / (d - 1)) | (rho > 1.0)):
        raise InvalidInput("rho must lie in (-1/(d-1), 1]")
    var_bar = sigma * sigma / d * (1.0 + (d - 1) * rho) if d > 1 else sigma * sigma
    sig_bar = np.sqrt(var_bar)
    q = 0.5 * (sigma * sigma - var_bar)
    spot = np.exp(np.mean(x, axis=-1) - q * t)
    return bs_closed_form(t, spot, r, sig_bar, K)


@dataclass
class OneFactorDecomposition:
    """C = lambda1^2 * 1 1^T + V2 V2^T with unit-variance residual factors."""

    lambda1: float
    V2: np.ndarray

    def reconstruct(self) -> np.ndarray:
        d = self.V2.shape[0]
        return self.lambda1**2 * np.ones((d, d)) + self.V2 @ self.V2.T


def one_factor_decompose(C: np.ndarray) -> OneFactorDecomposition:
    """Split a covariance into a common equal-loading factor and d-1 residual factors.

    With L the Cholesky factor, q1 = lambda1 L^{-1} 1 is a unit vector;
    a Householder reflection Q with Q e1 = q1 gives M = L Q whose first
    column is lambda1 * 1 and whose remaining columns are V2.
    """
    C = np.asarray(C, dtype=np.float64)
    d = C.shape[0]
    L = cholesky(C)
    w = solve_triangular(L, np.ones(d), lower=True)
    lambda1 = 1.0 / np.linalg.norm(w)
    q1 = lambda1 * w
    v = -q1.copy()
    v[0] += 1.0
    vv = v @ v
    if vv < 1e-30:
        Q = np.eye(d)
    else:
        Q = np.eye(d) - 2.0 * np.outer(v, v) / vv
    M = L @ Q
    return OneFactorDecomposition(float(lambda1), M[:, 1:].copy())


def default_nodes(d: int) -> int:
    if d <= 3:
        return 32
    if d <= 5:
        return 10
    if d <= 8:
        return 6
    return 4


def gh_basket_price(t, x, r, sigma, corr, K=100.0, nodes_per_dim=None, budget=GH_BUDGET, compensated=True):
    """Basket call by conditioning on the common factor and tensor Gauss-Hermite on the rest.

    Inner value: BS(1, h(Y), 0, lambda1, K e^{-rt}) with
    h = (1/d) sum_i exp(x_i - sigma_i^2 t / 2 + lambda1^2 / 2 + (V2 Y)_i).
    ``compensated=False`` drops the lambda1^2/2 term (kept for validation only).
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    d = x.shape[0]
    _positive("t", t)
    _positive("sigma", sigma)
    if d == 1:
        return float(bs_closed_form(t, math.exp(x[0]), r, sigma[0], K))
    n = default_nodes(d) if nodes_per_dim is None else int(nodes_per_dim)
    total = n ** (d - 1)
    if total > budget:
        raise BudgetExceeded(f"{n}^{d - 1} = {total} quadrature points exceeds budget {budget}")
    C = corr * np.outer(sigma, sigma) * t
    dec = one_factor_decompose(C)
    lam1 = dec.lambda1
    rule = gauss_hermite(n)
    base = x - 0.5 * sigma * sigma * t + (0.5 * lam1 * lam1 if compensated else 0.0)
    disc_K = K * math.exp(-r * t)
    acc = 0.0
    chunk = max(1, 2**20 // d)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        digits = np.empty((idx.size, d - 1), dtype=np.intp)
        rem = idx
        for j in range(d - 1):
            digits[:, j] = rem % n
            rem = rem // n
        Y = SQRT2 * rule.nodes[digits]
        w = np.prod(rule.weights[digits], axis=1)
        h = np.mean(np.exp(base + Y @ dec.V2.T), axis=1)
        acc += np.sum(w * bs_closed_form(1.0, h, 0.0, lam1, disc_K))
    return float(acc / math.pi ** (0.5 * (d - 1)))


@dataclass
class McEstimate:
    price: float
    stderr: float
    n_paths: int
    seed: int


def mc_basket_price(
    t, x, r, sigma, corr, K=100.0, n_paths=10**6, rng: Rng | None = None,
    payoff_kind="basket_call", antithetic=False, chunk=2**18,
) -> McEstimate:
    """Exact terminal sampling of correlated GBMs; discounted payoff mean and standard error.

    Chunk ``c`` draws from ``rng.spawn(c)``, so the estimate depends only on
    the seed and ``chunk``.
    """
    if n_paths < 2:
        raise InvalidInput("n_paths must be >= 2")
    rng = Rng(0) if rng is None else rng
    x = np.asarray(x, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = x.shape[0]
    _positive("t", t)
    _positive("sigma", sigma)
    # factor the correlation (well conditioned) and scale by sigma sqrt(t)
    Lc = cholesky(np.asarray(corr, dtype=np.float64))
    L = (sigma * math.sqrt(t))[:, None] * Lc
    drift = x + (r - 0.5 * sigma * sigma) * t
    disc = math.exp(-r * t)
    if antithetic and chunk % 2:
        chunk += 1

    def pay(z):
        logs = drift + z @ L.T
        if payoff_kind == "geometric_call":
            return np.maximum(np.exp(np.mean(logs, axis=1)) - K, 0.0)
        return np.maximum(np.mean(np.exp(logs), axis=1) - K, 0.0)

    s1 = 0.0
    s2 = 0.0
    n_samples = 0
    done = 0
    c = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        gen = rng.spawn(c).generator
        if antithetic:
            half = (m + 1) // 2
            z = gen.standard_normal((half, d))
            vals = 0.5 * (pay(z) + pay(-z)) * disc
            m = 2 * half
        else:
            vals = pay(gen.standard_normal((m, d))) * disc
        s1 += float(np.sum(vals))
        s2 += float(np.sum(vals * vals))
        n_samples += vals.size
        done += m
        c += 1
    mean = s1 / n_samples
    var = max(s2 / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return McEstimate(mean, math.sqrt(var / n_samples), done, rng.seed)
