"""Basket implied volatility: invert the one-asset Black-Scholes formula at the mean spot."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pricers import bs_closed_form, bs_vega

SIGMA_LO = 1e-6
SIGMA_HI = 5.0
LOWER_MARGIN = 1e-12


class PriceOutOfBounds(ValueError):
    """Price is not strictly inside the no-arbitrage bounds (or needs sigma > 5)."""


class Skipped:
    """Marker for IV errors not computed because the price is too close to the lower bound."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "Skipped"

    def __bool__(self) -> bool:
        return False


SKIPPED = Skipped()


@dataclass
class IvQuery:
    c: float
    t: float
    s_bar: float
    r: float
    K: float = 100.0

    def __post_init__(self):
        if not (self.t > 0 and self.s_bar > 0 and self.K > 0):
            raise ValueError("IvQuery needs t, s_bar, K > 0")


def no_arbitrage_bounds(t, s_bar, r, K):
    """(max(s_bar - K e^{-rt}, 0), s_bar)."""
    lb = np.maximum(np.asarray(s_bar) - K * np.exp(-np.asarray(r) * np.asarray(t)), 0.0)
    return lb, np.asarray(s_bar, dtype=np.float64)


def implied_vol(q: IvQuery, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Volatility reproducing ``q.c`` under Black-Scholes at the mean spot.

    Newton steps on vega inside a bisection bracket over (1e-6, 5).  Prices
    below ``c_lb + 1e-12`` or at/above ``c_ub`` raise PriceOutOfBounds.
    """
    c, t, s, r, K = q.c, q.t, q.s_bar, q.r, q.K
    lb, ub = no_arbitrage_bounds(t, s, r, K)
    lb, ub = float(lb), float(ub)
    if not (lb + LOWER_MARGIN < c < ub):
        raise PriceOutOfBounds(f"price {c!r} not inside ({lb!r}, {ub!r})")

    def f(sig):
        return float(bs_closed_form(t, s, r, sig, K)) - c

    lo, hi = SIGMA_LO, SIGMA_HI
    if f(hi) < 0:
        raise PriceOutOfBounds(f"price {c!r} needs a volatility above {SIGMA_HI}")
    if f(lo) > 0:
        return lo
    # start from the Brenner-Subrahmanyam guess, clipped into the bracket
    sig = min(max(math.sqrt(2.0 * math.pi / t) * c / s, 0.05), 1.0)
    for _ in range(max_iter):
        val = f(sig)
        if val > 0:
            hi = sig
        else:
            lo = sig
        if abs(val) <= tol and hi - lo <= 1e-12 * max(sig, 1.0):
            return sig
        vega = float(bs_vega(t, s, r, sig, K))
        step = val / vega if vega > 0 else math.inf
        new = sig - step
        if not (lo < new < hi) or not math.isfinite(new):
            new = 0.5 * (lo + hi)
        if abs(new - sig) <= 1e-15 * max(sig, 1.0):
            if abs(val) <= tol:
                return new
            new = 0.5 * (lo + hi)
        if hi - lo <= 4e-16 * hi:
            return sig
        sig = new
    if abs(f(sig)) <= tol:
        return sig
    raise RuntimeError("implied volatility did not converge")


def iv_relative_error(c_exact, c_approx, t, s_bar, r, K=100.0, threshold=0.005):
    """|iv(c_approx) - iv(c_exact)| / iv(c_exact), or SKIPPED.

    SKIPPED exactly when ``c_exact - c_lb < threshold``.  If either price has
    no implied volatility (outside the bounds) the error is NaN.
    """
    lb, _ = no_arbitrage_bounds(t, s_bar, r, K)
    if not c_exact - float(lb) >= threshold:
        return SKIPPED
    try:
        s_exact = implied_vol(IvQuery(float(c_exact), t, s_bar, r, K))
        s_approx = implied_vol(IvQuery(float(c_approx), t, s_bar, r, K))
    except PriceOutOfBounds:
        return math.nan
    return abs(s_approx - s_exact) / s_exact


def default_threshold(d: int) -> float:
    return 0.005 if d == 1 else 0.5
