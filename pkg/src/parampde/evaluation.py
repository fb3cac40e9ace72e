"""Error studies of a trained model against reference pricers.

Anything with a vectorised ``price(t, x, mu)`` can stand in for the model,
including an oracle itself (which must then show zero error everywhere).
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .impliedvol import SKIPPED, Skipped, default_threshold, iv_relative_error
from .numerics import Rng
from .pricers import bs_closed_form, geometric_closed_form, gh_basket_price, mc_basket_price
from .problem import Model, ProblemSpec, expand_params

# ---------------------------------------------------------------------------
# oracles


class Oracle:
    name = "oracle"

    def __init__(self, spec: ProblemSpec):
        self.spec = spec

    def price_one(self, t, x, r, sigma, corr, mu) -> float:
        raise NotImplementedError

    def price(self, t, x, mu) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        r, sigma, corr = expand_params(self.spec, mu)
        return np.array([
            self.price_one(float(t[i]), x[i], float(r[i]), sigma[i], corr[i], mu[i]) for i in range(len(t))
        ])


class BsOracle(Oracle):
    name = "bs"

    def price(self, t, x, mu):
        mu = np.atleast_2d(mu)
        if self.spec.d != 1:
            raise ValueError("bs oracle needs d = 1")
        x = np.atleast_2d(x)
        return bs_closed_form(np.asarray(t, dtype=np.float64), np.exp(x[:, 0]), mu[:, 0], mu[:, 1], self.spec.strike)


class GeometricOracle(Oracle):
    name = "geometric"

    def price(self, t, x, mu):
        mu = np.atleast_2d(mu)
        x = np.atleast_2d(x)
        if self.spec.payoff_kind != "geometric_call":
            raise ValueError("geometric oracle needs the geometric payoff")
        return geometric_closed_form(np.asarray(t, dtype=np.float64), x, mu[:, 0], mu[:, 1], mu[:, 2],
                                     self.spec.strike, self.spec.d)


class GhOracle(Oracle):
    name = "gh"

    def __init__(self, spec, nodes_per_dim=None):
        super().__init__(spec)
        if spec.payoff_kind != "basket_call":
            raise ValueError("gh oracle prices arithmetic baskets only")
        self.nodes_per_dim = nodes_per_dim

    def price_one(self, t, x, r, sigma, corr, mu):
        return gh_basket_price(t, x, r, sigma, corr, self.spec.strike, self.nodes_per_dim)


class McOracle(Oracle):
    """Monte-Carlo oracle; row ``i`` of each call draws from ``Rng(seed).spawn(i)``."""

    name = "mc"

    def __init__(self, spec, n_paths=10**5, seed=0):
        super().__init__(spec)
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self._row = 0

    def price(self, t, x, mu):
        self._row = 0
        return super().price(t, x, mu)

    def price_one(self, t, x, r, sigma, corr, mu):
        rng = Rng(self.seed).spawn(self._row)
        self._row += 1
        return mc_basket_price(t, x, r, sigma, corr, self.spec.strike, self.n_paths, rng,
                               payoff_kind=self.spec.payoff_kind).price


def oracle_for(spec: ProblemSpec, name: str | None = None, **kw) -> Oracle | None:
    """Named oracle, or the natural exact one for this problem when ``name`` is None."""
    if name is None:
        if spec.payoff_kind == "geometric_call":
            return GeometricOracle(spec)
        if spec.d == 1:
            return BsOracle(spec)
        if spec.d <= 3:
            return GhOracle(spec)
        return None
    table = {"bs": BsOracle, "geometric": GeometricOracle, "gh": GhOracle, "mc": McOracle}
    if name not in table:
        raise ValueError(f"unknown oracle {name!r}")
    return table[name](spec, **kw)


# ---------------------------------------------------------------------------
# sampling helpers


def sample_interest(spec: ProblemSpec, n: int, rng: Rng, center: bool = False):
    """Uniform (t, x, mu) on the interest box; ``center`` pins mu to the box midpoint."""
    gen = rng.generator
    t = spec.t_interest_min + (spec.T - spec.t_interest_min) * gen.random(n)
    lo, hi = spec.x_interest
    s = np.exp(lo) + (np.exp(hi) - np.exp(lo)) * gen.random((n, spec.d))
    x = np.log(s)
    if center:
        mu = np.tile(spec.center_params(), (n, 1))
    else:
        plo, phi = spec.param_bounds()
        mu = plo + (phi - plo) * gen.random((n, spec.n_mu))
    return t, x, mu


def mean_spot(spec: ProblemSpec, x) -> np.ndarray:
    """Spot used for the basket implied volatility (arithmetic or geometric mean)."""
    x = np.atleast_2d(x)
    if spec.payoff_kind == "geometric_call":
        return np.exp(np.mean(x, axis=-1))
    return np.mean(np.exp(x), axis=-1)


def iv_spot(spec: ProblemSpec, t, x, mu, dividend_adjusted: bool = False) -> np.ndarray:
    """IV spot; for the geometric payoff ``dividend_adjusted`` applies exp(-beta t)."""
    s = mean_spot(spec, x)
    if dividend_adjusted and spec.payoff_kind == "geometric_call":
        mu = np.atleast_2d(mu)
        d = spec.d
        beta = 0.5 * mu[:, 1] ** 2 * (1.0 - 1.0 / d) * (1.0 - mu[:, 2])
        s = s * np.exp(-beta * np.asarray(t))
    return s


def normalised_params(spec: ProblemSpec, mu) -> np.ndarray:
    lo, hi = spec.param_bounds()
    w = hi - lo
    return np.where(w > 0, (2.0 * (np.asarray(mu) - lo) / np.where(w > 0, w, 1.0)) - 1.0, 0.0)


def denormalise_params(spec: ProblemSpec, z) -> np.ndarray:
    lo, hi = spec.param_bounds()
    return lo + 0.5 * (np.asarray(z) + 1.0) * (hi - lo)


# ---------------------------------------------------------------------------
# scatter study


@dataclass
class ScatterRow:
    t: float
    x: np.ndarray
    mu: np.ndarray
    exact: float
    model: float
    abs_error: float
    iv_rel_error: float | Skipped
    flag: str = ""


def _safe_oracle(oracle, t, x, mu):
    try:
        return np.asarray(oracle.price(t, x, mu), dtype=np.float64), [""] * len(t)
    except Exception:  # noqa: BLE001 - fall back to per-row flags
        vals, flags = [], []
        for i in range(len(t)):
            try:
                vals.append(float(oracle.price(t[i:i + 1], x[i:i + 1], mu[i:i + 1])[0]))
                flags.append("")
            except Exception as exc:  # noqa: BLE001
                vals.append(math.nan)
                flags.append(f"oracle failed: {exc}")
        return np.array(vals), flags


def scatter_eval(model, oracle, n_points: int, rng: Rng, threshold: float | None = None,
                 dividend_adjusted: bool = False) -> list[ScatterRow]:
    """Price random interest-box points with model and oracle; IV errors where meaningful."""
    spec = oracle.spec
    threshold = default_threshold(spec.d) if threshold is None else threshold
    t, x, mu = sample_interest(spec, n_points, rng)
    exact, flags = _safe_oracle(oracle, t, x, mu)
    approx = np.asarray(model.price(t, x, mu), dtype=np.float64)
    spot = iv_spot(spec, t, x, mu, dividend_adjusted)
    rows = []
    for i in range(n_points):
        if flags[i]:
            iv = math.nan
        else:
            iv = iv_relative_error(exact[i], approx[i], t[i], spot[i], mu[i, 0], spec.strike, threshold)
        rows.append(ScatterRow(float(t[i]), x[i].copy(), mu[i].copy(), float(exact[i]), float(approx[i]),
                               float(abs(exact[i] - approx[i])), iv, flags[i]))
    return rows


def scatter_header(spec: ProblemSpec) -> list[str]:
    return (["t"] + [f"x{i + 1}" for i in range(spec.d)] + spec.param_names()
            + ["exact", "model", "abs_err", "iv_rel_err"])


def _fmt(v) -> str:
    if isinstance(v, Skipped):
        return "skipped"
    return repr(float(v))


def scatter_csv(spec: ProblemSpec, rows: Sequence[ScatterRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(scatter_header(spec))
    for row in rows:
        w.writerow([_fmt(row.t)] + [_fmt(v) for v in row.x] + [_fmt(v) for v in row.mu]
                   + [_fmt(row.exact), _fmt(row.model), _fmt(row.abs_error), _fmt(row.iv_rel_error)])
    return buf.getvalue()


def read_scatter_csv(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({k: (SKIPPED if v == "skipped" else float(v)) for k, v in rec.items()})
    return out


# ---------------------------------------------------------------------------
# binned maximum error


@dataclass
class BinGrid:
    sbar_edges: np.ndarray
    munorm_edges: np.ndarray
    max_abs_err: np.ndarray
    count: np.ndarray
    cell_means: np.ndarray = field(default=None)

    def centers(self):
        s = 0.5 * (self.sbar_edges[1:] + self.sbar_edges[:-1])
        m = 0.5 * (self.munorm_edges[1:] + self.munorm_edges[:-1])
        return s, m

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sbar_lo", "sbar_hi", "munorm_lo", "munorm_hi", "max_abs_err", "count"])
        for i in range(len(self.sbar_edges) - 1):
            for j in range(len(self.munorm_edges) - 1):
                w.writerow([repr(float(self.sbar_edges[i])), repr(float(self.sbar_edges[i + 1])),
                            repr(float(self.munorm_edges[j])), repr(float(self.munorm_edges[j + 1])),
                            repr(float(self.max_abs_err[i, j])), int(self.count[i, j])])
        return buf.getvalue()


def sample_spots_with_mean(spec: ProblemSpec, targets: np.ndarray, gen: np.random.Generator,
                           max_rounds: int = 1000) -> np.ndarray:
    """Spot vectors uniform on {mean = target} inside the interest box.

    Dirichlet split anchored at the nearer box edge: with target below the
    box midpoint, s = lo + d (target - lo) w, w ~ Dirichlet(1,..,1), is uniform
    on {s >= lo, mean = target}; draws crossing the far edge are rejected.
    The upper half is the mirror image.
    """
    lo, hi = np.exp(spec.x_interest[0]), np.exp(spec.x_interest[1])
    targets = np.asarray(targets, dtype=np.float64)
    n, d = len(targets), spec.d
    if d == 1:
        return targets[:, None].copy()
    low = targets <= 0.5 * (lo + hi)
    anchor = np.where(low, lo, hi)
    out = np.empty((n, d))
    todo = np.arange(n)
    for _ in range(max_rounds):
        if todo.size == 0:
            return out
        w = gen.dirichlet(np.ones(d), todo.size)
        s = anchor[todo, None] + d * (targets[todo] - anchor[todo])[:, None] * w
        ok = np.all((s >= lo) & (s <= hi), axis=1)
        out[todo[ok]] = s[ok]
        todo = todo[~ok]
    raise RuntimeError("could not sample spots with the requested mean inside the interest box")


def sample_params_at_radius(spec: ProblemSpec, radius: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Parameter vectors whose normalised max-norm equals ``radius`` exactly."""
    n, k = len(radius), spec.n_mu
    z = (2.0 * gen.random((n, k)) - 1.0) * radius[:, None]
    pick = gen.integers(0, k, n)
    sign = np.where(gen.random(n) < 0.5, -1.0, 1.0)
    z[np.arange(n), pick] = sign * radius
    return denormalise_params(spec, z)


def binned_max_error(model, oracle, samples_per_cell: int, rng: Rng,
                     sbar_edges=None, munorm_edges=None, t: float | None = None) -> BinGrid:
    """Maximum absolute error per (mean spot, parameter max-norm) cell at t = T."""
    spec = oracle.spec
    lo, hi = np.exp(spec.x_interest[0]), np.exp(spec.x_interest[1])
    sbar_edges = np.linspace(lo, hi, 11) if sbar_edges is None else np.asarray(sbar_edges, dtype=np.float64)
    munorm_edges = np.linspace(0.0, 1.0, 11) if munorm_edges is None else np.asarray(munorm_edges, dtype=np.float64)
    if len(sbar_edges) < 2 or len(munorm_edges) < 2:
        raise ValueError("bin grid must have at least one cell")
    if sbar_edges[0] < lo * (1 - 1e-12) or sbar_edges[-1] > hi * (1 + 1e-12):
        raise ValueError(f"sbar_edges must lie inside the interest range [{lo:g}, {hi:g}]")
    if munorm_edges[0] < 0 or munorm_edges[-1] > 1:
        raise ValueError("munorm_edges must lie inside [0, 1]")
    t = spec.T if t is None else t
    gen = rng.generator
    ns, nm = len(sbar_edges) - 1, len(munorm_edges) - 1
    max_err = np.zeros((ns, nm))
    mean_err = np.zeros((ns, nm))
    count = np.zeros((ns, nm), dtype=int)
    for i in range(ns):
        for j in range(nm):
            m = samples_per_cell
            sbar = sbar_edges[i] + (sbar_edges[i + 1] - sbar_edges[i]) * gen.random(m)
            radius = munorm_edges[j] + (munorm_edges[j + 1] - munorm_edges[j]) * gen.random(m)
            s = sample_spots_with_mean(spec, sbar, gen)
            mu = sample_params_at_radius(spec, radius, gen)
            tt = np.full(m, t)
            x = np.log(s)
            err = np.abs(np.asarray(model.price(tt, x, mu)) - np.asarray(oracle.price(tt, x, mu)))
            max_err[i, j] = err.max()
            mean_err[i, j] = err.mean()
            count[i, j] = m
    return BinGrid(sbar_edges, munorm_edges, max_err, count, mean_err)


def read_bins_csv(text: str) -> list[dict]:
    return [{k: (int(v) if k == "count" else float(v)) for k, v in rec.items()}
            for rec in csv.DictReader(io.StringIO(text))]


# ---------------------------------------------------------------------------
# fixed-parameter slices


def slice_eval(model, oracle, t: float, mu: np.ndarray, spots: np.ndarray) -> np.ndarray:
    """Columns: spots..., exact, model, abs_err for fixed time and parameters."""
    spots = np.atleast_2d(spots)
    n = len(spots)
    tt = np.full(n, float(t))
    mus = np.tile(np.asarray(mu, dtype=np.float64), (n, 1))
    x = np.log(spots)
    exact = np.asarray(oracle.price(tt, x, mus))
    approx = np.asarray(model.price(tt, x, mus))
    return np.column_stack([spots, exact, approx, np.abs(exact - approx)])


# ---------------------------------------------------------------------------
# greeks


class SensitivityAccuracyWarning(UserWarning):
    pass


def greeks(model: Model, t, x, mu, params: bool = False) -> dict:
    """Exact network derivatives of the price.

    Returns ``price``, ``dx`` (derivative in each log-spot, shape (N, d)),
    ``delta`` (= dx / S) and with ``params=True`` also ``dmu`` (N, n_mu).
    Parameter sensitivities are markedly less accurate than state ones.
    """
    spec = model.spec
    d = spec.d
    wrt = list(range(1, 1 + d))
    if params:
        warnings.warn("parameter sensitivities of the trained network are much less accurate than price "
                      "or delta", SensitivityAccuracyWarning, stacklevel=2)
        wrt += list(range(1 + d, 1 + d + spec.n_mu))
    jet = model.price_jet(t, x, mu, wrt=wrt, pairs=())
    dx = np.moveaxis(jet.d1[:d], 0, -1)
    out = {"price": jet.val, "dx": dx, "delta": dx / np.exp(np.atleast_2d(x))}
    if params:
        out["dmu"] = np.moveaxis(jet.d1[d:], 0, -1)
    return out


# ---------------------------------------------------------------------------
# training convergence


@dataclass
class ConvergenceReport:
    epochs: np.ndarray
    loss: np.ndarray
    val_mae: np.ndarray
    best_epoch: int
    spearman: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss_total", "val_mae"])
        for e, l, v in zip(self.epochs, self.loss, self.val_mae):
            w.writerow([int(e), repr(float(l)), "" if math.isnan(v) else repr(float(v))])
        return buf.getvalue()


def convergence_report(history: Sequence[dict], validation: Sequence[float] | None = None) -> ConvergenceReport:
    """Join per-epoch loss with validation MAE; Spearman rank correlation of the two."""
    epochs = np.array([h["epoch"] for h in history], dtype=int)
    loss = np.array([h["loss_total"] for h in history], dtype=np.float64)
    if validation is None:
        val = np.array([h.get("val_mae", math.nan) for h in history], dtype=np.float64)
    else:
        val = np.asarray(validation, dtype=np.float64)
    if len(history) == 0:
        return ConvergenceReport(epochs, loss, val, 0, math.nan)
    best = int(epochs[int(np.argmin(loss))])
    ok = ~np.isnan(val)
    rho = math.nan
    if ok.sum() >= 3:
        rho = float(spearmanr(loss[ok], val[ok]).statistic)
    return ConvergenceReport(epochs, loss, val, best, rho)
