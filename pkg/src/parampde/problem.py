"""Parametric basket-option pricing problem in log-prices.

Coordinates of a query are ordered ``(t, x_1..x_d, mu_1..mu_{n_mu})`` where
``t`` is time to maturity and ``x_i = log(S_i)``.  Parameter layout:

* basket_call:    ``mu = (r, sigma_1..sigma_d, rho_hat_1..rho_hat_{d-1})``
* geometric_call: ``mu = (r, sigma, rho)`` with equal volatilities and one
  common pairwise correlation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .autodiff import Jet2, JetLayout
from .network import NetworkParams, forward
from .numerics import Rng

PAYOFF_KINDS = ("basket_call", "geometric_call")


class InvalidParam(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class OutOfDomainWarning(UserWarning):
    pass


def _default_box():
    return {"r": (0.1, 0.3), "sigma": (0.1, 0.3), "rho_hat": (0.2, 0.8)}


@dataclass
class ProblemSpec:
    """Problem definition. ``param_box`` keys: r, sigma, rho_hat.

    For the geometric payoff ``rho_hat`` bounds the common correlation.
    """

    d: int = 1
    strike: float = 100.0
    payoff_kind: str = "basket_call"
    lam: float = 0.1
    T: float = 4.0
    x_comp: tuple[float, float] = (math.log(21.0), math.log(460.0))
    x_interest: tuple[float, float] = (math.log(25.0), math.log(150.0))
    t_interest_min: float = 0.5
    param_box: dict = field(default_factory=_default_box)

    def __post_init__(self):
        self.x_comp = tuple(float(v) for v in self.x_comp)
        self.x_interest = tuple(float(v) for v in self.x_interest)
        self.param_box = {k: tuple(float(v) for v in b) for k, b in self.param_box.items()}
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.d < 1:
            errs.append("d: must be >= 1")
        if self.payoff_kind not in PAYOFF_KINDS:
            errs.append(f"payoff_kind: must be one of {PAYOFF_KINDS}")
        if not self.strike > 0:
            errs.append("strike: must be > 0")
        if not self.lam > 0:
            errs.append("lam: must be > 0")
        if not self.T > 0:
            errs.append("T: must be > 0")
        lo, hi = self.x_comp
        ilo, ihi = self.x_interest
        if not lo < hi:
            errs.append("x_comp: lower bound must be below upper bound")
        if not (lo <= ilo <= ihi <= hi):
            errs.append("x_interest: must lie inside x_comp")
        if not 0 <= self.t_interest_min <= self.T:
            errs.append("t_interest_min: must lie in [0, T]")
        if set(self.param_box) != {"r", "sigma", "rho_hat"}:
            errs.append("param_box: needs exactly the keys r, sigma, rho_hat")
        else:
            for key, (blo, bhi) in self.param_box.items():
                if blo > bhi:
                    errs.append(f"param_box.{key}: lower bound above upper bound")
            slo, _ = self.param_box["sigma"]
            if slo <= 0:
                errs.append("param_box.sigma: volatilities must be > 0")
            rlo, rhi = self.param_box["rho_hat"]
            floor = -1.0 if self.payoff_kind == "basket_call" else (-1.0 / (self.d - 1) if self.d > 1 else -1.0)
            if not (floor < rlo and rhi < 1.0):
                errs.append(f"param_box.rho_hat: must lie inside ({floor:g}, 1)")
        if errs:
            raise InvalidParam("; ".join(errs))

    # parameter layout ----------------------------------------------------
    @property
    def n_mu(self) -> int:
        return 2 * self.d if self.payoff_kind == "basket_call" else 3

    @property
    def n_inputs(self) -> int:
        return 1 + self.d + self.n_mu

    def param_names(self) -> list[str]:
        if self.payoff_kind == "geometric_call":
            return ["r", "sigma", "rho"]
        return ["r"] + [f"sigma{i + 1}" for i in range(self.d)] + [f"rhohat{i + 1}" for i in range(self.d - 1)]

    def param_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate lower/upper bounds of mu."""
        box = self.param_box
        if self.payoff_kind == "geometric_call":
            keys = ["r", "sigma", "rho_hat"]
        else:
            keys = ["r"] + ["sigma"] * self.d + ["rho_hat"] * (self.d - 1)
        lo = np.array([box[k][0] for k in keys])
        hi = np.array([box[k][1] for k in keys])
        return lo, hi

    def input_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Computational box for (t, x, mu)."""
        plo, phi = self.param_bounds()
        lo = np.concatenate([[0.0], np.full(self.d, self.x_comp[0]), plo])
        hi = np.concatenate([[self.T], np.full(self.d, self.x_comp[1]), phi])
        return lo, hi

    def center_params(self) -> np.ndarray:
        lo, hi = self.param_bounds()
        return 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["x_comp"] = list(self.x_comp)
        out["x_interest"] = list(self.x_interest)
        out["param_box"] = {k: list(v) for k, v in self.param_box.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidParam(f"unknown problem keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ParamVector:
    r: float
    sigma: np.ndarray
    rho_hat: np.ndarray

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        self.rho_hat = np.atleast_1d(np.asarray(self.rho_hat, dtype=np.float64))
        if self.rho_hat.size != max(self.sigma.size - 1, 0):
            raise InvalidParam("rho_hat must have d-1 entries")
        if np.any(self.sigma <= 0):
            raise InvalidParam("volatilities must be positive")
        if np.any(np.abs(self.rho_hat) >= 1):
            raise InvalidParam("pairwise correlations must lie in (-1, 1)")

    @property
    def d(self) -> int:
        return self.sigma.size

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.r], self.sigma, self.rho_hat])

    @classmethod
    def from_array(cls, mu, d: int) -> "ParamVector":
        mu = np.asarray(mu, dtype=np.float64)
        if mu.shape != (2 * d,):
            raise InvalidParam(f"expected {2 * d} parameters for d={d}")
        return cls(float(mu[0]), mu[1:1 + d], mu[1 + d:])


def correlation_matrix(mu: ParamVector | np.ndarray) -> np.ndarray:
    """Full correlation matrix from successive pairwise correlations.

    Accepts a :class:`ParamVector` or an array of pairwise correlations whose
    last axis has length d-1; batched input yields ``(..., d, d)``.
    """
    rho_hat = mu.rho_hat if isinstance(mu, ParamVector) else np.asarray(mu, dtype=np.float64)
    if np.any(np.abs(rho_hat) >= 1):
        raise InvalidParam("pairwise correlations must lie in (-1, 1)")
    d = rho_hat.shape[-1] + 1
    batch = rho_hat.shape[:-1]
    rho = np.ones(batch + (d, d))
    for i in range(d):
        prod = np.ones(batch)
        for j in range(i + 1, d):
            prod = prod * rho_hat[..., j - 1]
            rho[..., i, j] = prod
            rho[..., j, i] = prod
    return rho


def equal_correlation_matrix(rho, d: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    out = np.broadcast_to(rho[..., None, None], rho.shape + (d, d)).copy()
    idx = np.arange(d)
    out[..., idx, idx] = 1.0
    return out


def expand_params(spec: ProblemSpec, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a batch of parameter vectors into (r, sigma (N, d), corr (N, d, d))."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    if mu.shape[-1] != spec.n_mu:
        raise InvalidParam(f"expected {spec.n_mu} parameters, got {mu.shape[-1]}")
    d = spec.d
    r = mu[:, 0]
    if spec.payoff_kind == "geometric_call":
        sigma = np.repeat(mu[:, 1:2], d, axis=1)
        corr = equal_correlation_matrix(mu[:, 2], d)
    else:
        sigma = mu[:, 1:1 + d]
        corr = correlation_matrix(mu[:, 1 + d:])
    return r, sigma, corr


# ---------------------------------------------------------------------------
# payoff and localisation


def payoff(spec: ProblemSpec, x) -> np.ndarray:
    """Terminal payoff at log-prices ``x`` (last axis = assets)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.payoff_kind == "geometric_call":
        return np.maximum(np.exp(np.mean(x, axis=-1)) - spec.strike, 0.0)
    return np.maximum(np.mean(np.exp(x), axis=-1) - spec.strike, 0.0)


def _geometric_drag(sigma, rho, d: int):
    return 0.5 * sigma * sigma * (1.0 - 1.0 / d) * (1.0 - rho)


def localisation_argument(spec: ProblemSpec, t: Jet2, x: Sequence[Jet2], mu: Sequence[Jet2]) -> Jet2:
    """Discounted expected basket level minus discounted strike (softplus argument)."""
    d = spec.d
    r = mu[0]
    disc_strike = spec.strike * (-(r * t)).exp()
    if spec.payoff_kind == "geometric_call":
        mean_x = x[0]
        for xi in x[1:]:
            mean_x = mean_x + xi
        mean_x = mean_x * (1.0 / d)
        beta = _geometric_drag(mu[1], mu[2], d)
        return (mean_x - beta * t).exp() - disc_strike
    level = x[0].exp()
    for xi in x[1:]:
        level = level + xi.exp()
    return level * (1.0 / d) - disc_strike


def localisation_jet(spec: ProblemSpec, t: Jet2, x: Sequence[Jet2], mu: Sequence[Jet2]) -> Jet2:
    return localisation_argument(spec, t, x, mu).softplus(spec.lam)


def _const_jets(spec, t, x, mu):
    lay = JetLayout(0)
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return (
        Jet2.constant(t, lay),
        [Jet2.constant(x[..., i], lay) for i in range(spec.d)],
        [Jet2.constant(mu[..., i], lay) for i in range(spec.n_mu)],
    )


def localisation_z(spec: ProblemSpec, t, x, mu) -> np.ndarray:
    return localisation_argument(spec, *_const_jets(spec, t, x, mu)).val


def localisation(spec: ProblemSpec, t, x, mu) -> np.ndarray:
    """Softplus-smoothed lower no-arbitrage bound (1/lam) log(1 + exp(lam z))."""
    return localisation_jet(spec, *_const_jets(spec, t, x, mu)).val


def softplus_excess(z, lam: float) -> np.ndarray:
    """softplus_lam(z) - max(z, 0) = (1/lam) log(1 + exp(-lam |z|)), computed directly."""
    z = np.asarray(z, dtype=np.float64)
    return np.log1p(np.exp(-lam * np.abs(z))) / lam


# ---------------------------------------------------------------------------
# operator


@dataclass
class DerivativeBundle:
    """Value and (t, x) derivatives at a batch of points; u_xx has shape (..., d, d)."""

    u: np.ndarray
    u_t: np.ndarray
    u_x: np.ndarray
    u_xx: np.ndarray

    @classmethod
    def from_jet(cls, jet: Jet2, d: int) -> "DerivativeBundle":
        """Jet must carry directions (t, x_1..x_d) with all x-pairs stored."""
        u_xx = np.empty(jet.val.shape + (d, d))
        for i in range(d):
            for j in range(i, d):
                u_xx[..., i, j] = u_xx[..., j, i] = jet.second(1 + i, 1 + j)
        return cls(jet.val, jet.d1[0], np.moveaxis(jet.d1[1:1 + d], 0, -1), u_xx)


def bs_operator(r, sigma, corr, b: DerivativeBundle) -> np.ndarray:
    """A u = r u - sum_i (r - sigma_i^2/2) u_i - sum_ij rho_ij sigma_i sigma_j / 2 u_ij."""
    r = np.asarray(r, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    drift = r[..., None] - 0.5 * sigma * sigma
    cov = corr * sigma[..., :, None] * sigma[..., None, :]
    return (
        r * b.u
        - np.sum(drift * b.u_x, axis=-1)
        - 0.5 * np.sum(cov * b.u_xx, axis=(-2, -1))
    )


def bs_operator_mu(mu: ParamVector, b: DerivativeBundle) -> np.ndarray:
    return bs_operator(mu.r, mu.sigma, correlation_matrix(mu), b)


def pde_residual(spec: ProblemSpec, mu: np.ndarray, jet: Jet2) -> np.ndarray:
    """u_t + A u for a price jet over directions (t, x_1..x_d)."""
    r, sigma, corr = expand_params(spec, mu)
    b = DerivativeBundle.from_jet(jet, spec.d)
    return b.u_t + bs_operator(r, sigma, corr, b)


def training_layout(d: int) -> JetLayout:
    """Directions (t, x_1..x_d); only the x-x second derivatives are stored."""
    return JetLayout(1 + d, [(1 + i, 1 + j) for i in range(d) for j in range(i, d)])


def operator_coefficients(spec: ProblemSpec, mu: np.ndarray, layout: JetLayout) -> np.ndarray:
    """Per-sample weights ``w`` with ``u_t + A u = sum_c w[c] * jet[c]``, shape (C, N)."""
    r, sigma, corr = expand_params(spec, mu)
    d = spec.d
    coef = np.zeros((layout.n_channels, r.shape[0]))
    coef[0] = r
    coef[1] = 1.0
    coef[2:2 + d] = -(r[:, None] - 0.5 * sigma * sigma).T
    for i in range(d):
        for j in range(i, d):
            cov = corr[:, i, j] * sigma[:, i] * sigma[:, j]
            coef[layout.pair_slot(1 + i, 1 + j)] = -0.5 * cov if i == j else -cov
    return coef


# ---------------------------------------------------------------------------
# scaling and sampling


def _affine(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = spec.input_bounds()
    width = hi - lo
    slope = np.where(width > 0, 2.0 / np.where(width > 0, width, 1.0), 0.0)
    offset = np.where(width > 0, -1.0 - slope * lo, 0.0)
    return slope, offset


def input_slopes(spec: ProblemSpec) -> np.ndarray:
    """Derivative of each scaled coordinate with respect to its original one."""
    return _affine(spec)[0]


def stack_inputs(spec: ProblemSpec, t, x, mu) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    n = max(t.shape[0], x.shape[0], mu.shape[0])
    if x.shape[-1] != spec.d or mu.shape[-1] != spec.n_mu:
        raise ValueError(f"query dimensions do not match d={spec.d}, n_mu={spec.n_mu}")
    return np.concatenate(
        [np.broadcast_to(t[:, None], (n, 1)), np.broadcast_to(x, (n, spec.d)), np.broadcast_to(mu, (n, spec.n_mu))],
        axis=1,
    )


def scale_input(spec: ProblemSpec, t, x, mu) -> np.ndarray:
    """Affine map of the computational box onto [-1, 1]^n (collapsed coordinates map to 0)."""
    slope, offset = _affine(spec)
    return stack_inputs(spec, t, x, mu) * slope + offset


def unscale(spec: ProblemSpec, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    lo, hi = spec.input_bounds()
    raw = lo + 0.5 * (z + 1.0) * (hi - lo)
    return raw[:, 0], raw[:, 1:1 + spec.d], raw[:, 1 + spec.d:]


def check_domain(spec: ProblemSpec, t, x, mu, strict: bool = False) -> bool:
    """Warn (or raise with ``strict``) for queries outside the computational box."""
    raw = stack_inputs(spec, t, x, mu)
    lo, hi = spec.input_bounds()
    tol = 1e-12 * np.maximum(1.0, np.abs(hi))
    bad = np.any((raw < lo - tol) | (raw > hi + tol))
    if bad:
        msg = "query outside the computational domain; the network extrapolates"
        if strict:
            raise OutOfDomain(msg)
        warnings.warn(msg, OutOfDomainWarning, stacklevel=2)
    return not bad


def sample_params(spec: ProblemSpec, n: int, rng: Rng) -> np.ndarray:
    lo, hi = spec.param_bounds()
    u = rng.generator.random((n, spec.n_mu))
    return lo + (hi - lo) * u


def sample_interior(spec: ProblemSpec, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform draws of (t, x, mu) over (0, T) x computational box x parameter box."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator
    t = spec.T * gen.random(n)
    # Generator.random is on [0, 1); keep t strictly positive
    t = np.where(t > 0, t, 0.5 * spec.T)
    lo, hi = spec.x_comp
    x = lo + (hi - lo) * gen.random((n, spec.d))
    return t, x, sample_params(spec, n, rng)


def sample_initial(spec: ProblemSpec, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = spec.x_comp
    x = lo + (hi - lo) * rng.generator.random((n, spec.d))
    return x, sample_params(spec, n, rng)


# ---------------------------------------------------------------------------
# trained model


def input_jets(
    spec: ProblemSpec, t, x, mu, wrt: Sequence[int], pairs=None
) -> tuple[JetLayout, list[Jet2]]:
    """One jet per raw input coordinate; coordinate ``wrt[k]`` is seeded along direction k."""
    raw = stack_inputs(spec, t, x, mu)
    lay = JetLayout(len(wrt), pairs)
    dirs = {coord: k for k, coord in enumerate(wrt)}
    jets = []
    for j in range(raw.shape[1]):
        if j in dirs:
            e = np.zeros(lay.k)
            e[dirs[j]] = 1.0
            jets.append(Jet2.variable(raw[:, j], e, lay))
        else:
            jets.append(Jet2.constant(raw[:, j], lay))
    return lay, jets


def scaled_input_jet(spec: ProblemSpec, jets: Sequence[Jet2]) -> Jet2:
    """Stack scaled coordinate jets along a trailing feature axis."""
    slope, offset = _affine(spec)
    chans = []
    for j, jet in enumerate(jets):
        c = jet.c * slope[j]
        c[0] += offset[j]
        chans.append(c)
    return Jet2(np.stack(chans, axis=-1), jets[0].layout)


@dataclass
class Model:
    """Trained network plus its problem definition.

    price = localisation + network(scaled inputs)
    """

    spec: ProblemSpec
    params: NetworkParams

    def __post_init__(self):
        if self.params.arch.input_dim != self.spec.n_inputs:
            raise ValueError(
                f"network has {self.params.arch.input_dim} inputs, problem needs {self.spec.n_inputs}"
            )

    def price_jet(self, t, x, mu, wrt: Sequence[int] = (), pairs=None, parts: bool = False):
        lay, jets = input_jets(self.spec, t, x, mu, wrt, pairs)
        d = self.spec.d
        loc = localisation_jet(self.spec, jets[0], jets[1:1 + d], jets[1 + d:])
        net = forward(self.params, scaled_input_jet(self.spec, jets))
        if parts:
            return loc, net
        return Jet2(loc.c + net.c, lay)

    def network_value(self, t, x, mu) -> np.ndarray:
        return self.price_jet(t, x, mu, parts=True)[1].val

    def price(self, t, x, mu, warn: bool = True) -> np.ndarray:
        if warn:
            check_domain(self.spec, t, x, mu)
        return self.price_jet(t, x, mu).val
