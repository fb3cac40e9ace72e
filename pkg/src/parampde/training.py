"""Residual loss, Adam and the resample-every-batch training loop with early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .autodiff import Tape, param_gradient
from .network import Architecture, NetworkParams, forward_taped, init_glorot, param_vars
from .numerics import Rng
from .problem import (
    Model,
    ProblemSpec,
    input_jets,
    localisation_jet,
    operator_coefficients,
    payoff,
    pde_residual,
    sample_initial,
    sample_interior,
    scaled_input_jet,
    training_layout,
)

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    N: int = 10_000
    batches_per_epoch: int = 10
    patience_epochs: int = 50
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 2000
    seed: int = 0
    depth: int = 9
    width: int = 90
    gate_activation: str = "tanh"
    boundary_weight: float = 0.0
    resample: bool = True
    workers: int = 1
    validation_points: int = 10_000
    validation_params: str = "center"
    validation_oracle: str = "auto"

    def __post_init__(self):
        errs = []
        if self.N < 1:
            errs.append("N: must be >= 1")
        if self.batches_per_epoch < 1:
            errs.append("batches_per_epoch: must be >= 1")
        if self.patience_epochs < 1:
            errs.append("patience_epochs: must be >= 1")
        if self.max_epochs < 1:
            errs.append("max_epochs: must be >= 1")
        if self.learning_rate < 0:
            errs.append("learning_rate: must be >= 0")
        if self.boundary_weight != 0:
            errs.append("boundary_weight: boundary residual training is not supported; must be 0")
        if self.workers < 1:
            errs.append("workers: must be >= 1")
        if self.validation_params not in ("center", "box"):
            errs.append("validation_params: must be 'center' or 'box'")
        if self.validation_oracle not in ("auto", "none", "bs", "geometric", "gh"):
            errs.append("validation_oracle: must be auto, none, bs, geometric or gh")
        if errs:
            raise ValueError("; ".join(errs))

    def architecture(self, spec: ProblemSpec) -> Architecture:
        return Architecture(self.depth, self.width, spec.n_inputs, self.gate_activation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns new state and parameters."""
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise ValueError("Adam shapes do not match")
    step = state.step_count + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, step), theta


# ---------------------------------------------------------------------------
# residuals (evaluation form)


def interior_residual(model, t, x, mu) -> float:
    """Mean of (u_t + A u)^2 over a batch; ``model`` needs ``price_jet``."""
    d = model.spec.d
    lay = training_layout(d)
    jet = model.price_jet(t, x, mu, wrt=range(1 + d), pairs=lay.pairs)
    res = pde_residual(model.spec, mu, jet)
    return float(np.mean(res * res))


def initial_residual(model, x, mu) -> float:
    """Mean of (u(0, x) - g(x))^2 over a batch."""
    u0 = model.price_jet(np.zeros(len(x)), x, mu).val
    e = u0 - payoff(model.spec, x)
    return float(np.mean(e * e))


def total_loss(model, interior, initial) -> float:
    return interior_residual(model, *interior) + initial_residual(model, *initial)


# ---------------------------------------------------------------------------
# taped loss


def _chunk_loss(spec: ProblemSpec, params: NetworkParams, interior, initial, n_int: int, n_ic: int):
    """Partial loss sums of one chunk (already divided by the full batch sizes) and their gradient."""
    d = spec.d
    tape = Tape()
    pv = param_vars(tape, params)
    arch = params.arch

    t, x, mu = interior
    lay = training_layout(d)
    _, jets = input_jets(spec, t, x, mu, wrt=range(1 + d), pairs=lay.pairs)
    loc = localisation_jet(spec, jets[0], jets[1:1 + d], jets[1 + d:])
    net = forward_taped(tape, pv, tape.const_jet(scaled_input_jet(spec, jets)), arch)
    coef = operator_coefficients(spec, mu, lay)
    res = tape.add(tape.combine(net, coef[..., None]), np.sum(coef * loc.c, axis=0)[:, None])
    l_int = tape.sum(tape.square(res), 1.0 / n_int)

    x0, mu0 = initial
    _, jets0 = input_jets(spec, np.zeros(len(x0)), x0, mu0, wrt=())
    loc0 = localisation_jet(spec, jets0[0], jets0[1:1 + d], jets0[1 + d:]).val
    net0 = forward_taped(tape, pv, tape.const_jet(scaled_input_jet(spec, jets0)), arch)
    err = tape.add(tape.combine(net0, np.ones((1, len(x0), 1))), (loc0 - payoff(spec, x0))[:, None])
    l_ic = tape.sum(tape.square(err), 1.0 / n_ic)

    total = tape.add(l_int, l_ic)
    grad = param_gradient(tape, total, list(pv.values()))
    return float(l_int.value), float(l_ic.value), grad


def _split(arrays, k):
    n = len(arrays[0])
    edges = np.linspace(0, n, k + 1).astype(int)
    return [tuple(a[edges[i]:edges[i + 1]] for a in arrays) for i in range(k)]


def loss_and_grad(spec: ProblemSpec, params: NetworkParams, interior, initial, workers: int = 1):
    """(interior loss, initial loss, gradient of their sum with respect to theta).

    With several workers the batch is split into contiguous chunks evaluated
    on independent tapes and reduced in chunk order.
    """
    n_int, n_ic = len(interior[0]), len(initial[0])
    k = max(1, min(workers, n_int, n_ic))
    if k == 1:
        return _chunk_loss(spec, params, interior, initial, n_int, n_ic)
    jobs = list(zip(_split(interior, k), _split(initial, k)))
    with ThreadPoolExecutor(max_workers=k) as ex:
        parts = list(ex.map(lambda j: _chunk_loss(spec, params, j[0], j[1], n_int, n_ic), jobs))
    li = lc = 0.0
    grad = np.zeros(params.arch.n_params)
    for a, b, g in parts:
        li += a
        lc += b
        grad += g
    return li, lc, grad


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf
    wall_clock: float = 0.0
    seed: int = 0
    stop_reason: str = ""

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def losses(self) -> np.ndarray:
        return np.array([h["loss_total"] for h in self.history])

    def val_mae(self) -> np.ndarray:
        return np.array([h.get("val_mae", math.nan) for h in self.history])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss_interior", "loss_initial", "loss_total", "val_mae"])
        for h in self.history:
            val = h.get("val_mae")
            w.writerow([h["epoch"], repr(h["loss_interior"]), repr(h["loss_initial"]),
                        repr(h["loss_total"]), "" if val is None else repr(val)])
        return buf.getvalue()


def validation_set(spec: ProblemSpec, cfg: TrainConfig, rng: Rng):
    """Fixed points on the interest box priced by the configured oracle, or None."""
    from .evaluation import oracle_for, sample_interest

    name = cfg.validation_oracle
    if cfg.validation_points <= 0 or name == "none":
        return None
    oracle = oracle_for(spec, None if name == "auto" else name)
    if oracle is None:
        return None
    t, x, mu = sample_interest(spec, cfg.validation_points, rng, center=cfg.validation_params == "center")
    return t, x, mu, oracle.price(t, x, mu)


def train(
    spec: ProblemSpec,
    cfg: TrainConfig,
    rng: Rng | None = None,
    init: NetworkParams | None = None,
    callback: Callable[[dict], None] | None = None,
) -> tuple[Model, TrainReport]:
    """Minimise the residual loss with Adam, resampling points every batch.

    Stops after ``patience_epochs`` epochs without a lower epoch-mean loss (or
    at ``max_epochs``) and returns the parameters at the end of the best epoch.
    """
    rng = Rng(cfg.seed) if rng is None else rng
    arch = cfg.architecture(spec)
    params = init if init is not None else init_glorot(arch, rng.spawn(0))
    if params.arch != arch:
        raise ValueError("initial parameters do not match the configured architecture")
    sampler = rng.spawn(1)
    val = validation_set(spec, cfg, rng.spawn(2))

    theta = params.flatten()
    adam = AdamState.zeros(theta.size)
    report = TrainReport(seed=rng.seed)
    best_theta = theta.copy()
    start = time.perf_counter()
    batch = None
    for epoch in range(1, cfg.max_epochs + 1):
        li_sum = lc_sum = 0.0
        for b in range(cfg.batches_per_epoch):
            if batch is None or cfg.resample:
                batch = (sample_interior(spec, cfg.N, sampler), sample_initial(spec, cfg.N, sampler))
            current = NetworkParams.unflatten(arch, theta)
            li, lc, grad = loss_and_grad(spec, current, batch[0], batch[1], cfg.workers)
            if not (math.isfinite(li) and math.isfinite(lc) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {b + 1}: interior={li!r}, initial={lc!r}"
                )
            adam, theta = adam_step(adam, theta, grad, cfg.learning_rate,
                                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            li_sum += li
            lc_sum += lc
        nb = cfg.batches_per_epoch
        row = {"epoch": epoch, "loss_interior": li_sum / nb, "loss_initial": lc_sum / nb,
               "loss_total": (li_sum + lc_sum) / nb}
        if val is not None:
            model = Model(spec, NetworkParams.unflatten(arch, theta))
            row["val_mae"] = float(np.mean(np.abs(model.price(*val[:3], warn=False) - val[3])))
        report.history.append(row)
        if row["loss_total"] < report.best_loss:
            report.best_loss = row["loss_total"]
            report.best_epoch = epoch
            best_theta = theta.copy()
        if callback is not None:
            callback(row)
        log.debug("epoch %d loss %.6g", epoch, row["loss_total"])
        if epoch - report.best_epoch >= cfg.patience_epochs:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    report.wall_clock = time.perf_counter() - start
    return Model(spec, NetworkParams.unflatten(arch, best_theta)), report
