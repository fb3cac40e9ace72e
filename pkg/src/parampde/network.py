"""Gated highway network used as the residual-value approximator.

Layer structure::

    h1      = psi(W0 h0 + b0)
    g, z, r = psi(U^* h0 + W^* h + b^*)            (one set per gated layer)
    h_half  = psi(U^h h0 + W^h (h * r) + b^h)
    h_next  = (1 - g) * h_half + z * h
    out     = W_out h_{L+1} + b_out

``psi`` is tanh for both the layer updates and the gates unless the
architecture asks for sigmoid gates.

The flat parameter vector theta concatenates the blocks in the order given by
:func:`block_shapes`; model files rely on this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Jet2, JetLayout, Tape, Var
from .numerics import Rng

GATES = ("g", "z", "r", "h")


@dataclass(frozen=True)
class Architecture:
    depth: int = 9
    width: int = 90
    input_dim: int = 4
    gate_activation: str = "tanh"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.input_dim < 2:
            raise ValueError(f"invalid architecture {self}")
        if self.gate_activation not in ("tanh", "sigmoid"):
            raise ValueError("gate_activation must be 'tanh' or 'sigmoid'")

    @property
    def n_params(self) -> int:
        m, n, L = self.width, self.input_dim, self.depth
        return m * n + m + L * (4 * m * n + 4 * m * m + 4 * m) + m + 1


def block_shapes(arch: Architecture) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) sequence of all trainable blocks."""
    m, n = arch.width, arch.input_dim
    out = [("W0", (m, n)), ("b0", (m,))]
    for l in range(1, arch.depth + 1):
        for gname in GATES:
            out += [(f"U{gname}{l}", (m, n)), (f"W{gname}{l}", (m, m)), (f"b{gname}{l}", (m,))]
    out += [("W_out", (1, m)), ("b_out", (1,))]
    return out


@dataclass
class NetworkParams:
    arch: Architecture
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.blocks[name]) for name, _ in block_shapes(self.arch)])

    @classmethod
    def unflatten(cls, arch: Architecture, theta: np.ndarray) -> "NetworkParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.n_params,):
            raise ValueError(f"theta has {theta.size} entries, architecture needs {arch.n_params}")
        blocks = {}
        pos = 0
        for name, shape in block_shapes(arch):
            size = int(np.prod(shape))
            blocks[name] = theta[pos:pos + size].reshape(shape).copy()
            pos += size
        return cls(arch, blocks)

    @classmethod
    def zeros(cls, arch: Architecture) -> "NetworkParams":
        return cls.unflatten(arch, np.zeros(arch.n_params))


def init_glorot(arch: Architecture, rng: Rng) -> NetworkParams:
    """Glorot-normal weights (variance 2/(fan_in+fan_out)), zero biases."""
    blocks = {}
    for name, shape in block_shapes(arch):
        if name.startswith("b"):
            blocks[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            std = np.sqrt(2.0 / (fan_in + fan_out))
            blocks[name] = std * rng.normal(shape)
    return NetworkParams(arch, blocks)


def forward_taped(tape: Tape, p: dict[str, Var], h0: Var, arch: Architecture) -> Var:
    """Network output on the tape. ``h0`` is a jet with features on the last axis."""
    act = tape.tanh
    gate = tape.tanh if arch.gate_activation == "tanh" else tape.sigmoid
    h = act(tape.dense([(h0, p["W0"])], p["b0"]))
    for l in range(1, arch.depth + 1):
        g = gate(tape.dense([(h0, p[f"Ug{l}"]), (h, p[f"Wg{l}"])], p[f"bg{l}"]))
        z = gate(tape.dense([(h0, p[f"Uz{l}"]), (h, p[f"Wz{l}"])], p[f"bz{l}"]))
        r = gate(tape.dense([(h0, p[f"Ur{l}"]), (h, p[f"Wr{l}"])], p[f"br{l}"]))
        hr = tape.mul(h, r)
        h_half = act(tape.dense([(h0, p[f"Uh{l}"]), (hr, p[f"Wh{l}"])], p[f"bh{l}"]))
        h = tape.add(tape.mul(tape.rsub(1.0, g), h_half), tape.mul(z, h))
    return tape.dense([(h, p["W_out"])], p["b_out"])


def param_vars(tape: Tape, params: NetworkParams, trainable: bool = True) -> dict[str, Var]:
    make = tape.param if trainable else tape.const
    return {name: make(params.blocks[name]) for name, _ in block_shapes(params.arch)}


def forward(params: NetworkParams, h0: Jet2 | Sequence[Jet2]) -> Jet2:
    """Evaluate the network on a jet input without recording a tape.

    ``h0`` is either one jet whose last axis holds the ``n`` inputs or a
    sequence of ``n`` jets with a common layout.  The result drops that axis.
    """
    if not isinstance(h0, Jet2):
        h0 = list(h0)
        layout = h0[0].layout
        h0 = Jet2(np.stack([j.c for j in h0], axis=-1), layout)
    if h0.c.shape[-1] != params.arch.input_dim:
        raise ValueError(f"network expects {params.arch.input_dim} inputs, got {h0.c.shape[-1]}")
    tape = Tape(record=False)
    out = forward_taped(tape, param_vars(tape, params, trainable=False), tape.const_jet(h0), params.arch)
    return Jet2(out.value[..., 0], h0.layout)


def forward_values(params: NetworkParams, h0: np.ndarray) -> np.ndarray:
    """Plain (derivative-free) evaluation on an ``(N, n)`` input array."""
    h0 = np.asarray(h0, dtype=np.float64)
    lay = JetLayout(0)
    return forward(params, Jet2(h0[None], lay)).val
