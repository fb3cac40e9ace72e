"""Model and config files (JSON).

Floats are written with Python's shortest round-trip repr, so reloading a
model reproduces every weight bit-exactly.  Run-dependent metadata such as
wall-clock time goes to a ``.meta.json`` sidecar so that the model file
itself depends only on the configuration and the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .network import Architecture, NetworkParams
from .problem import InvalidParam, Model, ProblemSpec
from .training import TrainConfig, TrainReport

FORMAT_VERSION = "1"
WORKERS_ENV = "PARAMPDE_WORKERS"


class ConfigError(ValueError):
    """Invalid config or model file; the message names the offending field path."""


# ---------------------------------------------------------------------------
# model files


def model_to_dict(model: Model, train_meta: dict | None = None) -> dict:
    arch = model.params.arch
    return {
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "arch": {"depth": arch.depth, "width": arch.width, "input_dim": arch.input_dim,
                 "gate_activation": arch.gate_activation},
        "theta": [float(v) for v in model.params.flatten()],
        "train_meta": dict(train_meta or {}),
    }


def model_from_dict(data: dict) -> tuple[Model, dict]:
    unknown = set(data) - {"version", "spec", "arch", "theta", "train_meta"}
    if unknown:
        raise ConfigError(f"unknown model file keys: {sorted(unknown)}")
    if data.get("version") != FORMAT_VERSION:
        raise ConfigError(f"version: unsupported model format {data.get('version')!r}")
    try:
        spec = ProblemSpec.from_dict(data["spec"])
    except (InvalidParam, TypeError) as exc:
        raise ConfigError(f"spec: {exc}") from exc
    try:
        arch = Architecture(**data["arch"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from exc
    theta = np.asarray(data["theta"], dtype=np.float64)
    if theta.ndim != 1 or theta.size != arch.n_params:
        raise ConfigError(f"theta: expected {arch.n_params} weights, found {theta.size}")
    return Model(spec, NetworkParams.unflatten(arch, theta)), dict(data.get("train_meta", {}))


def dumps_model(model: Model, train_meta: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, train_meta), indent=1) + "\n"


def train_meta(cfg: TrainConfig, report: TrainReport) -> dict:
    """Deterministic part of the training record (no timings)."""
    return {
        "seed": cfg.seed,
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "best_loss": report.best_loss,
        "stop_reason": report.stop_reason,
        "workers": cfg.workers,
        "tool_version": __version__,
        "config": cfg.to_dict(),
    }


def sidecar_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def report_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".report.csv")


def save_model(path, model: Model, meta: dict | None = None, report: TrainReport | None = None) -> None:
    """Write the model file; with a report also the sidecar (wall clock) and the loss CSV."""
    Path(path).write_text(dumps_model(model, meta))
    if report is not None:
        sidecar_path(path).write_text(json.dumps({"wall_clock": report.wall_clock}, indent=1) + "\n")
        report_path(path).write_text(report.to_csv())


def load_model(path) -> tuple[Model, dict]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    model, meta = model_from_dict(data)
    side = sidecar_path(path)
    if side.exists():
        meta.update(json.loads(side.read_text()))
    return model, meta


# ---------------------------------------------------------------------------
# config files


@dataclass
class EvalOptions:
    oracle: str = "auto"
    scatter_points: int = 1000
    iv_threshold: float | None = None
    samples_per_cell: int = 1000
    sbar_edges: list[float] | None = None
    munorm_edges: list[float] | None = None
    mc_paths: int = 10**5
    seed: int = 0

    def __post_init__(self):
        errs = []
        if self.oracle not in ("auto", "bs", "geometric", "gh", "mc"):
            errs.append("oracle: must be auto, bs, geometric, gh or mc")
        if self.scatter_points < 1:
            errs.append("scatter_points: must be >= 1")
        if self.samples_per_cell < 1:
            errs.append("samples_per_cell: must be >= 1")
        if self.mc_paths < 2:
            errs.append("mc_paths: must be >= 2")
        for name in ("sbar_edges", "munorm_edges"):
            edges = getattr(self, name)
            if edges is not None and (len(edges) < 2 or np.any(np.diff(edges) <= 0)):
                errs.append(f"{name}: needs at least two increasing values")
        if errs:
            raise ValueError("; ".join(errs))


@dataclass
class ConfigFile:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        ev = {f.name: getattr(self.evaluation, f.name) for f in fields(EvalOptions)}
        return {"problem": self.problem.to_dict(), "train": self.train.to_dict(), "evaluation": ev}


def _prefixed(section: str, exc: Exception) -> ConfigError:
    parts = [p.strip() for p in str(exc).split(";")]
    return ConfigError("; ".join(f"{section}.{p}" for p in parts))


def _build(section: str, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: must be an object")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError("; ".join(f"{section}.{k}: unknown key" for k in unknown))
    try:
        return cls(**data)
    except (ValueError, TypeError) as exc:
        raise _prefixed(section, exc) from exc


def config_from_dict(data: dict) -> ConfigFile:
    """Parse a config mapping; every section and field is optional."""
    if not isinstance(data, dict):
        raise ConfigError("config: must be a JSON object")
    unknown = sorted(set(data) - {"problem", "train", "evaluation"})
    if unknown:
        raise ConfigError("; ".join(f"{k}: unknown section" for k in unknown))
    problem = data.get("problem", {})
    if isinstance(problem, dict) and isinstance(problem.get("param_box"), dict):
        # missing box entries keep their defaults
        problem = dict(problem, param_box={**ProblemSpec().param_box, **problem["param_box"]})
    return ConfigFile(
        _build("problem", ProblemSpec, problem),
        _build("train", TrainConfig, data.get("train", {})),
        _build("evaluation", EvalOptions, data.get("evaluation", {})),
    )


def load_config(path) -> ConfigFile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def workers_override(default: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV}: not an integer ({raw!r})") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be >= 1")
    return n
