"""Command-line interface: ``parampde <command> ...``.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .evaluation import (
    binned_max_error,
    greeks,
    oracle_for,
    scatter_csv,
    scatter_eval,
)
from .impliedvol import IvQuery, implied_vol
from .io import (
    ConfigError,
    ConfigFile,
    load_config,
    load_model,
    report_path,
    save_model,
    train_meta,
    workers_override,
)
from .numerics import NotPositiveDefinite, Rng
from .pricers import BudgetExceeded, bs_closed_form, geometric_closed_form, gh_basket_price, mc_basket_price
from .problem import ProblemSpec, ParamVector, correlation_matrix
from .training import NonFiniteLoss, TrainConfig, train

DESK_PRESET = {"depth": 4, "width": 40, "N": 2000, "max_epochs": 300}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _query_mu(spec: ProblemSpec, args) -> np.ndarray:
    sig = _floats(args.sigmas)
    rho = _floats(args.rhohats) if args.rhohats else []
    if spec.payoff_kind == "geometric_call":
        if len(sig) != 1 or len(rho) != 1:
            raise ConfigError("geometric models take one --sigmas value and one --rhohats value (rho)")
    elif len(sig) != spec.d or len(rho) != spec.d - 1:
        raise ConfigError(f"model has d={spec.d}: need {spec.d} --sigmas and {spec.d - 1} --rhohats")
    return np.array([args.r] + sig + rho)


def _query_x(spec: ProblemSpec, spots: str) -> np.ndarray:
    s = np.array(_floats(spots))
    if s.size != spec.d:
        raise ConfigError(f"--spots: expected {spec.d} values, got {s.size}")
    if np.any(s <= 0):
        raise ConfigError("--spots: prices must be positive")
    return np.log(s)


def _add_query(p, need_t=True):
    if need_t:
        p.add_argument("--t", type=float, required=True, help="time to maturity")
    p.add_argument("--spots", help="comma-separated spot prices s1,..,sd")
    p.add_argument("--r", type=float, help="interest rate")
    p.add_argument("--sigmas", help="comma-separated volatilities")
    p.add_argument("--rhohats", default="", help="comma-separated correlation parameters (rho for geometric)")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ConfigFile()
    tc = cfg.train.to_dict()
    if args.preset == "desk":
        tc.update(DESK_PRESET)
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.max_epochs is not None:
        tc["max_epochs"] = args.max_epochs
    tc["workers"] = workers_override(args.workers if args.workers is not None else tc["workers"])
    tcfg = TrainConfig(**tc)

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']}: loss {row['loss_total']:.6g}", file=sys.stderr)

    model, report = train(cfg.problem, tcfg, callback=progress)
    save_model(args.out, model, train_meta(tcfg, report), report)
    print(f"wrote {args.out} (best epoch {report.best_epoch}, loss {report.best_loss:.6g}); "
          f"report {report_path(args.out)}")
    return 0


def _print_prices(vals, as_json):
    if as_json:
        print(json.dumps([float(v) for v in vals] if len(vals) > 1 else float(vals[0])))
    else:
        for v in vals:
            print(f"{v:.6f}")


def cmd_price(args) -> int:
    model, _ = load_model(args.model)
    spec = model.spec
    if args.batch:
        with open(args.batch, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        data = np.array([[float(v) for v in r] for r in rows])
        if data.ndim != 2 or data.shape[1] != 1 + spec.d + spec.n_mu:
            raise ConfigError(f"--batch: rows need t, {spec.d} spots and {spec.n_mu} parameters")
        t, x, mu = data[:, 0], np.log(data[:, 1:1 + spec.d]), data[:, 1 + spec.d:]
    else:
        if args.t is None or args.spots is None or args.r is None or args.sigmas is None:
            raise ConfigError("price needs --t, --spots, --r, --sigmas (or --batch)")
        t, x, mu = np.array([args.t]), _query_x(spec, args.spots)[None], _query_mu(spec, args)[None]
    vals = model.price(t, x, mu)
    _print_prices(vals, args.json)
    return 0


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_reference(args) -> int:
    s = np.array(_floats(args.spots))
    if np.any(s <= 0):
        raise ConfigError("--spots: prices must be positive")
    x = np.log(s)
    sig = np.array(_floats(args.sigmas))
    rho = _floats(args.rhohats) if args.rhohats else []
    d = s.size
    m = args.method
    stderr = None
    if m == "bs":
        if d != 1 or sig.size != 1:
            raise ConfigError("bs needs one spot and one volatility")
        price = float(bs_closed_form(args.t, s[0], args.r, sig[0], args.strike))
    elif m == "geometric":
        if sig.size != 1 or (d > 1 and len(rho) != 1):
            raise ConfigError("geometric needs one volatility and one rho")
        price = float(geometric_closed_form(args.t, x, args.r, sig[0], rho[0] if rho else 0.0, args.strike))
    else:
        if sig.size == 1 and d > 1:
            sig = np.full(d, sig[0])
        if sig.size != d:
            raise ConfigError(f"--sigmas: expected {d} values")
        if args.geometric_payoff:
            corr = np.full((d, d), rho[0] if rho else 0.0)
            np.fill_diagonal(corr, 1.0)
        else:
            if len(rho) != d - 1:
                raise ConfigError(f"--rhohats: expected {d - 1} values")
            corr = correlation_matrix(ParamVector(args.r, sig, np.array(rho)))
        if m == "gh":
            if args.geometric_payoff:
                raise ConfigError("gh prices arithmetic baskets only")
            price = gh_basket_price(args.t, x, args.r, sig, corr, args.strike, args.nodes)
        else:
            est = mc_basket_price(args.t, x, args.r, sig, corr, args.strike, int(float(args.paths)),
                                  Rng(args.seed),
                                  payoff_kind="geometric_call" if args.geometric_payoff else "basket_call",
                                  antithetic=args.antithetic)
            price, stderr = est.price, est.stderr
    if args.json:
        print(json.dumps({"price": price, "stderr": stderr} if stderr is not None else {"price": price}))
    else:
        print(f"{price:.6f}" + (f" +/- {stderr:.6f}" if stderr is not None else ""))
    return 0


def _eval_setup(args):
    cfg = load_config(args.config) if args.config else ConfigFile()
    ev = cfg.evaluation
    if args.model:
        model, _ = load_model(args.model)
        spec = model.spec
    elif args.self_test:
        model, spec = None, cfg.problem
    else:
        raise ConfigError("a model file is required unless --self-test is given")
    name = args.oracle or ev.oracle
    kw = {"n_paths": ev.mc_paths, "seed": ev.seed} if name == "mc" else {}
    oracle = oracle_for(spec, None if name == "auto" else name, **kw)
    if oracle is None:
        raise ConfigError(f"no exact oracle for d={spec.d}; choose --oracle mc or gh")
    if args.self_test:
        model = oracle
    seed = ev.seed if args.seed is None else args.seed
    return ev, spec, model, oracle, Rng(seed)


def cmd_evaluate(args) -> int:
    ev, spec, model, oracle, rng = _eval_setup(args)
    n = args.points or ev.scatter_points
    rows = scatter_eval(model, oracle, n, rng, args.threshold if args.threshold is not None else ev.iv_threshold)
    text = scatter_csv(spec, rows)
    _emit(text, args.out)
    failed = sum(1 for r in rows if r.flag)
    if failed:
        print(f"{failed} of {len(rows)} rows flagged", file=sys.stderr)
    if failed == len(rows):
        return 3
    return 0


def cmd_bins(args) -> int:
    ev, spec, model, oracle, rng = _eval_setup(args)
    sbar = _floats(args.sbar_edges) if args.sbar_edges else ev.sbar_edges
    mun = _floats(args.munorm_edges) if args.munorm_edges else ev.munorm_edges
    grid = binned_max_error(model, oracle, args.samples_per_cell or ev.samples_per_cell, rng, sbar, mun)
    _emit(grid.to_csv(), args.out)
    return 0


def cmd_greeks(args) -> int:
    model, _ = load_model(args.model)
    spec = model.spec
    t, x, mu = np.array([args.t]), _query_x(spec, args.spots)[None], _query_mu(spec, args)[None]
    g = greeks(model, t, x, mu, params=args.params)
    out = {"price": float(g["price"][0]), "delta": [float(v) for v in g["delta"][0]],
           "dx": [float(v) for v in g["dx"][0]]}
    if args.params:
        out["dmu"] = dict(zip(spec.param_names(), (float(v) for v in g["dmu"][0])))
    if args.json:
        print(json.dumps(out))
    else:
        print(f"price {out['price']:.6f}")
        for i, v in enumerate(out["delta"]):
            print(f"delta{i + 1} {v:.6f}")
        for k, v in out.get("dmu", {}).items():
            print(f"d_{k} {v:.6f}")
    return 0


def cmd_implied_vol(args) -> int:
    sig = implied_vol(IvQuery(args.price, args.t, args.sbar, args.r, args.strike))
    print(json.dumps(sig) if args.json else f"{sig:.10f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parampde", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a model file")
    p.add_argument("config", nargs="?", help="JSON config file (defaults apply to missing fields)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--workers", type=int, help="worker threads (env PARAMPDE_WORKERS overrides)")
    p.add_argument("--preset", choices=["desk", "none"], default="none",
                   help="desk: L=4, m=40, N=2000, at most 300 epochs")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("price", help="price with a trained model")
    p.add_argument("model")
    p.add_argument("--t", type=float)
    _add_query(p, need_t=False)
    p.add_argument("--batch", help="CSV rows: t, s1..sd, parameters")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("reference", help="reference pricers")
    p.add_argument("--method", choices=["bs", "geometric", "gh", "mc"], required=True)
    _add_query(p)
    p.add_argument("--strike", type=float, default=100.0)
    p.add_argument("--paths", default="1e6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, help="Gauss-Hermite nodes per dimension")
    p.add_argument("--antithetic", action="store_true")
    p.add_argument("--geometric-payoff", action="store_true", help="mc: geometric-mean payoff, equal correlation")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_reference)

    for name, func, helptext in (("evaluate", cmd_evaluate, "scatter error study (CSV)"),
                                 ("bins", cmd_bins, "binned maximum error at t = T (CSV)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("model", nargs="?")
        p.add_argument("--config")
        p.add_argument("--oracle", choices=["auto", "bs", "geometric", "gh", "mc"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--self-test", action="store_true", help="use the oracle as the model (errors must be 0)")
        if name == "evaluate":
            p.add_argument("--points", type=int)
            p.add_argument("--threshold", type=float)
        else:
            p.add_argument("--samples-per-cell", type=int)
            p.add_argument("--sbar-edges")
            p.add_argument("--munorm-edges")
        p.set_defaults(func=func)

    p = sub.add_parser("greeks", help="price and sensitivities from a trained model")
    p.add_argument("model")
    _add_query(p)
    p.add_argument("--params", action="store_true", help="also parameter sensitivities (less accurate)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_greeks)

    p = sub.add_parser("implied-vol", help="basket implied volatility of a price")
    p.add_argument("--price", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--sbar", type=float, required=True, help="mean spot")
    p.add_argument("--r", type=float, required=True)
    p.add_argument("--strike", type=float, default=100.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_implied_vol)
    return ap


NUMERICAL = (NonFiniteLoss, NotPositiveDefinite, BudgetExceeded, FloatingPointError, RuntimeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                return args.func(args)
            finally:
                for w in caught:
                    print(f"warning: {w.message}", file=sys.stderr)
    except NUMERICAL as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
