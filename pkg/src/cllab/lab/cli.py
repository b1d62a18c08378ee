"""Command-line entry point: ``cllab <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from ..agent import AgentError, load_params, overlaps
from ..control import (ControlError, default_x0_set, fit_gain_from_agent, kalman_gain, recover_gain_exact,
                       solve_lqr, stability_map)
from ..linenv import DivergenceError, EnvError, make_double_integrator, make_k_integrator
from ..optim import TrainError, TrainRecord
from ..spectral import OrderParams, SpectralError
from ..theory import SurrogateConfig, TheoryError, descend_order_params
from . import svg
from .config import ConfigError, load_config
from .export import Bundle, dumps, rows_to_csv
from .runner import probe_x0, rerender, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (TrainError, DivergenceError, ControlError, TheoryError, SpectralError,
                  FloatingPointError, np.linalg.LinAlgError)

log = logging.getLogger("cllab")


def _read_json(path, allowed: set, where: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(d, dict):
        raise ConfigError([f"{where}: top level must be an object"])
    bad = sorted(set(d) - allowed)
    if bad:
        raise ConfigError([f"{where}: unknown key {k!r}" for k in bad])
    return d


def _out(args, default: str) -> str:
    return args.out or default


def cmd_train(args) -> int:
    if args.config is None:
        raise ConfigError(["train: --config is required"])
    cfg = load_config(args.config).with_overrides(args.seed, args.out, args.probe_stride)
    res = run_experiment(cfg, _out(args, cfg.out or os.path.join("runs", cfg.name)))
    last = res.record.rows[-1]
    print(f"{cfg.name}: epoch {last['epoch']} train {last['train_loss']:.6g} "
          f"test {last.get('test_loss')!r} -> {res.bundle.root}")
    if res.stages is not None:
        print(f"stage boundaries: {res.stages.boundaries} flags {res.stages.flags}")
    return EXIT_OK


_MAP_KEYS = {"k1_range", "k2_range", "n1", "n2", "T", "n_x0"}


def cmd_stability_map(args) -> int:
    d = _read_json(args.config, _MAP_KEYS, "stability-map")
    try:
        k1r = tuple(float(v) for v in d.get("k1_range", (-1.0, 3.0)))
        k2r = tuple(float(v) for v in d.get("k2_range", (-1.0, 4.0)))
        n1, n2, T, nx = (int(d.get(k, v)) for k, v in (("n1", 81), ("n2", 101), ("T", 50), ("n_x0", 16)))
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"stability-map: {exc}"]) from None
    if len(k1r) != 2 or len(k2r) != 2 or k1r[0] >= k1r[1] or k2r[0] >= k2r[1]:
        raise ConfigError(["stability-map: ranges must be increasing [lo, hi] pairs"])
    if T < 1 or nx < 1:
        raise ConfigError(["stability-map: T and n_x0 must be >= 1"])
    smap = stability_map(k1r, k2r, n1, n2, T, default_x0_set(nx, args.seed or 0))
    b = Bundle(_out(args, "stability_map"))
    b.write_text("stability_map.csv", smap.to_csv())
    b.write_text("stability_map.svg", svg.gain_svg(TrainRecord(), k1r, k2r, title="stability map"))
    b.write_manifest({"command": "stability-map", "T": T, "n_x0": nx})
    print(f"{smap.regime.size} cells -> {b.root}")
    return EXIT_OK


_DESCENT_KEYS = {"op", "checkpoint", "alpha", "t_early", "T_horizon", "lr", "steps", "power",
                 "beta", "mode"}


def cmd_surrogate_descent(args) -> int:
    d = _read_json(args.config, _DESCENT_KEYS, "surrogate-descent")
    if "checkpoint" in d:
        op = overlaps(load_params(d["checkpoint"]))
    elif "op" in d:
        try:
            op = OrderParams(**d["op"])
        except TypeError as exc:
            raise ConfigError([f"surrogate-descent.op: {exc}"]) from None
    else:
        raise ConfigError(["surrogate-descent: give 'op' or 'checkpoint'"])
    kw = {k: d[k] for k in ("alpha", "t_early", "T_horizon", "lr", "steps", "power", "beta") if k in d}
    try:
        sc = SurrogateConfig(**kw)
    except TheoryError as exc:
        raise ConfigError([f"surrogate-descent: {exc}"]) from None
    mode = d.get("mode", "surrogate")
    if mode not in ("surrogate", "effective"):
        raise ConfigError(["surrogate-descent.mode: must be 'surrogate' or 'effective'"])
    res = descend_order_params(op, sc, mode)
    rows = res.rows()
    cols = ["step", "loss", "zm", "zu", "vm", "vu", "rho", "lambda1_re", "lambda1_im", "lambda3"]
    b = Bundle(_out(args, "descent"))
    b.write_text("descent.csv", rows_to_csv(rows, cols))
    b.write_manifest({"command": "surrogate-descent", "mode": mode, "alpha": sc.alpha})
    print(f"{len(rows)} steps, final loss {rows[-1]['loss']:.6g} -> {b.root}")
    return EXIT_OK


_PLANT_KEYS = {"task", "k", "b", "c", "Q", "R", "W", "V"}


def _plant(d: dict):
    kind = d.get("task", "double_integrator")
    try:
        if kind == "double_integrator":
            return make_double_integrator()
        if kind == "k_integrator":
            return make_k_integrator(int(d.get("k", 3)), int(d.get("b", 1)), int(d.get("c", 1)))
    except EnvError as exc:
        raise ConfigError([str(exc)]) from None
    raise ConfigError([f"task: must be double_integrator or k_integrator, got {kind!r}"])


def _matrix(d, key):
    return None if key not in d else np.array(d[key], dtype=float)


def cmd_lqr(args) -> int:
    d = _read_json(args.config, _PLANT_KEYS - {"W", "V"}, "lqr")
    env = _plant(d)
    sol = solve_lqr(env, _matrix(d, "Q"), _matrix(d, "R"))
    rho = float(np.max(np.abs(np.linalg.eigvals(env.A - env.B @ sol.K))))
    b = Bundle(_out(args, "lqr"))
    b.write_text("lqr.json", dumps({"K": sol.K.tolist(), "M": sol.M.tolist(),
                                    "iterations": sol.iterations, "residual": sol.residual,
                                    "closed_loop_radius": rho}))
    b.write_manifest({"command": "lqr"})
    print(f"K = {sol.K.tolist()} residual {sol.residual:.3g} rho(A-BK) {rho:.6g}")
    return EXIT_OK


def cmd_kalman(args) -> int:
    d = _read_json(args.config, _PLANT_KEYS - {"Q", "R"}, "kalman")
    env = _plant(d)
    L, S, iters, resid = kalman_gain(env, _matrix(d, "W"), _matrix(d, "V"))
    b = Bundle(_out(args, "kalman"))
    b.write_text("kalman.json", dumps({"L": L.tolist(), "S": S.tolist(), "iterations": iters,
                                       "residual": resid}))
    b.write_manifest({"command": "kalman"})
    print(f"L = {L.tolist()} residual {resid:.3g}")
    return EXIT_OK


def cmd_recover_gains(args) -> int:
    d = _read_json(args.config, {"checkpoint", "T", "n_x0"}, "recover-gains")
    path = args.params or d.get("checkpoint")
    if path is None:
        raise ConfigError(["recover-gains: give --params or 'checkpoint' in the config"])
    try:
        p = load_params(path)
    except FileNotFoundError:
        raise ConfigError([f"checkpoint not found: {path}"]) from None
    env = make_double_integrator()
    out = {}
    fit = fit_gain_from_agent(p, probe_x0(env, args.seed or 0, int(d.get("n_x0", 100))),
                              int(d.get("T", 50)), env)
    out["fit"] = {"k1": fit.k1, "k2": fit.k2, "regime": fit.regime, "residual": fit.residual}
    try:
        ex = recover_gain_exact(overlaps(p))
        out["exact"] = {"k1": ex.k1, "k2": ex.k2, "regime": ex.regime}
    except (ControlError, AgentError) as exc:
        out["exact"] = None
        out["exact_error"] = str(exc)
    b = Bundle(_out(args, "gains"))
    b.write_text("gains.json", dumps(out))
    b.write_manifest({"command": "recover-gains"})
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    if args.out is None or not os.path.isfile(os.path.join(args.out, "manifest.json")):
        raise ConfigError(["render: --out must name an existing bundle directory"])
    b = rerender(args.out)
    print(f"rendered {sorted(k for k in b.files if k.endswith('.svg'))}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.config is None:
        raise ConfigError(["sweep: --config is required"])
    spec = _read_json(args.config, {"name", "base", "grid", "out"}, "sweep")
    if args.seed is not None:
        spec.setdefault("base", {})["seed"] = args.seed
    if args.probe_stride is not None:
        spec.setdefault("base", {}).setdefault("train", {})["probe_stride"] = args.probe_stride
    out = _out(args, spec.get("out") or "sweep")
    base_dir = os.path.dirname(os.path.abspath(args.config))
    index = run_sweep(spec, out, base_dir, jobs=args.jobs)
    print(f"{len(index)} runs -> {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "stability-map": cmd_stability_map,
    "surrogate-descent": cmd_surrogate_descent,
    "lqr": cmd_lqr,
    "kalman": cmd_kalman,
    "recover-gains": cmd_recover_gains,
    "render": cmd_render,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cllab", description="closed-loop learning lab")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None, help="single source of randomness")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--probe-stride", type=int, default=None, dest="probe_stride")
        if name == "recover-gains":
            sp.add_argument("--params", help="agent checkpoint JSON")
        if name == "sweep":
            sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(["--seed must be >= 0"])
        if args.probe_stride is not None and args.probe_stride < 1:
            raise ConfigError(["--probe-stride must be >= 1"])
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
