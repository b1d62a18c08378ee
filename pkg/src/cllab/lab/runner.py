"""Run an :class:`ExperimentConfig` end to end and write a hashed bundle."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import __version__
from ..agent import init_rnn, load_params, params_to_dict
from ..control import solve_lqr, lqr_teacher_policy
from ..linenv import make_double_integrator, make_k_integrator, make_reference, make_tracking_plant, sample_x0
from ..optim import ClosedLoopTask, OpenLoopTask, TrainConfig, TrainRecord, train
from . import svg
from .config import ConfigError, ExperimentConfig, from_dict
from .export import Bundle, dumps, record_from_csv, record_to_csv
from .probes import FreqProbe, GainProbe, SpectrumProbe, silent_baseline
from .stages import StageReport, acquisition_times, detect_stages

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    record: TrainRecord
    bundle: Optional[Bundle] = None
    stages: Optional[StageReport] = None
    acquisition: Optional[object] = None
    final: Optional[object] = None
    extras: dict = field(default_factory=dict)


def build_env(cfg: ExperimentConfig):
    t = cfg.task
    beta = float(t.get("beta", 0.0))
    if t["kind"] == "double_integrator":
        return make_double_integrator(beta, float(t.get("dt", 1.0)))
    if t["kind"] == "k_integrator":
        return make_k_integrator(t["k"], t["b"], t["c"], beta)
    return make_tracking_plant(beta=beta)


def build_reference(cfg: ExperimentConfig):
    return make_reference() if cfg.task["kind"] == "tracking" else None


def build_agent(cfg: ExperimentConfig, env):
    a = cfg.agent
    tracking = cfg.task["kind"] == "tracking"
    d_in = env.n_obs + (2 if tracking else 0)
    dt = a["dt"] if a["time"] == "continuous" else None
    return init_rnn(a["N"], a["g"], d_in, env.n_inputs, rank1=a["rank1"],
                    activation=a["activation"], dt=dt, tau=a["tau"], seed=cfg.seed)


def build_train_config(cfg: ExperimentConfig) -> TrainConfig:
    tr = dict(cfg.train)
    tr["adam_betas"] = tuple(tr["adam_betas"])
    tr["trainable"] = tuple(tr["trainable"])
    return TrainConfig(seed=cfg.seed, **tr)


def build_task(cfg: ExperimentConfig, env, ref):
    lp = cfg.loop
    if lp["kind"] == "closed":
        return ClosedLoopTask(env, ref)
    if lp["teacher"] == "lqr":
        return OpenLoopTask(env, lqr_teacher_policy(solve_lqr(env).K), mode="teacher_driven")
    teacher = load_params(cfg.resolve(lp["checkpoint"]))
    return OpenLoopTask(env, teacher, mode=lp["mode"], ref=ref)


def probe_x0(env, seed: int, n: int = 100) -> np.ndarray:
    """Fixed initial states for the gain probe; independent of the training streams."""
    child = np.random.SeedSequence(seed).spawn(3)[2]
    return sample_x0(env, n, np.random.default_rng(child))


def build_probes(cfg: ExperimentConfig, env, ref, p0) -> list:
    probes = []
    if "spectrum" in cfg.probes:
        probes.append(SpectrumProbe(env, ref, rank1=p0.rank1 and p0.d_in == 1 and p0.d_out == 1))
    if "gains" in cfg.probes:
        exact = p0.rank1 and p0.activation == "linear" and not p0.continuous
        probes.append(GainProbe(env, probe_x0(env, cfg.seed), T=cfg.train["T"], exact=exact))
    if "freq_decomp" in cfg.probes:
        probes.append(FreqProbe(env, ref, T=cfg.train["T"], n_phases=cfg.raw["freq"]["n_phases"]))
    return probes


def _validate_runtime(cfg: ExperimentConfig, env, p0, task) -> None:
    problems = []
    if cfg.loop["kind"] == "open" and cfg.loop.get("teacher") == "checkpoint":
        t = task.teacher
        if (t.d_in, t.d_out) != (p0.d_in, p0.d_out):
            problems.append(f"loop.checkpoint: teacher has {t.d_in} inputs/{t.d_out} outputs, "
                            f"student needs {p0.d_in}/{p0.d_out}")
    if problems:
        raise ConfigError(problems)


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, render: bool = True) -> RunResult:
    """Train, probe, detect stages and write the bundle to ``out`` (or ``cfg.out``)."""
    env = build_env(cfg)
    ref = build_reference(cfg)
    p0 = build_agent(cfg, env)
    task = build_task(cfg, env, ref)
    _validate_runtime(cfg, env, p0, task)
    tcfg = build_train_config(cfg)
    probes = build_probes(cfg, env, ref, p0)
    rec = train(task, p0, tcfg, probes=probes, checkpoint_epochs=cfg.raw["checkpoints"])
    rec.meta.update(name=cfg.name, seed=cfg.seed, task=cfg.task["kind"])
    res = RunResult(rec, final=rec.final)
    if "stages" in cfg.probes:
        st = cfg.raw["stages"]
        res.stages = detect_stages(rec, st["window"], st["knee_ratio"], st["persist"])
    if "freq_decomp" in cfg.probes:
        base = silent_baseline(p0, env, ref, cfg.train["T"], cfg.raw["freq"]["n_phases"])
        res.acquisition = acquisition_times(rec, cfg.raw["freq"]["threshold"], baseline=base)
    root = out if out is not None else cfg.out
    if root is not None:
        res.bundle = write_bundle(root, cfg, res, render)
    return res


def write_bundle(root: str, cfg: ExperimentConfig, res: RunResult, render: bool = True) -> Bundle:
    b = Bundle(root)
    rec = res.record
    b.write_text("config.json", cfg.to_json() + "\n")
    b.write_text("record.csv", record_to_csv(rec))
    b.write_text("record.json", rec.to_json() + "\n")
    b.write_text("final_params.json", dumps(params_to_dict(res.final)))
    for e, p in sorted(rec.checkpoints.items()):
        b.write_text(f"checkpoints/epoch_{e:06d}.json", dumps(params_to_dict(p)))
    if res.stages is not None:
        b.write_text("stages.json", dumps(res.stages.to_dict()))
    if res.acquisition is not None:
        a = res.acquisition
        b.write_text("acquisition.json", dumps({"times": a.times, "epochs": a.epochs,
                                                "never": a.never, "threshold": a.threshold,
                                                "baseline": a.baseline}))
    if render:
        render_plots(b, rec, res.stages)
    b.write_manifest({"name": cfg.name, "seed": cfg.seed, "version": __version__,
                      "stage_thresholds": cfg.raw["stages"] if res.stages is not None else None})
    return b


def render_plots(b: Bundle, rec: TrainRecord, stages: Optional[StageReport] = None) -> list:
    """Write every plot the record supports; skipped plots are noted in the manifest."""
    written = []
    if not rec.rows:
        b.note("empty record: no plots")
        return written

    def has(col):
        return any(r.get(col) is not None for r in rec.rows)

    bounds = stages.boundaries if stages is not None else ()
    b.write_text("loss.svg", svg.loss_svg(rec, bounds))
    written.append("loss.svg")
    if has("rho"):
        b.write_text("spectrum_path.svg", svg.spectrum_svg(rec))
        written.append("spectrum_path.svg")
    else:
        b.note("spectrum_path.svg skipped: no spectrum probe")
    if has("k1"):
        b.write_text("gain_path.svg", svg.gain_svg(rec))
        written.append("gain_path.svg")
    else:
        b.note("gain_path.svg skipped: no gains probe")
    if has("freq_loss_1"):
        b.write_text("freq_losses.svg", svg.freq_svg(rec))
        written.append("freq_losses.svg")
    else:
        b.note("freq_losses.svg skipped: no freq_decomp probe")
    return written


def rerender(root: str) -> Bundle:
    """Re-draw the plots of an existing bundle from its exported files."""
    with open(os.path.join(root, "manifest.json")) as fh:
        old = json.load(fh)
    with open(os.path.join(root, "record.csv")) as fh:
        rec = record_from_csv(fh.read())
    stages = None
    sp = os.path.join(root, "stages.json")
    if os.path.isfile(sp):
        with open(sp) as fh:
            stages = StageReport(**json.load(fh))
    b = Bundle(root)
    b.files = {k: v for k, v in old["files"].items() if not k.endswith(".svg")}
    for k in old["files"]:
        if k.endswith(".svg") and os.path.isfile(os.path.join(root, k)):
            os.remove(os.path.join(root, k))
    render_plots(b, rec, stages)
    extra = {k: v for k, v in old.items() if k not in ("files", "notes")}
    b.write_manifest(extra)
    return b


# ---------------------------------------------------------------------------
# sweeps


_SWEEP_KEYS = {"name", "base", "grid", "out"}


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def expand_sweep(spec: dict, base_dir: str = ".") -> list:
    """All experiment configs of a sweep spec, validated before any run."""
    problems = [f"sweep: unknown key {k!r}" for k in spec if k not in _SWEEP_KEYS]
    grid = spec.get("grid", {})
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        problems.append("sweep.grid: must map dotted keys to non-empty lists")
        grid = {}
    if problems:
        raise ConfigError(problems)
    name = spec.get("name", "sweep")
    keys = sorted(grid)
    cfgs = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        d = copy.deepcopy(spec.get("base", {}))
        for k, v in zip(keys, combo):
            _set_dotted(d, k, v)
        tag = "_".join(f"{k.split('.')[-1]}{v}" for k, v in zip(keys, combo)) or "base"
        d["name"] = f"{name}_{i:03d}_{tag}"
        try:
            cfgs.append(from_dict(d, base_dir))
        except ConfigError as exc:
            problems += [f"{d['name']}: {p}" for p in exc.problems]
    if problems:
        raise ConfigError(problems)
    return cfgs


def _run_one(args):
    cfg_dict, base_dir, out = args
    cfg = from_dict(cfg_dict, base_dir)
    res = run_experiment(cfg, out)
    return cfg.name, res.bundle.manifest()["files"].get("record.csv")


def run_sweep(spec: dict, out: str, base_dir: str = ".", jobs: int = 1) -> dict:
    """Run every grid point into its own sub-directory of ``out``."""
    cfgs = expand_sweep(spec, base_dir)
    work = [(c.to_dict(), base_dir, os.path.join(out, c.name)) for c in cfgs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    b = Bundle(out)
    index = {name: digest for name, digest in results}
    b.write_text("sweep.json", dumps({"runs": sorted(index), "record_hashes": index}))
    b.write_manifest({"name": spec.get("name", "sweep")})
    return index
