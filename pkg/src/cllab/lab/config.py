"""JSON experiment configuration with exhaustive validation.

Schema (every key optional except where noted; unknown keys are errors)::

    {
      "name": "canonical",
      "seed": 0,
      "out": "runs/canonical",
      "task":  {"kind": "double_integrator" | "k_integrator" | "tracking",
                "k": 3, "b": 1, "c": 1,          # k_integrator only
                "beta": 0.0, "dt": 1.0},        # dt: double_integrator only
      "loop":  {"kind": "closed" | "open",
                "teacher": "checkpoint" | "lqr",  # open only
                "checkpoint": "teacher.json",     # teacher == "checkpoint"
                "mode": "white_noise" | "teacher_driven"},
      "agent": {"N": 100, "g": 0.1, "rank1": false,
                "activation": "linear" | "tanh",
                "time": "discrete" | "continuous", "dt": 0.1, "tau": 1.0},
      "train": {TrainConfig fields except seed},
      "probes": ["spectrum", "gains", "stages", "freq_decomp"],
      "stages": {"window": 20, "knee_ratio": 10.0, "persist": 10},
      "checkpoints": [60, 100],
      "freq": {"n_phases": 8, "threshold": 0.3}
    }
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

TASKS = ("double_integrator", "k_integrator", "tracking")
PROBES = ("spectrum", "gains", "stages", "freq_decomp")

_TOP = {"name", "seed", "out", "task", "loop", "agent", "train", "probes", "stages",
        "checkpoints", "freq"}
_TASK = {"kind", "k", "b", "c", "beta", "dt"}
_LOOP = {"kind", "teacher", "checkpoint", "mode"}
_AGENT = {"N", "g", "rank1", "activation", "time", "dt", "tau"}
_TRAIN = {"T", "batch", "lr", "epochs", "clip_norm", "optimizer", "adam_betas", "adam_eps",
          "trainable", "beta", "probe_stride", "test_batch"}
_STAGES = {"window", "knee_ratio", "persist"}
_FREQ = {"n_phases", "threshold"}


class ConfigError(ValueError):
    """Raised with every problem found in a configuration."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _defaults(kind: str) -> dict:
    tracking = kind == "tracking"
    return {
        "name": "experiment",
        "seed": 0,
        "out": None,
        "task": {"kind": kind, "beta": 0.0},
        "loop": {"kind": "closed"},
        "agent": {"N": 100, "g": 0.1, "rank1": False,
                  "activation": "linear" if tracking else "tanh",
                  "time": "continuous" if tracking else "discrete", "dt": 0.1, "tau": 1.0},
        "train": {"T": 300 if tracking else 50, "batch": 100,
                  "lr": 1e-3 if tracking else 1e-2, "epochs": 1000,
                  "clip_norm": None if tracking else 1.0,
                  "optimizer": "adam" if tracking else "sgd",
                  "adam_betas": [0.9, 0.999], "adam_eps": 1e-8,
                  "trainable": ["recurrent", "m", "z"], "beta": None,
                  "probe_stride": 10 if tracking else 1, "test_batch": 100},
        "probes": [],
        "stages": {"window": 20, "knee_ratio": 10.0, "persist": 10},
        "checkpoints": [],
        "freq": {"n_phases": 8, "threshold": 0.3},
    }


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)
    base_dir: str = "."

    # convenient views
    @property
    def task(self) -> dict:
        return self.raw["task"]

    @property
    def loop(self) -> dict:
        return self.raw["loop"]

    @property
    def agent(self) -> dict:
        return self.raw["agent"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def probes(self) -> list:
        return self.raw["probes"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def out(self) -> Optional[str]:
        return self.raw["out"]

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       probe_stride: Optional[int] = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["out"] = out
        if probe_stride is not None:
            d["train"]["probe_stride"] = probe_stride
        return from_dict(d, self.base_dir)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        return from_dict(d, base_dir)


def _merge(dst: dict, src: dict, allowed: set, where: str, problems: list) -> None:
    for k, v in src.items():
        if k not in allowed:
            problems.append(f"{where}: unknown key {k!r}")
        else:
            dst[k] = v


def from_dict(d, base_dir: str = ".") -> ExperimentConfig:
    """Validate ``d`` and fill defaults; raises :class:`ConfigError` listing all problems."""
    problems: list = []
    if not isinstance(d, dict):
        raise ConfigError(["top level must be a JSON object"])
    task_in = d.get("task", {})
    if not isinstance(task_in, dict):
        problems.append("task: must be an object")
        task_in = {}
    kind = task_in.get("kind", "double_integrator")
    if kind not in TASKS:
        problems.append(f"task.kind: must be one of {list(TASKS)}, got {kind!r}")
        kind = "double_integrator"
    cfg = _defaults(kind)
    for k in d:
        if k not in _TOP:
            problems.append(f"unknown key {k!r}")
    sections = {"task": _TASK, "loop": _LOOP, "agent": _AGENT, "train": _TRAIN,
                "stages": _STAGES, "freq": _FREQ}
    for sec, allowed in sections.items():
        if sec in d:
            if isinstance(d[sec], dict):
                _merge(cfg[sec], d[sec], allowed, sec, problems)
            else:
                problems.append(f"{sec}: must be an object")
    for k in ("name", "seed", "out", "probes", "checkpoints"):
        if k in d:
            cfg[k] = d[k]
    _validate(cfg, base_dir, problems)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(cfg, base_dir)


def _validate(cfg: dict, base_dir: str, problems: list) -> None:
    if not isinstance(cfg["name"], str) or not cfg["name"]:
        problems.append("name: must be a non-empty string")
    if not _is_int(cfg["seed"]) or cfg["seed"] < 0:
        problems.append("seed: must be a non-negative integer")
    if cfg["out"] is not None and not isinstance(cfg["out"], str):
        problems.append("out: must be a string path")

    t = cfg["task"]
    kind = t["kind"]
    if not _is_num(t.get("beta", 0.0)) or t.get("beta", 0.0) < 0:
        problems.append("task.beta: must be a number >= 0")
    if kind == "k_integrator":
        k, b, c = t.get("k", 3), t.get("b", 1), t.get("c", 1)
        t.setdefault("k", k)
        t.setdefault("b", b)
        t.setdefault("c", c)
        if not all(_is_int(v) for v in (k, b, c)) or not (k >= 1 and 1 <= b <= k and 1 <= c <= k):
            problems.append("task: k_integrator needs integers k >= 1, 1 <= b <= k, 1 <= c <= k")
    else:
        for key in ("k", "b", "c"):
            if key in t:
                problems.append(f"task.{key}: only valid for k_integrator")
    if "dt" in t:
        if kind != "double_integrator":
            problems.append("task.dt: only valid for double_integrator")
        elif not _is_num(t["dt"]) or t["dt"] <= 0:
            problems.append("task.dt: must be > 0")

    a = cfg["agent"]
    if not _is_int(a["N"]) or a["N"] < 1:
        problems.append("agent.N: must be an integer >= 1")
    if not _is_num(a["g"]) or a["g"] < 0:
        problems.append("agent.g: must be a number >= 0")
    if not isinstance(a["rank1"], bool):
        problems.append("agent.rank1: must be true or false")
    if a["activation"] not in ("linear", "tanh"):
        problems.append("agent.activation: must be 'linear' or 'tanh'")
    if a["time"] not in ("discrete", "continuous"):
        problems.append("agent.time: must be 'discrete' or 'continuous'")
    elif a["time"] == "continuous":
        if not (_is_num(a["dt"]) and _is_num(a["tau"]) and 0 < a["dt"] <= a["tau"]):
            problems.append("agent: continuous time needs 0 < dt <= tau")
    if a["rank1"] is True and kind == "tracking":
        problems.append("agent.rank1: the tracking task uses full W")

    tr = cfg["train"]
    for key in ("T", "batch", "epochs", "probe_stride", "test_batch"):
        lo = 0 if key == "epochs" else 1
        if not _is_int(tr[key]) or tr[key] < lo:
            problems.append(f"train.{key}: must be an integer >= {lo}")
    if not _is_num(tr["lr"]) or tr["lr"] <= 0:
        problems.append("train.lr: must be > 0")
    if tr["clip_norm"] is not None and (not _is_num(tr["clip_norm"]) or tr["clip_norm"] <= 0):
        problems.append("train.clip_norm: must be null or > 0")
    if tr["optimizer"] not in ("sgd", "adam"):
        problems.append("train.optimizer: must be 'sgd' or 'adam'")
    betas = tr["adam_betas"]
    if not (isinstance(betas, (list, tuple)) and len(betas) == 2
            and all(_is_num(b) and 0 <= b < 1 for b in betas)):
        problems.append("train.adam_betas: must be two numbers in [0, 1)")
    if not _is_num(tr["adam_eps"]) or tr["adam_eps"] <= 0:
        problems.append("train.adam_eps: must be > 0")
    if tr["beta"] is not None and (not _is_num(tr["beta"]) or tr["beta"] < 0):
        problems.append("train.beta: must be null or >= 0")
    groups = tr["trainable"]
    if not isinstance(groups, (list, tuple)) or not groups or \
            not set(groups) <= {"recurrent", "W", "u", "v", "m", "z"}:
        problems.append("train.trainable: must be a non-empty subset of "
                        "recurrent, W, u, v, m, z")

    lp = cfg["loop"]
    if lp["kind"] not in ("closed", "open"):
        problems.append("loop.kind: must be 'closed' or 'open'")
    elif lp["kind"] == "closed":
        for key in ("teacher", "checkpoint", "mode"):
            if key in lp:
                problems.append(f"loop.{key}: only valid for open loop")
    else:
        teacher = lp.get("teacher")
        if teacher not in ("checkpoint", "lqr"):
            problems.append("loop.teacher: must be 'checkpoint' or 'lqr'")
        mode = lp.setdefault("mode", "white_noise" if teacher == "checkpoint" else "teacher_driven")
        if mode not in ("white_noise", "teacher_driven"):
            problems.append("loop.mode: must be 'white_noise' or 'teacher_driven'")
        if teacher == "lqr":
            if mode != "teacher_driven":
                problems.append("loop.mode: an LQR teacher can only drive the plant")
            if kind == "tracking":
                problems.append("loop.teacher: no LQR teacher for the tracking task")
            if "checkpoint" in lp:
                problems.append("loop.checkpoint: not used with an LQR teacher")
        if teacher == "checkpoint":
            path = lp.get("checkpoint")
            if not isinstance(path, str):
                problems.append("loop.checkpoint: path required for a checkpoint teacher")
            elif not os.path.isfile(path if os.path.isabs(path) else os.path.join(base_dir, path)):
                problems.append(f"loop.checkpoint: file not found: {path}")

    probes = cfg["probes"]
    if not isinstance(probes, (list, tuple)):
        problems.append("probes: must be a list")
    else:
        bad = [p for p in probes if p not in PROBES]
        if bad:
            problems.append(f"probes: unknown {bad}; choose from {list(PROBES)}")
        if len(set(probes)) != len(probes):
            problems.append("probes: duplicates")
        if "freq_decomp" in probes and kind != "tracking":
            problems.append("probes: freq_decomp requires the tracking task")
        if "gains" in probes and kind != "double_integrator":
            problems.append("probes: gains are defined for the double integrator only")
        if "stages" in probes and "spectrum" not in probes:
            problems.append("probes: stages needs the spectrum probe")
        if "spectrum" in probes and a["activation"] == "tanh" and kind == "tracking":
            problems.append("probes: spectrum of a tanh tracking agent is not supported")
        cfg["probes"] = sorted(set(p for p in probes if p in PROBES), key=PROBES.index)

    st = cfg["stages"]
    if not _is_int(st["window"]) or st["window"] < 1:
        problems.append("stages.window: must be an integer >= 1")
    if not _is_num(st["knee_ratio"]) or st["knee_ratio"] < 1:
        problems.append("stages.knee_ratio: must be >= 1")
    if not _is_int(st["persist"]) or st["persist"] < 1:
        problems.append("stages.persist: must be an integer >= 1")

    fq = cfg["freq"]
    if not _is_int(fq["n_phases"]) or fq["n_phases"] < 1:
        problems.append("freq.n_phases: must be an integer >= 1")
    if not _is_num(fq["threshold"]) or fq["threshold"] <= 0:
        problems.append("freq.threshold: must be > 0")

    ck = cfg["checkpoints"]
    if not isinstance(ck, (list, tuple)) or not all(_is_int(e) and e >= 0 for e in ck):
        problems.append("checkpoints: must be a list of non-negative epochs")
    else:
        cfg["checkpoints"] = sorted(set(ck))


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    return from_dict(d, os.path.dirname(os.path.abspath(path)))


def canonical_config(**overrides) -> ExperimentConfig:
    """Rank-1 linear closed-loop run on the double integrator with m fixed."""
    d = {
        "name": "canonical",
        "task": {"kind": "double_integrator"},
        "agent": {"N": 100, "g": 0.1, "rank1": True, "activation": "linear"},
        "train": {"epochs": 2000, "trainable": ["recurrent", "z"]},
        "probes": ["spectrum", "gains", "stages"],
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return from_dict(d)


def tracking_config(**overrides) -> ExperimentConfig:
    d = {"name": "tracking", "task": {"kind": "tracking"}, "probes": ["spectrum", "freq_decomp"]}
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return from_dict(d)
