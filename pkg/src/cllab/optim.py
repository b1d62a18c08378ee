"""Closed-loop and teacher-student training with SGD or Adam.

Gradients are exact: backpropagation through time over the whole unrolled
agent-plant recursion (closed loop) or the student alone (open loop).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rollout as ro
from .linenv import DivergenceError, EnvModel, reference_positions, sample_phases, sample_x0

log = logging.getLogger(__name__)

GROUP_ORDER = ("W", "u", "v", "m", "z")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 50
    batch: int = 100
    lr: float = 1e-2
    epochs: int = 1000
    clip_norm: Optional[float] = 1.0
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    trainable: tuple = ("recurrent", "m", "z")
    beta: Optional[float] = None
    seed: int = 0
    probe_stride: int = 1
    test_batch: int = 100

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.trainable = tuple(self.trainable)
        problems = []
        if self.T < 1:
            problems.append("T must be >= 1")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            problems.append("clip_norm must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append("optimizer must be 'sgd' or 'adam'")
        if self.probe_stride < 1:
            problems.append("probe_stride must be >= 1")
        bad = set(self.trainable) - {"recurrent", "W", "u", "v", "m", "z"}
        if bad:
            problems.append(f"unknown trainable groups {sorted(bad)}")
        if problems:
            raise ValueError("; ".join(problems))

    def trainable_groups(self, p) -> tuple:
        names = set()
        for t in self.trainable:
            if t == "recurrent":
                names |= {"u", "v"} if p.rank1 else {"W"}
            else:
                names.add(t)
        have = set(p.groups())
        return tuple(g for g in GROUP_ORDER if g in names and g in have)


# ---------------------------------------------------------------------------
# gradients


def closed_loop_grad(p, env: EnvModel, x0, T: int, refs=None, beta: Optional[float] = None):
    """Batch-mean episode cost and its exact gradient for every parameter group."""
    if T < 1:
        raise TrainError("T must be >= 1")
    beta = env.beta if beta is None else beta
    r = ro.forward_closed(p, env, x0, T, refs)
    loss = ro.closed_loss(r, beta)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite closed-loop loss")
    return loss, ro.backward_closed(p, env, r, beta)


def closed_loop_loss(p, env: EnvModel, x0, T: int, refs=None, beta: Optional[float] = None) -> float:
    beta = env.beta if beta is None else beta
    try:
        return ro.closed_loss(ro.forward_closed(p, env, x0, T, refs), beta)
    except DivergenceError:
        return math.inf


def _teacher_targets(teacher, env, x0, T, refs, noise):
    """Inputs (T, B, d_in) and target outputs (T, B, d_out) for imitation."""
    if noise is not None:
        if callable(teacher) and not hasattr(teacher, "groups"):
            raise TrainError("white-noise imitation needs an RNN teacher")
        return noise, ro.forward_open(teacher, noise).out
    if env is None or x0 is None:
        raise TrainError("teacher-driven imitation needs env and x0")
    if hasattr(teacher, "groups"):
        r = ro.forward_closed(teacher, env, x0, T, refs)
        return r.ins, r.us[1:]
    _, us, ins = ro.forward_policy(env, teacher, x0, T, refs)
    return ins, us[1:]


def open_loop_grad(student, teacher, T: int, *, noise=None, env=None, x0=None, refs=None):
    """Imitation cost (1/T) sum |u_student - u_teacher|^2 and student gradients.

    ``noise`` (T, B, d_in) selects white-noise mode: both networks read the
    same i.i.d. inputs. Otherwise the teacher (RNN or state-feedback
    callable) drives ``env`` from ``x0`` and the student reads the resulting
    observations.
    """
    ins, targets = _teacher_targets(teacher, env, x0, T, refs, noise)
    if ins.shape[0] != T:
        raise TrainError(f"expected {T} input steps, got {ins.shape[0]}")
    if ins.shape[2] != student.d_in or targets.shape[2] != student.d_out:
        raise TrainError("teacher and student dimensions differ")
    r = ro.forward_open(student, ins)
    loss = ro.imitation_loss(r, targets)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite imitation loss")
    return loss, ro.backward_open(student, r, targets)


# ---------------------------------------------------------------------------
# updates


@dataclass
class OptState:
    step: int = 0
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)


def global_norm(grads: dict, names: Sequence[str]) -> float:
    return math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in names))


def apply_update(p, grads: dict, state: OptState, cfg: TrainConfig):
    names = cfg.trainable_groups(p)
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise TrainError(f"non-finite gradient in group {n}")
    norm = global_norm(grads, names)
    scale = 1.0
    if cfg.clip_norm is not None and norm > cfg.clip_norm:
        scale = cfg.clip_norm / norm
    params = p.groups()
    new = {}
    st = OptState(state.step + 1, dict(state.m1), dict(state.m2))
    if cfg.optimizer == "sgd":
        for n in names:
            new[n] = params[n] - cfg.lr * scale * grads[n]
    else:
        b1, b2 = cfg.adam_betas
        k = st.step
        for n in names:
            g = scale * grads[n]
            m1 = b1 * st.m1.get(n, 0.0) + (1 - b1) * g
            m2 = b2 * st.m2.get(n, 0.0) + (1 - b2) * g * g
            st.m1[n], st.m2[n] = m1, m2
            mhat = m1 / (1 - b1**k)
            vhat = m2 / (1 - b2**k)
            new[n] = params[n] - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return p.with_groups(**new), st


# ---------------------------------------------------------------------------
# tasks


class ClosedLoopTask:
    """The agent controls ``env``; optional reference model for tracking."""

    loop = "closed"

    def __init__(self, env: EnvModel, ref=None, beta: Optional[float] = None):
        self.env = env
        self.ref = ref
        self.beta = env.beta if beta is None else beta

    def sample(self, rng, batch: int, T: int) -> dict:
        x0 = sample_x0(self.env, batch, rng)
        refs = None
        if self.ref is not None:
            refs = reference_positions(self.ref, sample_phases(batch, rng), T + 1)
        return {"x0": x0, "refs": refs}

    def loss_and_grad(self, p, b: dict, T: int):
        return closed_loop_grad(p, self.env, b["x0"], T, b["refs"], self.beta)

    def evaluate(self, p, b: dict, T: int) -> float:
        return closed_loop_loss(p, self.env, b["x0"], T, b["refs"], self.beta)


class OpenLoopTask(ClosedLoopTask):
    """Student imitates ``teacher``; evaluation drops the student into the loop."""

    loop = "open"

    def __init__(self, env: EnvModel, teacher, mode: str = "white_noise", ref=None,
                 beta: Optional[float] = None):
        super().__init__(env, ref, beta)
        if mode not in ("white_noise", "teacher_driven"):
            raise TrainError(f"unknown open-loop mode {mode!r}")
        if mode == "white_noise" and not hasattr(teacher, "groups"):
            raise TrainError("white-noise imitation needs an RNN teacher")
        self.teacher = teacher
        self.mode = mode

    def sample(self, rng, batch: int, T: int) -> dict:
        b = super().sample(rng, batch, T)
        if self.mode == "white_noise":
            b["noise"] = rng.standard_normal((T, batch, self.teacher.d_in))
        return b

    def loss_and_grad(self, p, b: dict, T: int):
        if self.mode == "white_noise":
            return open_loop_grad(p, self.teacher, T, noise=b["noise"])
        return open_loop_grad(p, self.teacher, T, env=self.env, x0=b["x0"], refs=b["refs"])


# ---------------------------------------------------------------------------
# training record

BASE_COLUMNS = ["epoch", "train_loss", "test_loss", "grad_norm",
                "grad_norm_W", "grad_norm_u", "grad_norm_v", "grad_norm_m", "grad_norm_z"]


@dataclass
class TrainRecord:
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=lambda: list(BASE_COLUMNS))
    meta: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    final: Optional[object] = None

    def add_columns(self, names: Sequence[str]) -> None:
        for n in names:
            if n not in self.columns:
                self.columns.append(n)

    def column(self, name: str, fill=np.nan) -> np.ndarray:
        return np.array([fill if r.get(name) is None else r[name] for r in self.rows], dtype=float)

    def column_raw(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    @property
    def epochs(self) -> np.ndarray:
        return np.array([r["epoch"] for r in self.rows], dtype=int)

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows, "meta": self.meta},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainRecord":
        d = json.loads(text)
        return cls(rows=d["rows"], columns=d["columns"], meta=d.get("meta", {}))


def train(task, p0, cfg: TrainConfig, probes: Sequence[Callable] = (),
          checkpoint_epochs: Sequence[int] = (), callback: Optional[Callable] = None) -> TrainRecord:
    """Run ``cfg.epochs`` updates and log one row per parameter value.

    Row ``e`` describes the parameters after ``e`` updates: the batch loss
    and gradient norms measured on them, plus (every ``probe_stride`` epochs
    and at the end) the fixed-batch test loss and every probe's fields.
    Randomness comes from ``cfg.seed`` via independent train/test streams.
    """
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    test_batch = task.sample(test_rng, cfg.test_batch, cfg.T)
    rec = TrainRecord(meta={"config": _jsonable(asdict(cfg)), "loop": task.loop})
    for pr in probes:
        rec.add_columns(getattr(pr, "columns", ()))
    names = cfg.trainable_groups(p0)
    state = OptState()
    p = p0
    keep = set(checkpoint_epochs)
    for epoch in range(cfg.epochs + 1):
        try:
            b = task.sample(train_rng, cfg.batch, cfg.T)
            loss, grads = task.loss_and_grad(p, b, cfg.T)
        except (DivergenceError, TrainError) as exc:
            raise TrainError(f"epoch {epoch}: {exc}") from exc
        row = {"epoch": epoch, "train_loss": loss,
               "grad_norm": global_norm(grads, names)}
        for g in GROUP_ORDER:
            row[f"grad_norm_{g}"] = float(np.linalg.norm(grads[g])) if g in grads else None
        if epoch % cfg.probe_stride == 0 or epoch == cfg.epochs:
            row["test_loss"] = task.evaluate(p, test_batch, cfg.T)
            for pr in probes:
                row.update(pr(p))
        rec.rows.append(row)
        if epoch in keep:
            rec.checkpoints[epoch] = p
        if callback is not None:
            callback(epoch, p, row)
        if epoch == cfg.epochs:
            break
        try:
            p, state = apply_update(p, grads, state, cfg)
        except TrainError as exc:
            raise TrainError(f"epoch {epoch}: {exc}") from exc
    rec.final = p
    return rec


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d
