"""Stage boundaries of a closed-loop run and per-frequency acquisition times."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .probes import freq_columns


@dataclass
class StageReport:
    stage1_end: Optional[int] = None
    stage2_end: Optional[int] = None
    flags: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    @property
    def boundaries(self) -> tuple:
        return (self.stage1_end, self.stage2_end)

    @property
    def three_stage(self) -> bool:
        return self.stage1_end is not None and self.stage2_end is not None

    def to_dict(self) -> dict:
        return asdict(self)


def _probed(record, name: str):
    """(epochs, values) of rows where ``name`` was recorded."""
    ep, val = [], []
    for r in record.rows:
        v = r.get(name)
        if v is not None:
            ep.append(r["epoch"])
            val.append(v)
    return np.array(ep, dtype=int), np.array(val, dtype=float)


def window_average(epochs: np.ndarray, values: np.ndarray, e: int, window: int, side: str,
                   bound: Optional[int] = None) -> Optional[float]:
    """Mean over probes in ``[e, e + window)`` (``side="lead"``) or ``(e - window, e]``.

    ``bound`` clips the window so it stops short of (lead) or starts at
    (trail) that epoch.
    """
    if side == "lead":
        sel = (epochs >= e) & (epochs < e + window)
        if bound is not None:
            sel &= epochs < max(bound, e + 1)
    else:
        sel = (epochs > e - window) & (epochs <= e)
        if bound is not None:
            sel &= epochs >= min(bound, e)
    v = values[sel]
    return float(np.mean(v)) if len(v) and np.all(np.isfinite(v)) else None


def hinge_fit(epochs: np.ndarray, y: np.ndarray) -> tuple:
    """Continuous two-segment least-squares fit of ``y`` over ``epochs``.

    Returns ``(knee, slope_before, slope_after)`` for the interior probed
    epoch that minimises the squared error, or ``None`` with fewer than
    three points.
    """
    x = np.asarray(epochs, dtype=float)
    if len(x) < 3:
        return None
    best = None
    for b in x[1:-1]:
        X = np.column_stack([np.ones_like(x), np.minimum(x - b, 0.0), np.maximum(x - b, 0.0)])
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
        sse = float(np.sum((X @ coef - y) ** 2))
        if best is None or sse < best[0]:
            best = (sse, int(b), float(coef[1]), float(coef[2]))
    return best[1:]


def first_sustained_stable(epochs: np.ndarray, rho: np.ndarray, persist: int,
                           start: int = 0) -> Optional[int]:
    """First probed epoch >= ``start`` where rho turns < 1 and stays so for ``persist`` epochs.

    The crossing must be downward: some earlier probe has rho >= 1.
    """
    n = len(epochs)
    for i in range(n):
        if epochs[i] < start or not rho[i] < 1.0:
            continue
        if i == 0 or not rho[i - 1] >= 1.0:
            continue
        end = epochs[i] + persist - 1
        if epochs[-1] < end:
            return None
        window = (epochs >= epochs[i]) & (epochs <= end)
        if np.all(rho[window] < 1.0):
            return int(epochs[i])
    return None


def _value_at(epochs, values, e):
    if e is None:
        return None
    i = int(np.searchsorted(epochs, e))
    if i < len(epochs) and epochs[i] == e and np.isfinite(values[i]):
        return float(values[i])
    return None


def detect_stages(record, window: int = 20, knee_ratio: float = 10.0, persist: int = 10,
                  loss: str = "test_loss") -> StageReport:
    """Locate the end of Stage 1 (collapse of the loss) and of Stage 2 (stabilisation).

    Stage 2 ends at the first downward crossing of rho(P) below 1 that
    persists for ``persist`` epochs. Stage 1 ends at the knee of a
    two-segment fit of log ``loss`` over the probes up to that crossing,
    provided the first segment falls at least ``knee_ratio`` times faster
    than the second. Without such a knee the run starts past the collapse:
    Stage 1 is empty and ends at the first probe. A run whose coupled system
    is stable from the first probe has a single stage. Loss levels at the
    interior boundaries average the ``window`` epochs of Stage 2 next to
    them, which removes the period-2 oscillation of SGD; the first and last
    probe use the raw loss.
    """
    rep = StageReport(thresholds={"window": window, "knee_ratio": knee_ratio, "persist": persist,
                                  "loss": loss})
    ep_rho, rho = _probed(record, "rho")
    if len(ep_rho) == 0:
        rep.flags.append("no_spectrum")
        return rep
    ep, L = _probed(record, loss)
    if len(ep) == 0:
        rep.flags.append("no_loss")
        return rep
    if np.all(rho < 1.0):
        rep.flags.append("single_stage")
        rep.stages = [_summary(record, float(L[0]), float(L[-1]), ep_rho, rho, int(ep[0]),
                               int(ep[-1]))]
        return rep
    cross = first_sustained_stable(ep_rho, rho, persist)
    upto = ep <= cross if cross is not None else np.ones(len(ep), dtype=bool)
    s1 = None
    with np.errstate(divide="ignore"):
        logl = np.log(L[upto])
    fit = hinge_fit(ep[upto], logl) if np.all(np.isfinite(logl)) else None
    if fit is None:
        rep.flags.append("stage1_end_not_found")
    else:
        knee, before, after = fit
        if before < 0 and before <= knee_ratio * min(after, 0.0):
            s1 = knee
        else:
            s1 = int(ep[0])
            rep.flags.append("stage1_empty")
    s2 = first_sustained_stable(ep_rho, rho, persist, start=(s1 + 1) if s1 is not None else 0)
    if s2 is None:
        rep.flags.append("stage2_end_not_found")
    rep.stage1_end, rep.stage2_end = s1, s2
    level = {int(ep[0]): float(L[0]), int(ep[-1]): float(L[-1])}
    if s1 is not None and ep[0] < s1 < ep[-1]:
        level[s1] = window_average(ep, L, s1, window, "lead", s2)
    if s2 is not None and s2 < ep[-1]:
        level[s2] = window_average(ep, L, s2, window, "trail", s1)
    cuts = sorted(level)
    for a, b in zip(cuts[:-1], cuts[1:]):
        rep.stages.append(_summary(record, level[a], level[b], ep_rho, rho, a, b))
    return rep


def _summary(record, la, lb, ep_rho, rho, a, b) -> dict:
    drop = la / lb if la is not None and lb not in (None, 0.0) else None
    ep_zm, zm = _probed(record, "zm")
    return {"start": a, "end": b, "loss_start": la, "loss_end": lb, "drop_factor": drop,
            "zm_end": _value_at(ep_zm, zm, b), "rho_end": _value_at(ep_rho, rho, b)}


# ---------------------------------------------------------------------------
# tracking task


@dataclass
class Acquisition:
    times: list
    epochs: list
    never: list
    threshold: float
    baseline: list


def acquisition_times(record, threshold: float = 0.3, n: int = 4, baseline=None) -> Acquisition:
    """First epoch each component's loss is <= ``threshold`` times its baseline.

    ``baseline`` holds one reference loss per component (typically the loss
    of a silent agent); it defaults to each component's first probed value.
    Times are divided by the final epoch; components never acquired report
    1.0 and are listed in ``never``.
    """
    total = max(int(record.rows[-1]["epoch"]), 1) if record.rows else 1
    times, epochs, never, base = [], [], [], []
    for k, col in enumerate(freq_columns(n)):
        ep, v = _probed(record, col)
        ref = float(baseline[k]) if baseline is not None else (float(v[0]) if len(v) else None)
        base.append(ref)
        hit = None
        if len(v):
            below = np.nonzero(v <= threshold * ref)[0]
            if len(below):
                hit = int(ep[below[0]])
        if hit is None:
            never.append(k + 1)
            times.append(1.0)
        else:
            times.append(hit / total)
        epochs.append(hit)
    return Acquisition(times, epochs, never, threshold, base)


def crossover_windows(record, a: int = 1, b: int = 2, start: Optional[int] = None,
                      stop: Optional[int] = None) -> list:
    """Consecutive probe pairs in [start, stop] where loss(a) rises while loss(b) falls."""
    ep, la = _probed(record, f"freq_loss_{a}")
    _, lb = _probed(record, f"freq_loss_{b}")
    out = []
    for i in range(1, len(ep)):
        if start is not None and ep[i - 1] < start:
            continue
        if stop is not None and ep[i] > stop:
            break
        if la[i] > la[i - 1] and lb[i] < lb[i - 1]:
            out.append((int(ep[i - 1]), int(ep[i])))
    return out

