"""Four-stage segmentation of a pre-training loss curve.

A masked-LM loss curve typically drops fast (starting), stalls near the
bag-of-words level (plateau), drops again once word order is exploited
(diving), then flattens (convergence). Boundaries are found from the slope
of a smoothed curve against two thresholds.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

DEFAULT_WINDOW = 50
DEFAULT_PLATEAU_FRACTION = 0.02
DEFAULT_DIVE_FRACTION = 0.10


@dataclass(frozen=True)
class StageReport:
    starting_end: int
    plateau_end: int
    diving_end: int
    last_step: int
    stage_slopes: tuple = ()  # mean smoothed slope per stage (loss per step)
    theta_plateau: float = 0.0
    theta_dive: float = 0.0

    def __post_init__(self):
        if not 0 <= self.starting_end <= self.plateau_end <= self.diving_end <= self.last_step:
            raise ValueError(f"stage boundaries out of order: {self}")

    @property
    def plateau_length(self) -> int:
        return self.plateau_end - self.starting_end

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["starting_end", "plateau_end", "diving_end", "plateau_length"])
        w.writerow([self.starting_end, self.plateau_end, self.diving_end, self.plateau_length])
        return buf.getvalue()

    def write_csv(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def moving_average(values: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average; near the ends the window shrinks to what exists."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    half = width // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + (width - half), n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def detect_stages(steps: Sequence[int], losses: Sequence[float], window: int = DEFAULT_WINDOW,
                  theta_plateau: Optional[float] = None, theta_dive: Optional[float] = None,
                  plateau_fraction: float = DEFAULT_PLATEAU_FRACTION,
                  dive_fraction: float = DEFAULT_DIVE_FRACTION) -> StageReport:
    """Segment a loss curve into starting / plateau / diving / convergence.

    ``window`` counts logged entries. Thresholds are loss drops per step; when
    omitted they default to ``fraction * (total smoothed drop) / 1000``.
    Boundaries are reported as step values; a boundary that is never reached
    is clamped to the last logged step.
    """
    steps = np.asarray(steps, dtype=np.int64)
    losses = np.asarray(losses, dtype=np.float64)
    if steps.shape != losses.shape or steps.ndim != 1:
        raise ValueError("steps and losses must be 1-D and the same length")
    if window < 1:
        raise ValueError("window must be positive")
    n = steps.size
    if n < 2 * window:
        raise ValueError(f"loss log has {n} entries; need at least {2 * window} for window {window}")
    if np.any(np.diff(steps) <= 0):
        raise ValueError("steps must be strictly increasing")
    smooth = moving_average(losses, window)
    drop = max(float(smooth[0] - smooth[-1]), 0.0)
    if theta_plateau is None:
        theta_plateau = plateau_fraction * drop / 1000.0
    if theta_dive is None:
        theta_dive = dive_fraction * drop / 1000.0
    centers = np.arange(window, n - window)
    slope = (smooth[centers + window] - smooth[centers - window]) / (steps[centers + window] - steps[centers - window])

    def first(cond: np.ndarray, start: int) -> int:
        hits = np.nonzero(cond[start:])[0]
        return start + int(hits[0]) if hits.size else len(cond)

    i_start = first(slope > -theta_dive, 0)
    i_plateau = first(slope < -theta_dive, i_start)
    i_dive = first(slope > -theta_plateau, i_plateau)
    last = int(steps[-1])

    def to_step(i: int) -> int:
        return int(steps[centers[i]]) if i < len(centers) else last

    b = (to_step(i_start), to_step(i_plateau), to_step(i_dive))
    return StageReport(*b, last, _stage_slopes(steps, smooth, (int(steps[0]),) + b + (last,)),
                       float(theta_plateau), float(theta_dive))


def _stage_slopes(steps: np.ndarray, smooth: np.ndarray, edges: tuple) -> tuple:
    out = []
    pos = {int(s): i for i, s in enumerate(steps)}
    for a, b in zip(edges[:-1], edges[1:]):
        ia, ib = pos[a], pos[b]
        out.append(float((smooth[ib] - smooth[ia]) / (b - a)) if b > a else 0.0)
    return tuple(out)


def detect_stages_log(log, **kwargs) -> StageReport:
    return detect_stages(log.steps, log.losses, **kwargs)


def read_loss_csv(path: Union[str, os.PathLike]) -> tuple:
    steps, losses = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"step", "train_loss"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns step,train_loss")
        for row in reader:
            steps.append(int(row["step"]))
            losses.append(float(row["train_loss"]))
    return np.asarray(steps, dtype=np.int64), np.asarray(losses)


def four_stage_curve(n_steps: int = 12000, start_end: int = 1000, plateau_end: int = 8000,
                     dive_end: int = 10000, levels=(7.0, 4.0, 4.0, 1.0, 1.0)) -> tuple:
    """Piecewise-linear loss fixture with known stage boundaries.

    ``levels`` are the loss at step 0, at each boundary, and at the end.
    """
    knots = [0, start_end, plateau_end, dive_end, n_steps]
    steps = np.arange(1, n_steps + 1)
    return steps, np.interp(steps, knots, levels)
