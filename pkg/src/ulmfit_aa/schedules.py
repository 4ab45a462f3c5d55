"""Learning-rate machinery: range test, STLR, SGDR, sliced rates and unfreezing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergenceError

GROUPS = ("embedding", "lstm1", "lstm2", "lstm3", "head")
STAGES = ("finetune", "classify")


@dataclass
class LrCurve:
    lrs: list[float]
    smoothed_losses: list[float]
    suggestion: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.lrs, self.smoothed_losses))

    def to_csv(self) -> str:
        rows = ["lr,smoothed_loss"] + [f"{lr!r},{loss!r}" for lr, loss in self.points]
        return "\n".join(rows) + f"\nsuggested_lr,{self.suggestion!r}\n"


def lr_grid(lr_start: float, lr_end: float, steps: int) -> np.ndarray:
    i = np.arange(steps)
    grid = lr_start * (lr_end / lr_start) ** (i / (steps - 1))
    grid[-1] = lr_end
    return grid


def suggest_lr(lrs, smoothed) -> float:
    """Rate at the steepest descent of the smoothed loss against log10(lr)."""
    if len(lrs) < 2:
        return float(lrs[0])
    slopes = np.gradient(np.asarray(smoothed), np.log10(lrs))
    k = int(np.argmin(slopes))
    return float(lrs[k]) if slopes[k] < 0 else float(lrs[0])


def lr_find(train_step: Callable[[float], float], lr_start: float = 1e-7, lr_end: float = 10.0,
            steps: int = 100, smoothing: float = 0.98, divergence_factor: float = 4.0,
            save_state: Callable[[], object] | None = None,
            restore_state: Callable[[object], None] | None = None) -> LrCurve:
    """Exponential learning-rate range test.

    ``train_step(lr)`` runs one optimisation step and returns its loss. When
    ``save_state``/``restore_state`` are given the model and optimiser are
    put back exactly as they were before the sweep.
    """
    if steps < 2 or not 0 < lr_start < lr_end:
        raise ValueError("lr_find needs steps >= 2 and 0 < lr_start < lr_end")
    snapshot = save_state() if save_state else None
    lrs, smoothed = [], []
    avg, best = 0.0, math.inf
    try:
        for i, lr in enumerate(lr_grid(lr_start, lr_end, steps)):
            loss = float(train_step(float(lr)))
            if not math.isfinite(loss):
                if i == 0:
                    raise DivergenceError(f"lr_find: non-finite loss at the first step (lr={lr})")
                break
            avg = smoothing * avg + (1.0 - smoothing) * loss
            s = avg / (1.0 - smoothing ** (i + 1))
            lrs.append(float(lr))
            smoothed.append(s)
            best = min(best, s)
            if s > divergence_factor * best:
                break
    finally:
        if restore_state:
            restore_state(snapshot)
    return LrCurve(lrs, smoothed, suggest_lr(lrs, smoothed))


def stlr(t: int, T: int, lr_max: float, cut_frac: float = 0.1, ratio: float = 32.0) -> float:
    """Slanted triangular rate: short linear warm-up to ``lr_max``, long linear decay."""
    if T <= 0:
        raise ValueError("stlr: total steps T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"stlr: step {t} outside [0, {T}]")
    return lr_max * (1.0 + stlr_fraction(t, T, cut_frac) * (ratio - 1.0)) / ratio


def stlr_fraction(t: int, T: int, cut_frac: float = 0.1) -> float:
    cut = math.floor(T * cut_frac)
    return t / cut if t < cut else 1.0 - (t - cut) / (T - cut)


def sgdr(t: float, T: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` to ``lr_min`` over one epoch of ``T`` steps."""
    if T <= 0:
        raise ValueError("sgdr: steps per epoch T must be positive")
    if not 0 <= t <= T:
        raise ValueError(f"sgdr: step {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


def sgdr_fraction(t: float, T: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * t / T))


def cyclic_momentum(lr_fraction: float, moms: tuple[float, float] = (0.8, 0.7)) -> float:
    """Adam beta1 moving opposite to the rate: ``moms[0]`` at the cycle's lowest rate, ``moms[1]`` at its peak."""
    return moms[0] + (moms[1] - moms[0]) * lr_fraction


def discriminative_lrs(lr_high: float, n_groups: int = 5, divisor: float = 2.6 ** 4) -> list[float]:
    """Geometric per-group rates from ``lr_high / divisor`` (first group) to ``lr_high`` (last)."""
    if lr_high <= 0 or n_groups < 2:
        raise ValueError("discriminative_lrs needs lr_high > 0 and n_groups >= 2")
    lr_low = lr_high / divisor
    lrs = [lr_low * (lr_high / lr_low) ** (g / (n_groups - 1)) for g in range(n_groups)]
    lrs[0], lrs[-1] = lr_low, lr_high
    return lrs


@dataclass(frozen=True)
class LayerGroups:
    names: tuple[str, ...]
    frozen: tuple[bool, ...]

    @property
    def trainable(self) -> frozenset[str]:
        return frozenset(n for n, f in zip(self.names, self.frozen) if not f)


def unfreeze_plan(stage: str, step_index: int, groups=GROUPS) -> LayerGroups:
    """Groups trainable after ``step_index`` gradual-unfreezing steps.

    Step 0 trains only the last group; each step releases the next one
    towards the input. Steps past the end return the fully unfrozen plan.
    """
    if stage not in STAGES:
        raise ValueError(f"unfreeze_plan: unknown stage {stage!r}")
    if step_index < 0:
        raise ValueError("unfreeze_plan: step_index must be >= 0")
    groups = tuple(groups)
    n_open = min(step_index + 1, len(groups))
    frozen = tuple(i < len(groups) - n_open for i in range(len(groups)))
    return LayerGroups(groups, frozen)
