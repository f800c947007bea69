"""Scalar training objectives and schedules, with no training loop attached."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, StepOutOfRange


@dataclass(frozen=True)
class TrainingConfig:
    """Loss coefficients and the temperature schedule endpoints."""

    target_t: float = 0.5
    alpha: float = 10.0
    beta: float = 0.5
    kd_temperature: float = 4.0
    tau_start: float = 5.0
    tau_end: float = 0.1
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.target_t < 1.0:
            raise ValueError("target_t must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def flops_loss(f_dyn: float, f_stat: float, target_t: float) -> float:
    """Squared deviation of the dynamic/static ratio from the target."""
    if f_stat <= 0:
        raise ZeroDivisionError("f_stat must be positive")
    return (f_dyn / f_stat - target_t) ** 2


def bounds_loss(per_block_rates: Sequence[float], lower: float, upper: float) -> float:
    """Mean squared hinge on per-block rates against the [lower, upper] band."""
    if not 0.0 <= lower <= upper <= 1.0:
        raise ValueError("need 0 <= lower <= upper <= 1")
    rates = np.asarray(per_block_rates, dtype=float)
    if rates.size == 0:
        return 0.0
    low = np.maximum(0.0, lower - rates)
    high = np.maximum(0.0, rates - upper)
    return float(np.mean(low**2 + high**2))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - math.log(np.exp(z).sum())


def kd_loss(student_logits: Sequence[float], teacher_logits: Sequence[float],
            temperature: float) -> float:
    """T^2-scaled KL divergence between tempered student and teacher.

    Computed in log space from raw logits: T^2 * KL(p_s || p_t) with
    p = softmax(logits / T).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = np.asarray(student_logits, dtype=float)
    t = np.asarray(teacher_logits, dtype=float)
    if s.shape != t.shape or s.ndim != 1:
        raise LengthMismatch(f"logit vectors differ: {s.shape} vs {t.shape}")
    log_ps = _log_softmax(s / temperature)
    log_pt = _log_softmax(t / temperature)
    kl = float(np.sum(np.exp(log_ps) * (log_ps - log_pt)))
    return temperature**2 * max(kl, 0.0)


def total_loss(task: float, flops: float, bounds: float, kd: float,
               cfg: TrainingConfig) -> float:
    """task + alpha*(flops + bounds) + beta*kd  (kd already carries T^2)."""
    return task + cfg.alpha * (flops + bounds) + cfg.beta * kd


def tau_schedule(step: int, cfg: TrainingConfig) -> float:
    """Exponential decay from tau_start to tau_end over total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {cfg.total_steps}]")
    frac = step / cfg.total_steps
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac
