"""Discrete noise schedules for the forward diffusion process.

Time is 1-based: ``t = 1..T`` indexes noisy states and ``t = 0`` is clean data.
Arrays are stored 0-based, so ``beta[t - 1]`` is the variance of step ``t``.
Use the accessor methods to avoid off-by-one mistakes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step variances ``beta``, ``alpha = 1 - beta`` and ``alpha_bar = cumprod(alpha)``."""

    beta: np.ndarray
    kind: str = "linear"
    beta_start: float | None = None
    beta_end: float | None = None
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ValidationError("beta must be a non-empty 1-D sequence")
        if not np.all((beta > 0.0) & (beta < 1.0)):
            raise ValidationError("every beta must lie in the open interval (0, 1)")
        alpha = 1.0 - beta
        # explicit running product so alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
        alpha_bar = np.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha):
            acc = acc * a
            alpha_bar[i] = acc
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValidationError(f"time step {t} outside [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal fraction; ``t = 0`` maps to 1 (clean data)."""
        t = self._check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_config(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "schedule_kind": self.kind,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        kind = cfg.get("schedule_kind", "linear")
        if kind != "linear":
            raise ValidationError(f"unsupported schedule kind {kind!r}")
        return linear_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta=beta, kind="linear", beta_start=float(beta_start), beta_end=float(beta_end))


def posterior_variance(s: NoiseSchedule, t: int) -> float:
    """Variance of q(x_{t-1} | x_t, x_0).

    (1 - abar_{t-1}) / (1 - abar_t) * beta_t for t >= 2; zero at t = 1 since the
    last denoising step adds no noise.
    """
    t = s._check_t(t)
    if t == 1:
        return 0.0
    ab_t = s.alpha_bar[t - 1]
    ab_prev = s.alpha_bar[t - 2]
    return float((1.0 - ab_prev) / (1.0 - ab_t) * s.beta[t - 1])
