"""Forward noising and DDPM/DDIM reverse steps over an abstract noise predictor.

All fields are plain numpy arrays. A noise predictor is any callable
``model(x_t, t, label) -> eps_hat`` that returns an array shaped like ``x_t``;
``label=None`` selects the unconditional (null-label) branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, ValidationError
from .schedule import NoiseSchedule, posterior_variance

NoisePredictor = Callable[[np.ndarray, int, Optional[object]], np.ndarray]

# |cos theta| above this is treated as parallel by slerp
_PARALLEL_COS = 1.0 - 1e-7


def _same_shape(*arrays: np.ndarray) -> None:
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValidationError(f"shape mismatch: {shape} vs {np.shape(a)}")


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings.

    ``step_sequence`` is a strictly increasing subset of ``1..T`` ending at ``T``;
    sampling walks it backwards. ``eta`` scales the DDIM noise (0 = deterministic,
    1 = DDPM variance).
    """

    step_sequence: tuple
    eta: float = 0.0
    guidance_weight: float = 0.0
    seed: int = 0
    clip_denoised: bool = False

    def validate(self, s: NoiseSchedule) -> None:
        steps = np.asarray(self.step_sequence)
        if steps.size == 0:
            raise ValidationError("step_sequence is empty")
        if steps.ndim != 1 or np.any(np.diff(steps) <= 0):
            raise ValidationError("step_sequence must be strictly increasing")
        if steps[0] < 1 or steps[-1] != s.T:
            raise ValidationError(f"step_sequence must lie in 1..{s.T} and end at {s.T}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_weight < 0:
            raise ValidationError("guidance_weight must be >= 0")

    @classmethod
    def from_steps(cls, s: NoiseSchedule, n_steps: int, spacing: str = "quadratic", **kw) -> "SamplerConfig":
        return cls(step_sequence=make_step_sequence(s.T, n_steps, spacing), **kw)


SPACINGS = ("quadratic", "uniform")


def make_step_sequence(T: int, n_steps: int, spacing: str = "quadratic") -> tuple:
    """Sub-sequence of ``1..T`` with at most ``n_steps`` entries, ending at T.

    ``uniform`` spaces the steps evenly; ``quadratic`` places step k at
    1 + (T - 1)(k / n)^2, which spends more steps at low noise where a narrow
    data distribution needs them (few-step DDIM otherwise under-disperses).
    """
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    n_steps = min(int(n_steps), int(T))
    u = np.arange(1, n_steps + 1) / n_steps
    if spacing == "uniform":
        steps = np.round(u * T)
    elif spacing == "quadratic":
        steps = np.round(1 + (T - 1) * u ** 2)
    else:
        raise ValidationError(f"unknown step spacing {spacing!r}; choose from {SPACINGS}")
    steps = np.unique(np.clip(steps.astype(int), 1, T))
    return tuple(int(v) for v in steps)


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Draw from q(x_t | x_0) given the noise: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps)
    ab = s.alpha_bar_at(s._check_t(t))
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t: np.ndarray, eps_pred: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    ab = s.alpha_bar_at(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddpm_mean(x_t: np.ndarray, eps_pred: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    a = s.alpha_at(t)
    ab = s.alpha_bar_at(t)
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def ddpm_step(x_t, eps_pred, t: int, noise, s: NoiseSchedule) -> np.ndarray:
    """Ancestral DDPM update using the fixed posterior variance.

    ``noise`` is ignored (and may be None) at t = 1.
    """
    _same_shape(x_t, eps_pred)
    t = s._check_t(t)
    mean = ddpm_mean(np.asarray(x_t), np.asarray(eps_pred), t, s)
    if t == 1:
        return mean
    _same_shape(x_t, noise)
    return mean + np.sqrt(posterior_variance(s, t)) * np.asarray(noise)


def ddim_sigma(s: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """Noise scale of a DDIM jump t -> t_prev (zero at eta = 0 or t_prev = 0)."""
    ab_t = s.alpha_bar_at(t)
    ab_prev = s.alpha_bar_at(t_prev)
    var = eta ** 2 * (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    return float(np.sqrt(max(var, 0.0)))


def ddim_coefficients(s: NoiseSchedule, t: int, t_prev: int, eta: float):
    """Return (c_x0, c_eps, sigma) such that x_prev = c_x0 * x0_hat + c_eps * eps + sigma * noise."""
    t = s._check_t(t)
    t_prev = s._check_t(t_prev, lo=0)
    if t_prev >= t:
        raise ValidationError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ValidationError(f"eta must be in [0, 1], got {eta}")
    ab_prev = s.alpha_bar_at(t_prev)
    sigma = ddim_sigma(s, t, t_prev, eta)
    dir_var = 1.0 - ab_prev - sigma ** 2
    if dir_var < -1e-12:
        raise ValidationError(f"invalid eta/step combination: 1 - abar_prev - sigma^2 = {dir_var:.3e}")
    return float(np.sqrt(ab_prev)), float(np.sqrt(max(dir_var, 0.0))), sigma


def ddim_step(x_t, eps_pred, t: int, t_prev: int, eta: float, noise, s: NoiseSchedule,
              clip_denoised: bool = False) -> np.ndarray:
    """Generalised DDIM update from step ``t`` to ``t_prev`` (``t_prev = 0`` yields x0_hat)."""
    _same_shape(x_t, eps_pred)
    c_x0, c_eps, sigma = ddim_coefficients(s, t, t_prev, eta)
    eps_pred = np.asarray(eps_pred)
    x0_hat = predict_x0(np.asarray(x_t), eps_pred, t, s)
    if clip_denoised:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        # keep the direction term consistent with the clipped estimate
        ab = s.alpha_bar_at(t)
        eps_pred = (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    out = c_x0 * x0_hat + c_eps * eps_pred
    if sigma > 0.0:
        _same_shape(x_t, noise)
        out = out + sigma * np.asarray(noise)
    return out


def guided_eps(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance: (1 + w) eps_cond - w eps_uncond.

    Evaluated as eps_cond + w (eps_cond - eps_uncond) so equal inputs give eps_cond exactly.
    """
    _same_shape(eps_cond, eps_uncond)
    if w < 0:
        raise ValidationError("guidance weight must be >= 0")
    if w == 0:
        return np.asarray(eps_cond)
    eps_cond = np.asarray(eps_cond)
    return eps_cond + w * (eps_cond - np.asarray(eps_uncond))


def slerp(z0: np.ndarray, z1: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation between two latents.

    Falls back to linear interpolation when the inputs are (anti)parallel.
    """
    _same_shape(z0, z1)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n0 = np.linalg.norm(z0)
    n1 = np.linalg.norm(z1)
    if n0 == 0.0 or n1 == 0.0:
        raise ValidationError("slerp endpoints must have nonzero norm")
    cos = float(np.vdot(z0, z1)) / (n0 * n1)
    if abs(cos) > _PARALLEL_COS:
        return (1.0 - alpha) * z0 + alpha * z1
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    sin_theta = np.sin(theta)
    return np.sin((1.0 - alpha) * theta) / sin_theta * z0 + np.sin(alpha * theta) / sin_theta * z1


def draw_latent(seed: int, shape: Sequence[int]) -> np.ndarray:
    """The x_T that ``sample_loop`` starts from for a given seed."""
    return np.random.default_rng(seed).standard_normal(tuple(shape))


def _predict(model: NoisePredictor, x: np.ndarray, t: int, cond, w: float) -> np.ndarray:
    if cond is None:
        eps = model(x, t, None)
    elif w > 0:
        eps = guided_eps(model(x, t, cond), model(x, t, None), w)
    else:
        eps = model(x, t, cond)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise ValidationError(f"model returned shape {eps.shape} for input {x.shape}")
    return eps


def denoise(model: NoisePredictor, x_T: np.ndarray, cfg: SamplerConfig, s: NoiseSchedule,
            cond=None, rng: np.random.Generator | None = None, clamp: bool = True) -> np.ndarray:
    """Run the reverse chain from a given latent ``x_T``.

    ``rng`` supplies per-step noise when ``eta > 0``; it is never touched at eta = 0.
    """
    cfg.validate(s)
    steps = list(cfg.step_sequence)
    x = np.array(x_T, dtype=np.float64)
    full_ddpm = cfg.eta == 1.0 and len(steps) == s.T
    if cfg.eta > 0 and rng is None:
        raise ValidationError("stochastic sampling (eta > 0) needs an rng")
    for i in range(len(steps) - 1, -1, -1):
        t = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        eps = _predict(model, x, t, cond, cfg.guidance_weight)
        if full_ddpm and not cfg.clip_denoised:
            noise = rng.standard_normal(x.shape) if t >= 2 else None
            x = ddpm_step(x, eps, t, noise, s)
        else:
            noise = rng.standard_normal(x.shape) if (cfg.eta > 0 and t_prev >= 1) else None
            x = ddim_step(x, eps, t, t_prev, cfg.eta, noise, s, clip_denoised=cfg.clip_denoised)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample at t={t}")
    return np.clip(x, -1.0, 1.0) if clamp else x


def sample_loop(model: NoisePredictor, cfg: SamplerConfig, cond, shape: Sequence[int],
                s: NoiseSchedule, clamp: bool = True) -> np.ndarray:
    """Draw x_T ~ N(0, I) from ``cfg.seed`` and denoise it down the step sequence.

    ``shape`` is the full array shape handed to the model, including any batch axis.
    """
    cfg.validate(s)
    rng = np.random.default_rng(cfg.seed)
    x_T = rng.standard_normal(tuple(shape))
    return denoise(model, x_T, cfg, s, cond=cond, rng=rng, clamp=clamp)


def ddpm_sample_loop(model: NoisePredictor, seed: int, shape: Sequence[int], s: NoiseSchedule,
                     cond=None, guidance_weight: float = 0.0, clamp: bool = True) -> np.ndarray:
    """Plain ancestral sampler over every step T..1 (reference path)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(tuple(shape))
    for t in range(s.T, 0, -1):
        eps = _predict(model, x, t, cond, guidance_weight)
        noise = rng.standard_normal(x.shape) if t >= 2 else None
        x = ddpm_step(x, eps, t, noise, s)
    return np.clip(x, -1.0, 1.0) if clamp else x


def to_phase(x: np.ndarray) -> np.ndarray:
    """Binarize samples encoded as -1 (matrix) / +1 (phase of interest)."""
    return (np.asarray(x) > 0.0).astype(np.uint8)


def from_phase(phase: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(phase) > 0, 1.0, -1.0)
