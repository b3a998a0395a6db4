"""Noise schedule, forward noising, and the DDIM reverse step.

The sampler steps x_t to x_{t_prev} through the predicted clean image:

    x_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma_t^2) * eps + sigma_t * z
    x0_hat = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)

with sigma_t = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev).
All alpha values are cumulative products (abar), indexed 0..T with abar_0 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients abar_t for t = 0..T (abar_0 = 1)."""

    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DomainError("INVALID_RANGE", f"t={t} outside schedule 0..{self.T}")
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    eta: float = 0.0
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise DomainError("INVALID_RANGE", "num_steps must be >= 1")
        if self.eta < 0:
            raise DomainError("INVALID_RANGE", "eta must be >= 0")


@dataclass
class DiffusionState:
    """The evolving noisy image and its timestep index."""

    x: np.ndarray
    t: int


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear-beta schedule; abar_t = prod_{s<=t} (1 - beta_s)."""
    if T < 1:
        raise DomainError("INVALID_RANGE", f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(
            "INVALID_RANGE",
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})",
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar=abar)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DomainError("SHAPE_MISMATCH", f"x0 {x0.shape} vs eps {eps.shape}")
    if not 0 <= t <= sched.T:
        raise DomainError("INVALID_RANGE", f"t={t} outside schedule 0..{sched.T}")
    a = sched.abar(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def predict_x0(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert add_noise given the noise estimate."""
    a = sched.abar(t)
    if a <= 0:
        raise DomainError("INVALID_RANGE", f"abar_t must be > 0 at t={t}")
    return (np.asarray(x_t) - np.sqrt(1.0 - a) * np.asarray(eps)) / np.sqrt(a)


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    a_t = sched.abar(t)
    a_p = sched.abar(t_prev)
    if a_t >= 1.0:
        return 0.0
    return eta * np.sqrt((1.0 - a_p) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_p)


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
              cfg: SamplerConfig, sched: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step t -> t_prev (t_prev < t)."""
    if t_prev >= t:
        raise DomainError("INVALID_RANGE", f"t_prev={t_prev} must be < t={t}")
    if (cfg.eta > 0) != (noise is not None):
        raise DomainError("INVALID_RANGE", "noise must be supplied iff eta > 0")
    a_p = sched.abar(t_prev)
    sigma = ddim_sigma(t, t_prev, cfg.eta, sched)
    rad = 1.0 - a_p - sigma * sigma
    if rad < 0:
        raise DomainError("NEGATIVE_RADICAND", f"sigma_t^2={sigma**2:.3g} exceeds 1-abar_prev={1-a_p:.3g}")
    x0 = predict_x0(x_t, eps, t, sched)
    out = np.sqrt(a_p) * x0 + np.sqrt(rad) * np.asarray(eps)
    if sigma > 0:
        out = out + sigma * np.asarray(noise)
    return out


def ddim_timesteps(sched: NoiseSchedule, num_steps: int) -> list[tuple[int, int]]:
    """Evenly spaced, endpoint-inclusive (t, t_prev) pairs from T down to 0."""
    if not 1 <= num_steps <= sched.T:
        raise DomainError("INVALID_RANGE", f"num_steps must be in 1..{sched.T}")
    ts = np.unique(np.round(np.linspace(sched.T, 1, num_steps)).astype(int))[::-1]
    seq = list(ts) + [0]
    return [(int(seq[i]), int(seq[i + 1])) for i in range(len(seq) - 1)]
