"""Forward diffusion and reverse-step arithmetic shared by training and inference.

All coefficients are precomputed in float64. The per-timestep operations take
scalar coefficients from the schedule, so they work on numpy arrays and torch
tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

SUPPORTED_FAMILIES = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-timestep diffusion coefficients.

    betas[t] is the per-step corruption rate, alphas_cumprod[t] the running
    product of (1 - beta) up to and including t.
    """

    num_timesteps: int
    betas: np.ndarray
    alphas_cumprod: np.ndarray
    family: str = "linear"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.betas) != self.num_timesteps or len(self.alphas_cumprod) != self.num_timesteps:
            raise ValueError("betas and alphas_cumprod must have length num_timesteps")
        if not (np.all(self.betas > 0.0) and np.all(self.betas < 1.0)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alphas_cumprod) >= 0.0):
            raise ValueError("alphas_cumprod must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas_cumprod[t])

    def sqrt_alpha_bar(self, t: int) -> float:
        return math.sqrt(self.alpha_bar(t))

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar(t))

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.num_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.num_timesteps - 1}]")

    def spec(self) -> dict:
        """Serializable descriptor (family + parameters + T) for run configs."""
        return {"family": self.family, "num_timesteps": self.num_timesteps, **self.params}


@dataclass(frozen=True)
class NoisySample:
    """A corrupted mask x_t together with the noise realization that produced it."""

    x_t: Any
    t: int
    eps: Any


def build_schedule(T: int, family: str = "linear", **params) -> NoiseSchedule:
    """Construct a noise schedule of the given family over T timesteps.

    The linear family interpolates beta from beta_start to beta_end
    (defaults 1e-4 and 0.02).
    """
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got {T}")
    if family == "linear":
        beta_start = float(params.get("beta_start", 1e-4))
        beta_end = float(params.get("beta_end", 0.02))
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        used = {"beta_start": beta_start, "beta_end": beta_end}
    else:
        raise ValueError(f"unsupported schedule family {family!r}; supported: {SUPPORTED_FAMILIES}")
    alphas_cumprod = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        num_timesteps=T, betas=betas, alphas_cumprod=alphas_cumprod, family=family, params=used
    )


def schedule_from_spec(spec: dict) -> NoiseSchedule:
    """Rebuild a schedule from its serialized descriptor."""
    spec = dict(spec)
    family = spec.pop("family")
    T = spec.pop("num_timesteps")
    return build_schedule(T, family=family, **spec)


def add_noise(x0, t: int, eps, sched: NoiseSchedule) -> NoisySample:
    """Forward corruption x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a = sched.sqrt_alpha_bar(t)
    b = sched.sqrt_one_minus_alpha_bar(t)
    return NoisySample(x_t=a * x0 + b * eps, t=t, eps=eps)


def x0_from_eps(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Invert the forward corruption for a known noise estimate."""
    a = sched.sqrt_alpha_bar(t)
    if a == 0.0:
        raise ZeroDivisionError(f"alpha_bar at t={t} is numerically zero")
    return (x_t - sched.sqrt_one_minus_alpha_bar(t) * eps_hat) / a


def eps_from_x0(x_t, x0_hat, t: int, sched: NoiseSchedule):
    """Invert the forward corruption for a known mask estimate; dual of x0_from_eps."""
    b = sched.sqrt_one_minus_alpha_bar(t)
    if b == 0.0:
        raise ZeroDivisionError(f"1 - alpha_bar at t={t} is numerically zero")
    return (x_t - sched.sqrt_alpha_bar(t) * x0_hat) / b


def ddim_sigma(t: int, t_next: int, sched: NoiseSchedule, eta: float) -> float:
    """Posterior interpolation noise scale for a (possibly large) reverse jump."""
    a_t = sched.alpha_bar(t)
    a_next = sched.alpha_bar(t_next)
    return eta * math.sqrt((1.0 - a_next) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_next)


def ddim_step(x_t, x0_hat, eps_hat, t: int, t_next: int, sched: NoiseSchedule,
              eta: float = 0.0, rng: Optional[Any] = None):
    """One reverse jump t -> t_next from a consistent (x0_hat, eps_hat) pair.

    x_{t_next} = sqrt(abar_next) x0_hat + sqrt(1 - abar_next - sigma^2) eps_hat + sigma z.
    The caller picks which branch the pair comes from; eta > 0 draws fresh
    noise z from rng. The deterministic terminal jump (eta=0, t_next=0)
    returns x0_hat exactly; with eta > 0 the real abar_0 applies so the
    terminal jump still injects sigma z.
    """
    if t_next >= t:
        raise ValueError(f"t_next ({t_next}) must be strictly less than t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if eta == 0.0 and t_next == 0:
        return x0_hat
    a_next = sched.alpha_bar(t_next)
    sigma = ddim_sigma(t, t_next, sched, eta)
    dir_coef = math.sqrt(max(1.0 - a_next - sigma * sigma, 0.0))
    x_next = math.sqrt(a_next) * x0_hat + dir_coef * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires a randomness source")
        z = _randn_like(x_t, rng)
        x_next = x_next + sigma * z
    return x_next


def _randn_like(x, rng):
    """Standard normal draw shaped like x, from a numpy Generator or torch Generator."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(size=x.shape).astype(np.asarray(x).dtype, copy=False)
    import torch

    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
