"""Noise schedule, forward noising, classifier-free guidance, DDIM sampling.

The schedule is the linear-beta DDPM convention with T=1000 by default;
sampling is fully deterministic DDIM (eta = 0) over uniformly spaced
timesteps t_k = floor(k*T/num_steps), descending. Functions are dtype- and
backend-agnostic where possible: schedule coefficients are plain floats, so
q_sample works on numpy arrays and torch tensors alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, InputError


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha_bar tables indexed by timestep t in 1..T (arrays are 0-based:
    entry i corresponds to t = i+1). alpha_bar(0) is defined as 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0) or (T > 1 and beta_start >= beta_end):
        raise ConfigurationError(f"need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] <= 0.0:
        raise ConfigurationError("alpha_bar underflowed to zero; schedule too aggressive")
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(z0, t: int, eps, schedule: NoiseSchedule):
    """Forward noising: sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    if z0.shape != eps.shape:
        raise InputError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    if not (1 <= t <= schedule.num_steps):
        raise InputError(f"t={t} outside schedule range 1..{schedule.num_steps}")
    ab = schedule.alpha_bar_at(t)
    return float(np.sqrt(ab)) * z0 + float(np.sqrt(1.0 - ab)) * eps


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise InputError("guidance branches must have equal shapes")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigurationError("num_steps must be >= 1")
        if self.eta != 0.0:
            raise ConfigurationError("only deterministic sampling (eta = 0) is supported")


def ddim_timesteps(T: int, num_steps: int) -> list:
    """Uniformly spaced timesteps floor(k*T/num_steps), k = num_steps..1."""
    if num_steps > T:
        raise ConfigurationError(f"num_steps {num_steps} exceeds schedule length {T}")
    return [(k * T) // num_steps for k in range(num_steps, 0, -1)]


def seeded_noise(shape, seed) -> np.ndarray:
    """Standard normal draw from an isolated generator; `seed` may be an int
    or a sequence of ints (e.g. (run_seed, frame_index))."""
    return np.random.default_rng(seed).standard_normal(shape)


def ddim_sample(model, cond, schedule: NoiseSchedule, cfg: SamplerConfig, shape=None, z_init=None):
    """Deterministic DDIM from seeded Gaussian noise down to the clean latent.

    `model(z_t, cond, t)` must return a noise prediction of z_t's shape; when
    guidance_scale != 1 the model is also evaluated on cond.with_null_reference()
    and the two branches are combined. Callers that sample in torch pass their
    own `z_init` (drawn via seeded_noise); otherwise z_T is drawn here from
    cfg.seed.
    """
    steps = ddim_timesteps(schedule.num_steps, cfg.num_steps)
    if z_init is None:
        if shape is None:
            raise InputError("ddim_sample needs either z_init or a shape to draw z_T")
        z_init = seeded_noise(shape, cfg.seed)
    z = z_init
    uncond = None
    if cfg.guidance_scale != 1.0:
        uncond = cond.with_null_reference()
    for i, t in enumerate(steps):
        eps_hat = model(z, cond, t)
        if eps_hat.shape != z.shape:
            raise ContractError(
                f"model output shape {tuple(eps_hat.shape)} != latent shape {tuple(z.shape)}"
            )
        if uncond is not None:
            eps_hat = cfg_combine(eps_hat, model(z, uncond, t), cfg.guidance_scale)
        ab_t = schedule.alpha_bar_at(t)
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab_prev = schedule.alpha_bar_at(t_prev)
        x0_hat = (z - float(np.sqrt(1.0 - ab_t)) * eps_hat) / float(np.sqrt(ab_t))
        z = float(np.sqrt(ab_prev)) * x0_hat + float(np.sqrt(1.0 - ab_prev)) * eps_hat
    return z
