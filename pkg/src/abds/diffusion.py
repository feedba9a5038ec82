"""Noise schedules and the forward / reverse diffusion step primitives.

Timestep convention: ``t = 0`` is the noiseless sample and ``t = T`` the
terminal near-Gaussian state, so ``alpha_bar`` has ``T + 1`` entries with
``alpha_bar[0] = 1``. All steps are pure given explicit noise inputs; the
caller owns the random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their cumulative products.

    ``beta[i]`` is the variance of step ``t = i + 1``; ``posterior_var[i]``
    is the forward-posterior variance of the same step,
    ``beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)``.
    ``terminal_warning`` is set when ``alpha_bar[T]`` stays above the
    terminal threshold, i.e. the chain does not quite reach white noise.
    """

    kind: str
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    terminal_threshold: float
    terminal_warning: bool

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def beta_t(self, t: int) -> float:
        return float(self.beta[t - 1])

    def post_var(self, t: int) -> float:
        return float(self.posterior_var[t - 1])


def make_schedule(
    kind: str = "linear",
    T: int = 200,
    beta_min: float = 1e-4,
    beta_max: float = 0.05,
    terminal_threshold: float = 1e-5,
) -> NoiseSchedule:
    """Build a noise schedule of the given kind.

    ``linear`` interpolates the per-step variance evenly from ``beta_min``
    to ``beta_max``; ``cosine`` derives the variances from the standard
    squared-cosine signal curve clipped into ``[beta_min, beta_max]``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    posterior_var = beta * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    warning = bool(alpha_bar[T] > terminal_threshold)
    return NoiseSchedule(
        kind=kind,
        T=T,
        beta=beta,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        terminal_threshold=terminal_threshold,
        terminal_warning=warning,
    )


def _pair(x, other, what):
    a = as_tensor(x).data
    b = as_tensor(other).data
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    """Jump the clean sample straight to noise level ``t``."""
    a, e = _pair(x0, eps, "forward_diffuse")
    ab = sched.abar(t)
    return Tensor(math.sqrt(ab) * a + math.sqrt(1.0 - ab) * e)


def estimate_x0(x_t, t: int, eps_pred, sched: NoiseSchedule) -> Tensor:
    """Invert the forward jump using a noise estimate: the clean-sample mean."""
    x, e = _pair(x_t, eps_pred, "estimate_x0")
    ab = sched.abar(t)
    if ab <= 0.0:
        raise ValueError("estimate_x0 undefined at alpha_bar = 0")
    return Tensor((x - math.sqrt(1.0 - ab) * e) / math.sqrt(ab))


def reverse_mean(x_next, t_next: int, eps_pred, sched: NoiseSchedule) -> np.ndarray:
    x, e = _pair(x_next, eps_pred, "reverse_mean")
    beta = sched.beta_t(t_next)
    ab = sched.abar(t_next)
    return (x - (beta / math.sqrt(1.0 - ab)) * e) / math.sqrt(1.0 - beta)


def ddpm_reverse_step(
    x_next, t_next: int, eps_pred, sched: NoiseSchedule, noise
) -> Tensor:
    """One ancestral reverse step from ``t_next`` to ``t_next - 1``.

    The final step (``t_next == 1``) is deterministic: the noise term is
    suppressed so the chain ends on the predicted mean.
    """
    if not 1 <= t_next <= sched.T:
        raise ValueError(f"t_next {t_next} outside [1, {sched.T}]")
    mean = reverse_mean(x_next, t_next, eps_pred, sched)
    _, z = _pair(x_next, noise, "ddpm_reverse_step noise")
    if t_next == 1:
        return Tensor(mean)
    return Tensor(mean + math.sqrt(sched.post_var(t_next)) * z)


def ddim_step(
    x_next, t_next: int, t_target: int, eps_pred, sched: NoiseSchedule
) -> Tensor:
    """Deterministic transition from ``t_next`` down to ``t_target``."""
    if not 0 <= t_target < t_next <= sched.T:
        raise ValueError(f"need 0 <= t_target < t_next <= T, got {t_target}, {t_next}")
    x0_hat = estimate_x0(x_next, t_next, eps_pred, sched).data
    _, e = _pair(x_next, eps_pred, "ddim_step")
    ab = sched.abar(t_target)
    return Tensor(math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * e)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending timestep grid T = tau_0 > ... > tau_steps = 0."""
    if not 1 <= steps <= T:
        raise ValueError("steps must be in [1, T]")
    taus = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return taus[::-1]
