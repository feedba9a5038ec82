"""Similarity kernel, guidance-gradient strategies, and the guided sampler.

A strategy maps a state ``x`` at timestep ``t`` to a gradient that pulls the
reverse chain toward samples resembling a fixed reference ``x_input``:

* ``naive`` compares the noisy state to the clean reference directly.
* ``forward_match`` first shrinks the reference to the same noise level.
* ``reverse_match`` denoises the state with the score model and compares the
  denoised mean to the reference, pulling the gradient back through the
  model with a vector-Jacobian product.
* ``ideal_oracle`` evaluates the exact conditional-expectation gradient,
  available in closed form when the training distribution is a diagonal
  Gaussian mixture.

The ancestral sampler injects the gradient of the destination timestep,
evaluated at the reverse-step mean and scaled by the step variance ``beta_t``
(the exact 1-D Gaussian recursion pins this placement: alternatives bias the
conditional mean by several standard errors). The deterministic sampler
folds the gradient into the noise prediction instead, which is the update
consistent with the conditional probability flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    ddim_timesteps,
    estimate_x0,
    reverse_mean,
)
from .gmm import GmmDistribution, _posterior_parts, logsumexp


class SamplingError(RuntimeError):
    """Raised when a reverse trajectory leaves the finite range."""


STRATEGIES = ("none", "naive", "forward_match", "reverse_match", "ideal_oracle")


@dataclass(frozen=True)
class SimilarityKernel:
    """Gaussian similarity kernel exp(-lam * ||x - y||^2) with sharpness lam."""

    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError("kernel sharpness must be positive and finite")


@dataclass(frozen=True)
class GuidanceConfig:
    strategy: str
    kernel: SimilarityKernel
    strength: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass(frozen=True)
class EditResult:
    """A single edit: the reference, the synthesized sample, and run metadata."""

    input: Tensor
    edit: Tensor
    seed: int
    steps_used: int
    guidance_norms: np.ndarray

    def __post_init__(self):
        if self.input.shape != self.edit.shape:
            raise ValueError("input and edit must share a shape")
        if len(self.guidance_norms) != self.steps_used:
            raise ValueError("guidance trace length must equal steps used")


def _pair_rows(x, y):
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    yv = np.asarray(y, dtype=np.float64)
    if yv.shape != xb.shape[1:]:
        raise ValueError(f"shape mismatch: {np.asarray(x).shape} vs {yv.shape}")
    return xb, yv, np.asarray(x).ndim == 1


def rsim(x, y, k: SimilarityKernel):
    """Similarity in (0, 1]; exactly 1 when the points coincide."""
    xb, yv, single = _pair_rows(x, y)
    out = np.exp(-k.lam * np.sum((xb - yv) ** 2, axis=1))
    return float(out[0]) if single else out


def grad_log_rsim(x, y, k: SimilarityKernel):
    """Gradient of log-similarity with respect to ``x``: -2*lam*(x - y)."""
    xb, yv, single = _pair_rows(x, y)
    out = -2.0 * k.lam * (xb - yv)
    return out[0] if single else out


def guidance_naive(x_t, x_input, k: SimilarityKernel):
    """Mismatched-timesteps gradient: compares the noisy state to the clean input."""
    return grad_log_rsim(x_t, x_input, k)


def guidance_forward_match(x_t, x_input, t: int, sched: NoiseSchedule, k: SimilarityKernel):
    """Gradient against the reference transported to level ``t`` in expectation."""
    scaled = math.sqrt(sched.abar(t)) * np.asarray(x_input, dtype=np.float64)
    return grad_log_rsim(x_t, scaled, k)


def guidance_reverse_match(
    x_t, x_input, t: int, model, sched: NoiseSchedule, k: SimilarityKernel
):
    """Gradient through the model's denoised mean.

    The chain rule runs through ``estimate_x0``, so the result is
    ``J^T (-2*lam*(mu0 - x_input))`` with ``J`` the Jacobian of the denoised
    mean; the model supplies that product (exactly for mixture models, via a
    network VJP for learned ones).
    """
    if not hasattr(model, "vjp_mu0"):
        raise TypeError("model does not expose a vector-Jacobian product")
    xb, yv, single = _pair_rows(x_t, x_input)
    eps = model.predict_eps(xb, t, sched)
    mu0 = estimate_x0(xb, t, eps, sched).data
    cot = -2.0 * k.lam * (mu0 - yv)
    out = model.vjp_mu0(xb, t, sched, cot)
    return out[0] if single else out


def ideal_guidance_gmm(
    x_t, x_input, t: int, gmm: GmmDistribution, sched: NoiseSchedule, k: SimilarityKernel
):
    """Exact conditional-expectation gradient for a mixture training distribution.

    The clean-sample posterior is a mixture whose weights and means move
    with ``x_t``; convolving each component with the kernel gives a
    closed-form Gaussian evaluation, and the log of the weighted sum is
    differentiated analytically.
    """
    ab = sched.abar(t)
    if ab >= 1.0:
        return grad_log_rsim(x_t, x_input, k)
    xb, yv, single = _pair_rows(x_t, x_input)
    logr, mpost, vpost, dlogz = _posterior_parts(gmm, xb, ab)
    r = np.exp(logr)
    score = np.sum(r[:, :, None] * dlogz, axis=1)
    S = vpost + 1.0 / (2.0 * k.lam)  # (K, d)
    resid = yv[None, None, :] - mpost  # (n, K, d)
    logN = -0.5 * np.sum(resid**2 / S[None] + np.log(2 * np.pi * S)[None], axis=2)
    L = logr + logN
    pi = np.exp(L - logsumexp(L, axis=1)[:, None])
    jdiag = np.sqrt(ab) * vpost / (1.0 - ab)  # (K, d)
    per_comp = (dlogz - score[:, None, :]) + jdiag[None] * resid / S[None]
    out = np.sum(pi[:, :, None] * per_comp, axis=1)
    return out[0] if single else out


def _strategy_gradient(cfg: GuidanceConfig, model, x, t, sched, x_input):
    if cfg.strategy == "none":
        return np.zeros_like(x)
    if cfg.strategy == "naive":
        return guidance_naive(x, x_input, cfg.kernel)
    if cfg.strategy == "forward_match":
        return guidance_forward_match(x, x_input, t, sched, cfg.kernel)
    if cfg.strategy == "reverse_match":
        return guidance_reverse_match(x, x_input, t, model, sched, cfg.kernel)
    return ideal_guidance_gmm(x, x_input, t, model.gmm, sched, cfg.kernel)


def _clip_rows(g: np.ndarray, clip: float | None) -> np.ndarray:
    if clip is None:
        return g
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    factor = np.where(norms > clip, clip / np.maximum(norms, 1e-300), 1.0)
    return g * factor


def _check_finite(x: np.ndarray, t: int):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state at timestep {t}")


def _run_chain(model, sched, cfg, x_input, rng, sampler, ddim_steps, n):
    """Reverse diffusion for ``n`` independent chains; returns states and norms."""
    d = x_input.size
    x = rng.standard_normal((n, d))
    norms = []
    if sampler == "ddpm":
        for t in range(sched.T, 0, -1):
            eps = model.predict_eps(x, t, sched)
            mean = reverse_mean(x, t, eps, sched)
            g = _clip_rows(
                np.atleast_2d(_strategy_gradient(cfg, model, mean, t - 1, sched, x_input)),
                cfg.clip_norm,
            )
            norms.append(np.linalg.norm(g, axis=1))
            x = mean + cfg.strength * sched.beta_t(t) * g
            if t > 1:
                x = x + math.sqrt(sched.post_var(t)) * rng.standard_normal((n, d))
            _check_finite(x, t - 1)
    elif sampler == "ddim":
        taus = ddim_timesteps(sched.T, ddim_steps)
        for tn, tg in zip(taus[:-1], taus[1:]):
            eps = np.atleast_2d(model.predict_eps(x, int(tn), sched))
            g = _clip_rows(
                np.atleast_2d(_strategy_gradient(cfg, model, x, int(tn), sched, x_input)),
                cfg.clip_norm,
            )
            norms.append(np.linalg.norm(g, axis=1))
            eps_g = eps - math.sqrt(1.0 - sched.abar(int(tn))) * cfg.strength * g
            x = ddim_step(x, int(tn), int(tg), eps_g, sched).data
            _check_finite(x, int(tg))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return x, np.asarray(norms)


def guided_sample(
    model,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    x_input,
    seed: int,
    sampler: str = "ddpm",
    ddim_steps: int = 20,
) -> EditResult:
    """Synthesize one similarity-conditioned sample from the reverse chain."""
    if cfg.strategy == "ideal_oracle" and not hasattr(model, "gmm"):
        raise ValueError("ideal_oracle requires a mixture score model")
    ref = as_tensor(x_input)
    y = ref.data.ravel()
    if hasattr(model, "dim") and model.dim != y.size:
        raise ValueError(f"model dim {model.dim} != input size {y.size}")
    rng = np.random.default_rng(seed)
    states, norms = _run_chain(model, sched, cfg, y, rng, sampler, ddim_steps, n=1)
    return EditResult(
        input=ref,
        edit=Tensor(states[0].reshape(ref.shape)),
        seed=seed,
        steps_used=norms.shape[0],
        guidance_norms=norms[:, 0],
    )


def guided_sample_batch(
    model,
    sched: NoiseSchedule,
    cfg: GuidanceConfig,
    x_input,
    n: int,
    seed: int,
    sampler: str = "ddpm",
    ddim_steps: int = 20,
) -> np.ndarray:
    """Run ``n`` independent chains at once (rows of the returned array)."""
    if cfg.strategy == "ideal_oracle" and not hasattr(model, "gmm"):
        raise ValueError("ideal_oracle requires a mixture score model")
    y = np.asarray(x_input, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    states, _ = _run_chain(model, sched, cfg, y, rng, sampler, ddim_steps, n=n)
    return states
