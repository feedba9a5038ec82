"""Exact score machinery for diagonal Gaussian-mixture training distributions.

For a mixture prior, the noisy marginal at signal level ``abar`` is again a
mixture (means scaled by ``sqrt(abar)``, variances ``abar*var + 1 - abar``),
so the expected noise, the clean-sample posterior, and the Jacobian of the
posterior mean all have closed forms. Responsibilities are always handled in
log space so the formulas stay finite far into the tails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule


def logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    if axis is None:
        return out.reshape(())
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class GmmDistribution:
    """Diagonal-covariance Gaussian mixture: weights (K,), means (K, d), variances (K, d)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if w.ndim != 1 or m.shape[0] != w.size or v.shape != m.shape:
            raise ValueError("inconsistent mixture shapes")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        if np.any(v <= 0) or not np.all(np.isfinite(v)) or not np.all(np.isfinite(m)):
            raise ValueError("means/variances must be finite with variances > 0")
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def _as_batch(x, dim):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != dim:
        raise ValueError(f"point dimension {arr.shape[1]} != mixture dimension {dim}")
    return arr, single


def marginal_params(gmm: GmmDistribution, abar: float):
    """Component means/variances of the noisy marginal at signal level ``abar``."""
    return np.sqrt(abar) * gmm.means, abar * gmm.variances + (1.0 - abar)


def gmm_log_marginal(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule):
    """log density of the noisy marginal at timestep ``t``."""
    xb, single = _as_batch(x, gmm.dim)
    m, v = marginal_params(gmm, sched.abar(t))
    quad = (xb[:, None, :] - m[None]) ** 2 / v[None]
    logz = -0.5 * np.sum(quad + np.log(2 * np.pi * v)[None], axis=2)
    out = logsumexp(np.log(gmm.weights)[None] + logz, axis=1)
    return float(out[0]) if single else out


def _marginal_logresp(gmm, xb, abar):
    """Log responsibilities (n, K) and per-component score pieces (n, K, d)."""
    m, v = marginal_params(gmm, abar)
    diff = xb[:, None, :] - m[None]
    logz = -0.5 * np.sum(diff**2 / v[None] + np.log(2 * np.pi * v)[None], axis=2)
    logw = np.log(gmm.weights)[None] + logz
    logr = logw - logsumexp(logw, axis=1)[:, None]
    dlogz = -diff / v[None]  # grad_x of each component's log density
    return logr, dlogz


def gmm_score(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule):
    """Gradient of the log noisy-marginal with respect to ``x``."""
    xb, single = _as_batch(x, gmm.dim)
    logr, dlogz = _marginal_logresp(gmm, xb, sched.abar(t))
    out = np.sum(np.exp(logr)[:, :, None] * dlogz, axis=1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite score")
    return out[0] if single else out


def gmm_exact_eps(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule):
    """Expected noise under the mixture marginal at ``(x, t)``.

    Equals ``-sqrt(1 - abar_t)`` times the marginal score, which makes it
    the exact target the learned noise predictor is trained toward.
    """
    ab = sched.abar(t)
    return -np.sqrt(1.0 - ab) * gmm_score(gmm, x, t, sched)


def _posterior_parts(gmm, xb, abar):
    """Posterior mixture pieces for the clean sample given a noisy one.

    Returns log weights (n, K), means (n, K, d), variances (K, d) and the
    per-component marginal log-density gradients (n, K, d). Variances do not
    depend on the conditioning point.
    """
    logr, dlogz = _marginal_logresp(gmm, xb, abar)
    prec = 1.0 / gmm.variances + abar / (1.0 - abar)
    vpost = 1.0 / prec
    mpost = vpost[None] * (
        (gmm.means / gmm.variances)[None]
        + np.sqrt(abar) * xb[:, None, :] / (1.0 - abar)
    )
    return logr, mpost, vpost, dlogz


def gmm_posterior(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule) -> GmmDistribution:
    """Posterior mixture over the clean sample given ``x`` at timestep ``t``."""
    xb, single = _as_batch(x, gmm.dim)
    if not single:
        raise ValueError("gmm_posterior takes a single point")
    ab = sched.abar(t)
    if ab >= 1.0:
        raise ValueError("posterior degenerates to a point at t = 0")
    logr, mpost, vpost, _ = _posterior_parts(gmm, xb, ab)
    return GmmDistribution(
        weights=np.exp(logr[0]),
        means=mpost[0],
        variances=np.broadcast_to(vpost, mpost[0].shape).copy(),
    )


def gmm_mu0(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule):
    """Posterior mean of the clean sample (the exact denoised estimate)."""
    xb, single = _as_batch(x, gmm.dim)
    ab = sched.abar(t)
    if ab >= 1.0:
        return x if single else xb
    logr, mpost, _, _ = _posterior_parts(gmm, xb, ab)
    out = np.sum(np.exp(logr)[:, :, None] * mpost, axis=1)
    return out[0] if single else out


def gmm_vjp_mu0(gmm: GmmDistribution, x, t: int, sched: NoiseSchedule, cotangent):
    """Closed-form ``J^T c`` where ``J`` is the Jacobian of the posterior mean.

    Both the posterior weights and the posterior means move with ``x``; the
    weight term contributes a rank-one piece per component, the mean term a
    diagonal one.
    """
    xb, single = _as_batch(x, gmm.dim)
    cb, csingle = _as_batch(cotangent, gmm.dim)
    if xb.shape != cb.shape:
        raise ValueError("cotangent batch must match point batch")
    ab = sched.abar(t)
    if ab >= 1.0:
        return cotangent if single else cb
    logr, mpost, vpost, dlogz = _posterior_parts(gmm, xb, ab)
    r = np.exp(logr)
    score = np.sum(r[:, :, None] * dlogz, axis=1)  # marginal score (n, d)
    jdiag = np.sqrt(ab) * vpost / (1.0 - ab)       # (K, d)
    mdotc = np.sum(mpost * cb[:, None, :], axis=2)  # (n, K)
    weight_term = np.sum(
        (r * mdotc)[:, :, None] * (dlogz - score[:, None, :]), axis=1
    )
    mean_term = np.sum(r[:, :, None] * (jdiag[None] * cb[:, None, :]), axis=1)
    out = weight_term + mean_term
    return out[0] if (single and csingle) else out


@dataclass(frozen=True)
class GmmScoreModel:
    """Score-model adapter exposing the exact mixture predictions."""

    gmm: GmmDistribution

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def predict_eps(self, x, t: int, sched: NoiseSchedule):
        return gmm_exact_eps(self.gmm, x, t, sched)

    def vjp_mu0(self, x, t: int, sched: NoiseSchedule, cotangent):
        return gmm_vjp_mu0(self.gmm, x, t, sched, cotangent)
