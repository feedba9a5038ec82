"""Independent numerical oracles for the guidance gradients.

The expected kernel similarity under the clean-sample posterior is evaluated
by Gauss-Hermite quadrature against the *prior* mixture components (never
through the closed-form posterior), so finite differences of its log form a
genuinely independent check of the analytic ideal gradient.
"""

from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule
from .gmm import GmmDistribution, logsumexp
from .guidance import (
    SimilarityKernel,
    guidance_naive,
    guidance_reverse_match,
    ideal_guidance_gmm,
)


def quad_log_expected_similarity(
    gmm: GmmDistribution,
    x: np.ndarray,
    y: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    lam: float,
    nodes: int = 160,
) -> float:
    """log E[exp(-lam ||x0 - y||^2) | x_t = x] by prior-component quadrature."""
    ab = sched.abar(t)
    if not 0.0 < ab < 1.0:
        raise ValueError("quadrature oracle needs 0 < alpha_bar < 1")
    z, gw = np.polynomial.hermite.hermgauss(nodes)
    d = gmm.dim
    grids = np.meshgrid(*([z] * d), indexing="ij")
    zz = np.stack([g.ravel() for g in grids], axis=1)  # (nodes^d, d)
    wgrids = np.meshgrid(*([gw] * d), indexing="ij")
    logww = np.sum(np.log(np.stack([g.ravel() for g in wgrids], axis=1)), axis=1)

    s = np.sqrt(ab)
    num, den = [], []
    for k in range(gmm.n_components):
        x0 = gmm.means[k] + np.sqrt(2.0 * gmm.variances[k]) * zz
        loglik = -0.5 * np.sum(
            (x - s * x0) ** 2 / (1.0 - ab) + np.log(2 * np.pi * (1.0 - ab)), axis=1
        )
        logr = -lam * np.sum((x0 - y) ** 2, axis=1)
        base = np.log(gmm.weights[k]) + logww - (d / 2.0) * np.log(np.pi)
        num.append(base + loglik + logr)
        den.append(base + loglik)
    return float(logsumexp(np.concatenate(num)) - logsumexp(np.concatenate(den)))


def fd_ideal_gradient(
    gmm: GmmDistribution,
    x: np.ndarray,
    y: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    lam: float,
    step: float = 1e-4,
    nodes: int = 160,
) -> np.ndarray:
    """Central finite differences of the quadrature log-expectation."""
    g = np.zeros_like(x, dtype=np.float64)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (
            quad_log_expected_similarity(gmm, xp, y, t, sched, lam, nodes)
            - quad_log_expected_similarity(gmm, xm, y, t, sched, lam, nodes)
        ) / (2.0 * step)
    return g


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def _marginal_draw(rng, gmm, ab):
    k = rng.choice(gmm.n_components, p=gmm.weights)
    x0 = gmm.means[k] + np.sqrt(gmm.variances[k]) * rng.standard_normal(gmm.dim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(gmm.dim)


def ideal_vs_quadrature(gmm, sched, lam, y, t_values, n_probes, seed, tol=1e-3):
    """Closed-form ideal gradient against the quadrature oracle on a probe grid."""
    rng = np.random.default_rng(seed)
    kernel = SimilarityKernel(lam)
    rows = []
    for t in t_values:
        ab = sched.abar(int(t))
        for j in range(n_probes):
            x = _marginal_draw(rng, gmm, ab)
            g = ideal_guidance_gmm(x, y, int(t), gmm, sched, kernel)
            fd = fd_ideal_gradient(gmm, x, y, int(t), sched, lam)
            err = _rel_err(g, fd)
            rows.append(
                {"t": int(t), "probe": j, "rel_err": err, "ok": err <= tol}
            )
    return rows


def terminal_gradient_check(gmm, sched, lam, n_probes, seed, slack=10.0):
    """Terminal-step bound: reverse/ideal gradients vanish, the naive one does not.

    The bound is slack * sqrt(abar_T) * lam * (|x| + |y|); the naive gradient
    should exceed it on nearly every probe.
    """
    from .gmm import GmmScoreModel

    rng = np.random.default_rng(seed)
    model = GmmScoreModel(gmm)
    kernel = SimilarityKernel(lam)
    T = sched.T
    ab = sched.abar(T)
    rows = []
    for j in range(n_probes):
        x = rng.standard_normal(gmm.dim)
        y = rng.standard_normal(gmm.dim)
        bound = slack * np.sqrt(ab) * lam * (np.linalg.norm(x) + np.linalg.norm(y))
        g_rev = guidance_reverse_match(x, y, T, model, sched, kernel)
        g_ideal = ideal_guidance_gmm(x, y, T, gmm, sched, kernel)
        g_naive = guidance_naive(x, y, kernel)
        rows.append(
            {
                "probe": j,
                "bound": bound,
                "reverse_norm": float(np.linalg.norm(g_rev)),
                "ideal_norm": float(np.linalg.norm(g_ideal)),
                "naive_norm": float(np.linalg.norm(g_naive)),
                "reverse_ok": float(np.linalg.norm(g_rev)) <= bound,
                "ideal_ok": float(np.linalg.norm(g_ideal)) <= bound,
                "naive_violates": float(np.linalg.norm(g_naive)) > bound,
            }
        )
    return rows


def angular_error_grid(gmm, sched, lam, y, t_values, n_probes, seed):
    """Mean angle (radians) between each strategy's gradient and the ideal one."""
    from .gmm import GmmScoreModel
    from .guidance import guidance_forward_match

    rng = np.random.default_rng(seed)
    model = GmmScoreModel(gmm)
    kernel = SimilarityKernel(lam)
    errs = {"naive": [], "forward_match": [], "reverse_match": []}
    for t in t_values:
        ab = sched.abar(int(t))
        for _ in range(n_probes):
            x = _marginal_draw(rng, gmm, ab)
            gi = ideal_guidance_gmm(x, y, int(t), gmm, sched, kernel)
            errs["naive"].append(_angle(guidance_naive(x, y, kernel), gi))
            errs["forward_match"].append(
                _angle(guidance_forward_match(x, y, int(t), sched, kernel), gi)
            )
            errs["reverse_match"].append(
                _angle(guidance_reverse_match(x, y, int(t), model, sched, kernel), gi)
            )
    return {k: float(np.mean(v)) for k, v in errs.items()}
