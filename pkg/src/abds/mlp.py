"""Trainable MLP noise predictor with the standard denoising objective.

The network maps a noisy sample plus three monotone time features
``(t/T, abar_t, sqrt(1 - abar_t))`` to a noise estimate of the same width as
the data. Every forward pass runs through the recorded autodiff graph, so
the values used at inference and the vector-Jacobian products pulled through
the network are produced by the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, GraphBuilder, NonFiniteError, forward_eval, vjp
from .diffusion import NoiseSchedule, forward_diffuse


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    val_fraction: float = 0.1
    log_every: int = 0  # 0 = auto (~20 log points)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps, batch_size, lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment coefficients must lie in (0, 1)")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValueError("val_fraction must be in [0, 0.5]")


N_TIME_FEATURES = 3


def time_features(t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.abar(t)
    return np.array([t / sched.T, ab, np.sqrt(1.0 - ab)])


@dataclass
class MlpEpsModel:
    """Fully-connected noise predictor; weights alternate [W0, b0, W1, b1, ...]."""

    dim: int
    hidden: tuple[int, ...]
    activation: str
    weights: list[np.ndarray] = field(repr=False)

    @classmethod
    def init(cls, dim, hidden=(128, 128, 128), activation="tanh", seed=0):
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(seed)
        widths = [dim + N_TIME_FEATURES, *hidden, dim]
        weights = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            weights.append(np.zeros(fan_out))
        return cls(dim=dim, hidden=tuple(hidden), activation=activation, weights=weights)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def weight_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"w{i}", f"b{i}"]
        return names

    def _build_graph(self, n: int, with_loss: bool) -> Graph:
        gb = GraphBuilder()
        x = gb.leaf("x", (n, self.dim))
        tf = gb.leaf("tf", (n, N_TIME_FEATURES))
        h = gb.concat(x, tf)
        for i in range(self.n_layers):
            w = gb.leaf(f"w{i}", self.weights[2 * i].shape)
            b = gb.leaf(f"b{i}", self.weights[2 * i + 1].shape)
            h = gb.add(gb.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = gb.tanh(h) if self.activation == "tanh" else gb.relu(h)
        if with_loss:
            target = gb.leaf("target", (n, self.dim))
            resid = gb.add(h, gb.scale(target, -1.0))
            h = gb.scale(gb.sumsq(resid), 1.0 / (n * self.dim))
        return gb.build(h)

    def _bindings(self, xb: np.ndarray, tf: np.ndarray) -> dict:
        bound = {"x": xb, "tf": tf}
        for name, w in zip(self.weight_names(), self.weights):
            bound[name] = w
        return bound

    def predict_eps(self, x, t: int, sched: NoiseSchedule):
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        tf = np.broadcast_to(time_features(t, sched), (xb.shape[0], N_TIME_FEATURES))
        graph = self._build_graph(xb.shape[0], with_loss=False)
        out = forward_eval(graph, self._bindings(xb, np.ascontiguousarray(tf))).data
        return out[0] if np.asarray(x).ndim == 1 else out

    def vjp_mu0(self, x, t: int, sched: NoiseSchedule, cotangent):
        """``J^T c`` for the denoised-mean map, via a VJP through the network."""
        ab = sched.abar(t)
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cb = np.atleast_2d(np.asarray(cotangent, dtype=np.float64))
        if ab >= 1.0:
            return cotangent if np.asarray(x).ndim == 1 else cb
        tf = np.broadcast_to(time_features(t, sched), (xb.shape[0], N_TIME_FEATURES))
        graph = self._build_graph(xb.shape[0], with_loss=False)
        grads = vjp(graph, self._bindings(xb, np.ascontiguousarray(tf)), cb, wrt=["x"])
        veps = grads["x"].data
        out = (cb - np.sqrt(1.0 - ab) * veps) / np.sqrt(ab)
        return out[0] if np.asarray(x).ndim == 1 else out

    def copy(self) -> "MlpEpsModel":
        return MlpEpsModel(
            dim=self.dim,
            hidden=self.hidden,
            activation=self.activation,
            weights=[w.copy() for w in self.weights],
        )


def ddpm_loss_value(model: MlpEpsModel, xb, tf, target) -> float:
    graph = model._build_graph(xb.shape[0], with_loss=True)
    bound = model._bindings(xb, tf)
    bound["target"] = target
    return float(forward_eval(graph, bound).data)


def _draw_noisy(rng, x0: np.ndarray, sched: NoiseSchedule):
    n = x0.shape[0]
    ts = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[ts][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    tf = np.stack([ts / sched.T, ab[:, 0], np.sqrt(1.0 - ab[:, 0])], axis=1)
    return xt, tf, eps


def train_mlp(model: MlpEpsModel, data, sched: NoiseSchedule, cfg: TrainConfig):
    """Stochastic training on the denoising objective.

    Returns a new model (the input is never mutated) and a loss history of
    ``(step, train_loss, val_loss)`` rows. The validation noise draws are
    frozen up front so the validation loss is comparable across log points.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[1] != model.dim:
        raise ValueError(f"data dimension {data.shape[1]} != model dim {model.dim}")
    out = model.copy()
    rng = np.random.default_rng(cfg.seed)

    perm = rng.permutation(data.shape[0])
    n_val = int(round(cfg.val_fraction * data.shape[0]))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training rows left after validation split")
    val_xt, val_tf, val_eps = (None, None, None)
    if n_val:
        val_xt, val_tf, val_eps = _draw_noisy(rng, data[val_idx], sched)

    def val_loss():
        if not n_val:
            return float("nan")
        try:
            return ddpm_loss_value(out, val_xt, val_tf, val_eps)
        except NonFiniteError:
            return float("inf")

    history = [(0, float("nan"), val_loss())]
    if cfg.steps == 0:
        return out, history

    log_every = cfg.log_every or max(1, cfg.steps // 20)
    names = out.weight_names()
    graph = out._build_graph(cfg.batch_size, with_loss=True)
    mom = [np.zeros_like(w) for w in out.weights]
    vel = [np.zeros_like(w) for w in out.weights]

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, train_idx.size, size=cfg.batch_size)
        xt, tf, eps = _draw_noisy(rng, data[train_idx[idx]], sched)
        bound = out._bindings(xt, tf)
        bound["target"] = eps
        try:
            loss = float(forward_eval(graph, bound).data)
            if not np.isfinite(loss):
                raise NonFiniteError
            grads = vjp(graph, bound, 1.0, wrt=names)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at step {step}") from exc
        bc1 = 1.0 - cfg.beta1**step
        bc2 = 1.0 - cfg.beta2**step
        for i, name in enumerate(names):
            g = grads[name].data
            mom[i] = cfg.beta1 * mom[i] + (1 - cfg.beta1) * g
            vel[i] = cfg.beta2 * vel[i] + (1 - cfg.beta2) * g * g
            out.weights[i] = out.weights[i] - cfg.lr * (mom[i] / bc1) / (
                np.sqrt(vel[i] / bc2) + 1e-8
            )
        if step % log_every == 0 or step == cfg.steps:
            history.append((step, loss, val_loss()))

    return out, history
