"""Evaluation metrics over per-pixel anomaly scores and binary ground truth.

``auc_pr`` is average precision with grouped ties: a block of equal scores
contributes a single step of the precision-recall staircase, which makes the
result independent of how ties happen to be ordered.

``f1_star`` averages a size-normalized F1 over evenly spaced interior score
quantiles. Each ground-truth-positive pixel counts with weight one over its
ground-truth component size, and each false-positive pixel with weight one
over its predicted-component size, so small anomalies weigh as much as
large ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipeline import label_components


@dataclass(frozen=True)
class LabeledScores:
    """Flat scores with parallel binary labels and ground-truth component ids.

    ``component_ids`` uses 0 for background; every positive pixel must carry
    a positive id. ``shape`` optionally restores the 2-D grid so predicted
    components can be found spatially; without it, runs of consecutive
    indices act as components.
    """

    scores: np.ndarray
    labels: np.ndarray
    component_ids: np.ndarray
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        l = np.asarray(self.labels).ravel().astype(np.int64)
        c = np.asarray(self.component_ids).ravel().astype(np.int64)
        if not (s.size == l.size == c.size):
            raise ValueError("scores, labels and component ids must align")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if np.any((l != 0) & (l != 1)):
            raise ValueError("labels must be binary")
        if np.any((l == 1) & (c == 0)) or np.any((l == 0) & (c != 0)):
            raise ValueError("component ids must cover exactly the positive pixels")
        if self.shape is not None and int(np.prod(self.shape)) != s.size:
            raise ValueError("shape does not match the score count")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", l)
        object.__setattr__(self, "component_ids", c)


def from_map(score_grid, mask) -> LabeledScores:
    """Build LabeledScores from a 2-D score grid and an integer component mask."""
    grid = np.asarray(score_grid, dtype=np.float64)
    m = np.asarray(mask).astype(np.int64)
    if grid.shape != m.shape:
        raise ValueError("score grid and mask shapes differ")
    return LabeledScores(
        scores=grid.ravel(),
        labels=(m > 0).astype(np.int64).ravel(),
        component_ids=m.ravel(),
        shape=grid.shape,
    )


def auc_pr(ls: LabeledScores) -> float:
    """Average precision of the descending-score ranking (ties grouped)."""
    n_pos = int(ls.labels.sum())
    if n_pos == 0 or n_pos == ls.labels.size:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-ls.scores, kind="stable")
    scores = ls.scores[order]
    labels = ls.labels[order]
    # indices where a tie block ends (last occurrence of each distinct score)
    block_end = np.nonzero(np.diff(scores) != 0)[0]
    ends = np.concatenate([block_end, [scores.size - 1]])
    tp = np.cumsum(labels)[ends]
    ranks = ends + 1.0
    precision = tp / ranks
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _predicted_component_sizes(pred: np.ndarray, shape):
    """Size of the predicted component containing each pixel (0 outside).

    Flat inputs carry no adjacency, so every predicted pixel is its own
    component there; grids use 4-connected components.
    """
    if shape is None:
        return pred.astype(np.float64)
    grid = pred.reshape(shape)
    ids, _ = label_components(grid.astype(np.int64), connectivity=4)
    flat_ids = ids.ravel()
    counts = np.bincount(flat_ids)
    sizes = counts[flat_ids].astype(np.float64)
    sizes[~pred] = 0.0
    return sizes


def f1_star(ls: LabeledScores, n_thresholds: int = 9) -> float:
    """Threshold-averaged, component-size-normalized F1 in [0, 1]."""
    if n_thresholds < 1:
        raise ValueError("n_thresholds must be >= 1")
    if ls.labels.sum() == 0:
        raise ValueError("no ground-truth components present")
    gt_sizes = np.bincount(ls.component_ids)
    gt_weight = np.zeros(ls.scores.size)
    pos = ls.labels == 1
    gt_weight[pos] = 1.0 / gt_sizes[ls.component_ids[pos]]

    levels = np.arange(1, n_thresholds + 1) / (n_thresholds + 1)
    thresholds = np.quantile(ls.scores, levels)
    total = 0.0
    for thr in thresholds:
        pred = ls.scores > thr
        tp = float(np.sum(gt_weight[pred & pos]))
        fn = float(np.sum(gt_weight[~pred & pos]))
        fp_sizes = _predicted_component_sizes(pred, ls.shape)
        fp_mask = pred & ~pos
        fp = float(np.sum(1.0 / fp_sizes[fp_mask])) if fp_mask.any() else 0.0
        denom = 2 * tp + fp + fn
        total += 2 * tp / denom if denom > 0 else 0.0
    return total / n_thresholds
