"""Analysis stage: feature extraction, pixel distance, segment refinement.

The detector synthesizes an in-distribution edit of the input image, embeds
both images with a pluggable per-pixel feature extractor, scores each pixel
by feature distance, and then replaces every pixel's score with the mean
score of its segment (segments come from a deterministic quantize-and-flood
segmenter run on the input image only).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .guidance import EditResult, GuidanceConfig, guided_sample


@dataclass(frozen=True)
class FeatureExtractor:
    """Per-pixel feature map: identity channels, patch statistics, or patch PCA.

    ``patch_stats`` emits per channel the neighborhood mean and standard
    deviation plus the two axis gradient magnitudes. ``patch_pca`` projects
    the flattened, mean-centered neighborhood onto a fitted orthonormal
    basis and requires ``fit_patch_pca`` first.
    """

    kind: str
    radius: int = 1
    dims: int = 0
    patch_mean: np.ndarray | None = None
    basis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "patch_stats", "patch_pca"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind != "identity" and self.radius < 1:
            raise ValueError("radius must be >= 1")

    def output_width(self, channels: int) -> int:
        if self.kind == "identity":
            return channels
        if self.kind == "patch_stats":
            return 4 * channels
        return self.dims


def _pad(image: np.ndarray, r: int) -> np.ndarray:
    return np.pad(image, ((r, r), (r, r), (0, 0)), mode="edge")


def _patches(image: np.ndarray, r: int) -> np.ndarray:
    """All (2r+1)^2 * C neighborhood vectors, shape (H, W, P)."""
    h, w, c = image.shape
    padded = _pad(image, r)
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1), (0, 1))
    # win: (H, W, C, 2r+1, 2r+1) -> (H, W, (2r+1)^2 * C)
    return win.transpose(0, 1, 3, 4, 2).reshape(h, w, -1)


def extract_features(image, fx: FeatureExtractor) -> np.ndarray:
    """Per-pixel feature vectors, shape (H, W, C_out); image must be in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if fx.kind == "identity":
        return img.copy()
    if fx.kind == "patch_stats":
        r = fx.radius
        padded = _pad(img, r)
        win = np.lib.stride_tricks.sliding_window_view(
            padded, (2 * r + 1, 2 * r + 1), (0, 1)
        )
        mean = win.mean(axis=(3, 4))
        std = win.std(axis=(3, 4))
        p1 = _pad(img, 1)
        gx = np.abs(p1[1:-1, 2:] - p1[1:-1, :-2]) / 2.0
        gy = np.abs(p1[2:, 1:-1] - p1[:-2, 1:-1]) / 2.0
        return np.concatenate([mean, std, gx, gy], axis=2)
    if fx.basis is None or fx.patch_mean is None:
        raise ValueError("patch_pca extractor has no fitted basis")
    pv = _patches(img, fx.radius) - fx.patch_mean
    return pv @ fx.basis


def fit_patch_pca(train_images, radius: int, dims: int, seed: int) -> FeatureExtractor:
    """Fit the top principal directions of neighborhood patches.

    A ridge of 1e-8 on the covariance diagonal keeps degenerate patch sets
    well-posed; the returned basis is orthonormal.
    """
    sample = np.asarray(train_images[0], dtype=np.float64)
    if sample.ndim == 2:
        channels = 1
    else:
        channels = sample.shape[2]
    p = (2 * radius + 1) ** 2 * channels
    if not 1 <= dims <= p:
        raise ValueError(f"dims must be in [1, {p}]")
    rng = np.random.default_rng(seed)
    rows = []
    for img in train_images:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        rows.append(_patches(arr, radius).reshape(-1, p))
    allpatches = np.concatenate(rows, axis=0)
    if allpatches.shape[0] > 100_000:
        pick = rng.choice(allpatches.shape[0], size=100_000, replace=False)
        allpatches = allpatches[pick]
    if allpatches.shape[0] < dims:
        raise ValueError("not enough training patches for the requested dims")
    mean = allpatches.mean(axis=0)
    centered = allpatches - mean
    cov = centered.T @ centered / allpatches.shape[0] + 1e-8 * np.eye(p)
    eigval, eigvec = np.linalg.eigh(cov)
    basis = eigvec[:, ::-1][:, :dims]
    return FeatureExtractor(
        kind="patch_pca", radius=radius, dims=dims, patch_mean=mean, basis=basis
    )


def pixel_distance(f_a, f_b, metric: str = "cosine") -> np.ndarray:
    """Per-pixel distance between two feature maps of equal shape.

    Cosine distance is 1 - <a, b>/(|a||b|), defined as 0 when both vectors
    vanish and 1 when exactly one does.
    """
    a = np.asarray(f_a, dtype=np.float64)
    b = np.asarray(f_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    if metric == "l2":
        return np.sqrt(np.sum((a - b) ** 2, axis=2))
    if metric != "cosine":
        raise ValueError(f"unknown metric {metric!r}")
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    dot = np.sum(a * b, axis=2)
    both = (na > 0) & (nb > 0)
    out = np.where(both, 1.0 - dot / np.where(both, na * nb, 1.0), 0.0)
    one = (na > 0) ^ (nb > 0)
    out = np.where(one, 1.0, out)
    return np.clip(out, 0.0, 2.0)


@dataclass(frozen=True)
class Segmentation:
    ids: np.ndarray     # (H, W) dense segment ids in [0, count)
    count: int
    pixel_counts: np.ndarray  # (count,)


def label_components(cells: np.ndarray, connectivity: int = 4):
    """Connected components of equal cell values; returns (ids, count).

    ``cells`` is any integer grid; 4-connectivity uses the axis neighbors,
    8 adds the diagonals. Ids are dense and assigned in scan order.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    h, w = cells.shape
    ids = np.full((h, w), -1, dtype=np.int64)
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    count = 0
    for sy in range(h):
        for sx in range(w):
            if ids[sy, sx] >= 0:
                continue
            ids[sy, sx] = count
            queue = deque([(sy, sx)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in offsets:
                    ny, nx = y + dy, x + dx
                    if (
                        0 <= ny < h
                        and 0 <= nx < w
                        and ids[ny, nx] < 0
                        and cells[ny, nx] == cells[y, x]
                    ):
                        ids[ny, nx] = count
                        queue.append((ny, nx))
            count += 1
    return ids, count


def segment_image(image, levels: int = 8, connectivity: int = 4) -> Segmentation:
    """Quantize each channel into uniform bins and flood equal-color regions."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    q = np.minimum((np.clip(img, 0.0, 1.0) * levels).astype(np.int64), levels - 1)
    # encode the per-channel bins into one integer key per pixel
    keys = np.zeros(img.shape[:2], dtype=np.int64)
    for c in range(q.shape[2]):
        keys = keys * levels + q[:, :, c]
    ids, count = label_components(keys, connectivity)
    return Segmentation(
        ids=ids, count=count, pixel_counts=np.bincount(ids.ravel(), minlength=count)
    )


def refine_with_segments(raw, seg: Segmentation) -> np.ndarray:
    """Replace each pixel's score with its segment's mean score."""
    scores = np.asarray(raw, dtype=np.float64)
    if scores.shape != seg.ids.shape:
        raise ValueError("score grid and segmentation shapes differ")
    sums = np.bincount(seg.ids.ravel(), weights=scores.ravel(), minlength=seg.count)
    means = sums / seg.pixel_counts
    return means[seg.ids]


@dataclass(frozen=True)
class AnomalyMap:
    raw: np.ndarray
    refined: np.ndarray
    extractor_kind: str
    segment_levels: int
    segment_connectivity: int

    def __post_init__(self):
        if self.raw.shape != self.refined.shape:
            raise ValueError("raw and refined grids must share a shape")
        for grid in (self.raw, self.refined):
            if not np.all(np.isfinite(grid)) or grid.min() < 0:
                raise ValueError("scores must be finite and non-negative")


def detect(
    x_input,
    model,
    sched: NoiseSchedule,
    g: GuidanceConfig,
    fx: FeatureExtractor,
    seed: int,
    levels: int = 8,
    connectivity: int = 4,
    sampler: str = "ddpm",
    ddim_steps: int = 20,
    distance_metric: str = "cosine",
    scale: float = 1.0,
):
    """Full synthesis + analysis pass on one image; returns (EditResult, AnomalyMap).

    ``scale`` maps image intensities into the model's coordinates (models are
    usually trained on intensities divided by the training standard deviation
    so signal and injected noise are commensurate). The edit is mapped back
    and clipped into [0, 1] before feature extraction; segmentation runs on
    the input image only.
    """
    img = np.asarray(x_input, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    edit_res = guided_sample(
        model, sched, g, img.ravel() / scale, seed, sampler=sampler, ddim_steps=ddim_steps
    )
    edit_img = np.clip(edit_res.edit.data.reshape(img.shape) * scale, 0.0, 1.0)
    f_in = extract_features(img, fx)
    f_ed = extract_features(edit_img, fx)
    raw = pixel_distance(f_ed, f_in, metric=distance_metric)
    seg = segment_image(img, levels=levels, connectivity=connectivity)
    refined = refine_with_segments(raw, seg)
    amap = AnomalyMap(
        raw=raw,
        refined=refined,
        extractor_kind=fx.kind,
        segment_levels=levels,
        segment_connectivity=connectivity,
    )
    return edit_res, amap
