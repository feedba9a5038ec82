"""Synthetic datasets: mixture point sets and procedural texture images.

Textures are sums of a few seeded sinusoidal waves per image around a
family-specific base level, clamped to [0, 1]. Families differ in frequency
band, amplitude, and base level, standing in for visually distinct terrain
statistics. Test images may receive one planted rectangle or disk filled
with out-of-family content (a rare solid intensity or an alien-frequency
wave); the mask records exactly the planted pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gmm import GmmDistribution


@dataclass(frozen=True)
class PointDataset:
    samples: np.ndarray  # (N, d)
    gmm: GmmDistribution
    seed: int

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError("samples must be a non-empty (N, d) array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")


def gen_gmm_dataset(gmm: GmmDistribution, n: int, seed: int) -> PointDataset:
    """Draw ``n`` i.i.d. mixture samples from a seeded stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.dim))
    samples = gmm.means[comps] + np.sqrt(gmm.variances[comps]) * eps
    return PointDataset(samples=samples, gmm=gmm, seed=seed)


@dataclass(frozen=True)
class TextureParams:
    height: int = 16
    width: int = 16
    channels: int = 1
    n_train: int = 400
    n_test: int = 40
    waves_per_image: int = 4
    anomaly_rate: float = 0.75
    anomaly_min_size: int = 2
    anomaly_max_size: int = 4
    # per-family (frequency band in cycles per image, orientation band in
    # radians, base level, amplitude)
    family_freq: tuple = ((2.0, 3.5), (0.8, 1.6), (0.3, 0.7))
    family_angle: tuple = ((0.0, 0.5), (1.1, 1.6), (2.2, 2.7))
    family_level: tuple = (0.35, 0.55, 0.75)
    family_amp: tuple = (0.16, 0.14, 0.10)
    level_tolerance: float = 0.13  # regression band on per-family mean intensity
    alien_freq: float = 6.5
    alien_amp: float = 0.35

    def __post_init__(self):
        if min(self.height, self.width) < 4 or self.channels < 1:
            raise ValueError("image dimensions too small")
        lens = {
            len(self.family_freq),
            len(self.family_angle),
            len(self.family_level),
            len(self.family_amp),
        }
        if len(lens) != 1:
            raise ValueError("family parameter tuples must have equal length")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError("anomaly_rate must be in [0, 1]")
        if self.anomaly_max_size > min(self.height, self.width) // 2:
            raise ValueError("anomaly size must fit within half the image extent")
        if self.anomaly_min_size < 1 or self.anomaly_min_size > self.anomaly_max_size:
            raise ValueError("bad anomaly size range")

    @property
    def n_families(self) -> int:
        return len(self.family_level)


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    masks: np.ndarray   # (N, H, W) integer component ids, 0 = background
    params: TextureParams
    seed: int

    def __post_init__(self):
        if self.images.shape[:3] != self.masks.shape:
            raise ValueError("mask shape must match image shape")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]


def _wave_field(rng, h, w, freq_band, angle_band, level, amp, n_waves):
    yy, xx = np.mgrid[0:h, 0:w]
    span = max(h, w)
    img = np.full((h, w), level, dtype=np.float64)
    for j in range(n_waves):
        f = rng.uniform(*freq_band)
        theta = rng.uniform(*angle_band)
        phase = rng.uniform(0, 2 * np.pi)
        a = amp * rng.uniform(0.5, 1.0) / (1 + j)
        carrier = 2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) / span
        img += a * np.sin(carrier + phase)
    return img


def _disk_mask(h, w, cy, cx, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _plant_anomaly(rng, img, params: TextureParams, family: int):
    """Overwrite one region with out-of-family content; return its pixel mask."""
    h, w = img.shape[:2]
    size = int(rng.integers(params.anomaly_min_size, params.anomaly_max_size + 1))
    shape_kind = rng.integers(0, 2)  # 0 = rectangle, 1 = disk
    if shape_kind == 0:
        y0 = int(rng.integers(0, h - size))
        x0 = int(rng.integers(0, w - size))
        region = np.zeros((h, w), dtype=bool)
        region[y0 : y0 + size, x0 : x0 + size] = True
    else:
        cy = int(rng.integers(size, h - size + 1))
        cx = int(rng.integers(size, w - size + 1))
        region = _disk_mask(h, w, cy, cx, size)

    fill_kind = rng.integers(0, 2)  # 0 = solid extreme, 1 = alien frequency
    if fill_kind == 0:
        # pick the intensity extreme far from this family's base level
        value = 0.04 if params.family_level[family] > 0.5 else 0.96
        fill = np.full((h, w), value)
    else:
        fill = _wave_field(
            rng, h, w, (params.alien_freq, params.alien_freq * 1.3),
            (0.0, 2 * np.pi), 0.5, params.alien_amp, 2,
        )
    for c in range(img.shape[2]):
        img[:, :, c] = np.where(region, fill, img[:, :, c])
    return region


def _make_image(child_seed, params: TextureParams, family: int, plant: bool):
    rng = np.random.default_rng(child_seed)
    chans = [
        _wave_field(
            rng,
            params.height,
            params.width,
            params.family_freq[family],
            params.family_angle[family],
            params.family_level[family],
            params.family_amp[family],
            params.waves_per_image,
        )
        for _ in range(params.channels)
    ]
    img = np.stack(chans, axis=-1)
    mask = np.zeros((params.height, params.width), dtype=np.int64)
    if plant and rng.uniform() < params.anomaly_rate:
        region = _plant_anomaly(rng, img, params, family)
        mask[region] = 1
    return np.clip(img, 0.0, 1.0), mask


def gen_texture_dataset(params: TextureParams, seed: int):
    """Generate disjoint train/test splits; train images are anomaly-free."""
    root = np.random.SeedSequence(seed)
    train_seq, test_seq = root.spawn(2)

    def build(seq, n, plant):
        images = np.empty((n, params.height, params.width, params.channels))
        masks = np.empty((n, params.height, params.width), dtype=np.int64)
        for i, child in enumerate(seq.spawn(n)):
            family = i % params.n_families
            images[i], masks[i] = _make_image(child, params, family, plant)
        return images, masks

    tr_img, tr_mask = build(train_seq, params.n_train, plant=False)
    te_img, te_mask = build(test_seq, params.n_test, plant=True)
    train = ImageDataset(images=tr_img, masks=tr_mask, params=params, seed=seed)
    test = ImageDataset(images=te_img, masks=te_mask, params=params, seed=seed)
    return train, test
