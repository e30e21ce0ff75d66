"""View pool construction.

Two augmentation families feed each episode:

* standard views: crop-like coordinate masking plus noise on the raw input,
  then encoded. Cheap and low in diversity.
* diffusion views: a stochastic generator conditioned on the test embedding,
  mixing it with a random direction. More diverse, and with a known rate of
  spurious outputs that have drifted away from the test sample.

Every view draws from its own RNG stream keyed on (seed, sample index,
family, view index), so a batch never depends on what was generated before it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderWeights, ImageSample, encode_image, encode_images
from .numerics import l2_normalize, l2_normalize_rows

SPURIOUS_WEIGHT = 0.3

_STANDARD_STREAM = 1
_DIFFUSION_STREAM = 2


class ViewSource(enum.IntEnum):
    ORIGINAL = 0
    STANDARD = 1
    DIFFUSION = 2


@dataclass
class AugmentConfig:
    n_standard: int = 64
    n_diffusion: int = 63
    crop_fraction_range: tuple = (0.5, 1.0)
    noise_sigma: float = 0.05
    diversity_alpha_range: tuple = (0.6, 0.95)
    spurious_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.crop_fraction_range = tuple(float(x) for x in self.crop_fraction_range)
        self.diversity_alpha_range = tuple(float(x) for x in self.diversity_alpha_range)
        self.validate()

    def validate(self):
        if self.n_standard < 0 or self.n_diffusion < 0:
            raise ValueError("view counts must be >= 0")
        lo, hi = self.crop_fraction_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_fraction_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        lo, hi = self.diversity_alpha_range
        if not (0 < lo <= hi < 1):
            raise ValueError(f"diversity_alpha_range must satisfy 0 < lo <= hi < 1, got {(lo, hi)}")
        if not 0 <= self.spurious_rate < 1:
            raise ValueError("spurious_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class ViewBatch:
    embeddings: np.ndarray      # (N, D_feat), unit rows
    sources: np.ndarray         # (N,) ViewSource values
    spurious_flags: np.ndarray  # (N,) bool, diagnostics only

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def original(self) -> np.ndarray:
        return self.embeddings[0]

    def count(self, source: ViewSource) -> int:
        return int(np.sum(self.sources == source))


def view_rng(seed: int, sample_index: int, stream: int, view_index: int) -> np.random.Generator:
    # SeedSequence hashes the whole key into the generator state
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, sample_index, stream, view_index])


def crop_raw(raw: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    d = raw.shape[0]
    # the crop fraction is an area, so a 1-D signal keeps sqrt(c) of its length
    c = rng.uniform(*config.crop_fraction_range)
    keep = math.sqrt(c)
    width = int(round((1.0 - keep) * d))
    width = min(width, d - 1)
    out = raw.copy()
    if width > 0:
        start = int(rng.integers(0, d - width + 1))
        out[start:start + width] = 0.0
    out /= keep
    if config.noise_sigma > 0:
        out += config.noise_sigma * rng.standard_normal(d)
    return out


def standard_augment(sample: ImageSample, n: int, config: AugmentConfig, weights: EncoderWeights,
                     sample_index: int = 0) -> np.ndarray:
    """``n`` encoded crop-and-noise views of ``sample``, shape (n, D_feat)."""
    if n <= 0:
        return np.zeros((0, weights.d_feat))
    raws = np.stack([
        crop_raw(sample.raw, view_rng(config.seed, sample_index, _STANDARD_STREAM, i), config)
        for i in range(n)
    ])
    return encode_images(raws, weights)


def diffusion_augment(e_test, n: int, config: AugmentConfig, sample_index: int = 0):
    """Generator surrogate conditioned on the test embedding.

    Returns ``(views, spurious_flags)``. A regular view is
    ``normalize(a * e + (1 - a) * u)`` with ``a`` drawn from the diversity
    range and ``u`` a fresh random unit vector; a spurious view keeps only a
    weak ``0.3 * e`` pull toward the test sample.
    """
    e = l2_normalize(e_test)
    d = e.shape[0]
    if n <= 0:
        return np.zeros((0, d)), np.zeros(0, dtype=bool)
    views = np.empty((n, d))
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        rng = view_rng(config.seed, sample_index, _DIFFUSION_STREAM, i)
        spurious = rng.random() < config.spurious_rate
        u = l2_normalize(rng.standard_normal(d))
        alpha = rng.uniform(*config.diversity_alpha_range)
        if spurious:
            views[i] = SPURIOUS_WEIGHT * e + u
        else:
            views[i] = alpha * e + (1.0 - alpha) * u
        flags[i] = spurious
    return l2_normalize_rows(views), flags


def split_budget(config: AugmentConfig, mix_ratio: float | None) -> tuple[int, int]:
    """(n_standard, n_diffusion) for a given diffusion share of the fixed budget."""
    if mix_ratio is None:
        return config.n_standard, config.n_diffusion
    if not 0 <= mix_ratio <= 1:
        raise ValueError(f"mix_ratio must lie in [0, 1], got {mix_ratio}")
    total = config.n_standard + config.n_diffusion
    n_diff = int(round(mix_ratio * total))
    return total - n_diff, n_diff


def assemble_view_batch(sample: ImageSample, config: AugmentConfig, weights: EncoderWeights,
                        mix_ratio: float | None = None, sample_index: int = 0) -> ViewBatch:
    n_std, n_diff = split_budget(config, mix_ratio)
    e = encode_image(sample, weights)
    std = standard_augment(sample, n_std, config, weights, sample_index)
    diff, flags = diffusion_augment(e, n_diff, config, sample_index)
    embeddings = np.vstack([e[None, :], std, diff])
    sources = np.concatenate([
        [ViewSource.ORIGINAL],
        np.full(n_std, ViewSource.STANDARD),
        np.full(n_diff, ViewSource.DIFFUSION),
    ]).astype(np.int64)
    spurious = np.concatenate([np.zeros(1 + n_std, dtype=bool), flags])
    return ViewBatch(embeddings, sources, spurious)
