"""Per-image normalization and augmentation of multispectral rasters.

Every normalization uses only the statistics of the image itself. The
"total" variants pool all channels so that cross-channel contrast survives;
the "channelwise" variants treat each band independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "DEFAULT_BANDS",
    "NORMALIZATIONS",
    "DegenerateImageError",
    "MultispectralImage",
    "AugmentPolicy",
    "standardize",
    "hist_equalize",
    "normalize",
    "augment_train",
    "dihedral_variants",
    "save_image",
    "load_image",
]

DEFAULT_BANDS = ("B", "G", "R", "REDGE", "NIR")
NORMALIZATIONS = (
    "total_standardization",
    "channelwise_standardization",
    "total_histogram_equalization",
    "channelwise_histogram_equalization",
)


class DegenerateImageError(ValueError):
    """The image (or one of its channels) has zero variance in the normalization scope."""


@dataclass
class MultispectralImage:
    data: np.ndarray  # (C, H, W)
    band_names: tuple[str, ...] = field(default=None)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"expected a (C, H, W) raster, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        c = self.data.shape[0]
        if self.band_names is None:
            self.band_names = DEFAULT_BANDS if c == len(DEFAULT_BANDS) else tuple(f"band{i}" for i in range(c))
        self.band_names = tuple(self.band_names)
        if len(self.band_names) != c:
            raise ValueError(f"{len(self.band_names)} band names for {c} channels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray) -> "MultispectralImage":
        return MultispectralImage(data, self.band_names)


REL_STD_FLOOR = 1e-12


def _check_mode(mode: str) -> None:
    if mode not in ("total", "channelwise"):
        raise ValueError(f"mode must be 'total' or 'channelwise', got {mode!r}")


def standardize(img: MultispectralImage, mode: str = "total") -> MultispectralImage:
    """Shift and scale to zero mean and unit (population) standard deviation."""
    _check_mode(mode)
    x = img.data
    axes = None if mode == "total" else (1, 2)
    centered = x - x.mean(axis=axes, keepdims=True)
    # second pass removes the rounding error of the first mean, which matters
    # when the spread is tiny compared to the offset
    centered -= centered.mean(axis=axes, keepdims=True)
    std = centered.std(axis=axes, keepdims=True)
    # a spread at the level of float rounding carries no signal
    scale = np.abs(x).max(axis=axes, keepdims=True)
    if np.any(std <= REL_STD_FLOOR * scale):
        raise DegenerateImageError(f"zero variance in {mode} standardization")
    return img.replace(centered / std)


def _equalize(values: np.ndarray) -> np.ndarray:
    """Map values through their empirical CDF onto [-1, 1].

    cdf(v) counts values <= v, so tied values share the CDF of the tie group;
    the minimum maps to -1 and the maximum to +1.
    """
    flat = values.ravel()
    n = flat.size
    sorted_vals = np.sort(flat)
    cdf = np.searchsorted(sorted_vals, flat, side="right")
    cdf_min = np.searchsorted(sorted_vals, sorted_vals[0], side="right")
    if cdf_min == n:
        raise DegenerateImageError("constant values cannot be equalized")
    out = (cdf - cdf_min) / (n - cdf_min)
    return (2.0 * out - 1.0).reshape(values.shape)


def hist_equalize(img: MultispectralImage, mode: str = "total") -> MultispectralImage:
    """Global histogram equalization onto the closed range [-1, 1]."""
    _check_mode(mode)
    if mode == "total":
        return img.replace(_equalize(img.data))
    return img.replace(np.stack([_equalize(ch) for ch in img.data]))


def normalize(img: MultispectralImage, method: str) -> MultispectralImage:
    """Apply one of :data:`NORMALIZATIONS` by name."""
    if method == "total_standardization":
        return standardize(img, "total")
    if method == "channelwise_standardization":
        return standardize(img, "channelwise")
    if method == "total_histogram_equalization":
        return hist_equalize(img, "total")
    if method == "channelwise_histogram_equalization":
        return hist_equalize(img, "channelwise")
    raise ValueError(f"unknown normalization {method!r}; choose from {NORMALIZATIONS}")


@dataclass(frozen=True)
class AugmentPolicy:
    """Training-time augmentation probabilities.

    Blur strength is the Gaussian kernel standard deviation in pixels.
    """

    flip_prob: float = 0.25
    rotate: bool = True
    blur_prob: float = 0.10
    blur_strength_range: tuple[float, float] = (3.0, 8.0)
    channel_dropout_prob: float = 0.0
    max_dropped_channels: int = 3

    def __post_init__(self) -> None:
        for name in ("flip_prob", "blur_prob", "channel_dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.blur_strength_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"invalid blur range {self.blur_strength_range}")
        if self.max_dropped_channels < 1:
            raise ValueError("max_dropped_channels must be at least 1")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(flip_prob=0.0, rotate=False, blur_prob=0.0, channel_dropout_prob=0.0)

    def validate_for(self, shape: tuple[int, int, int]) -> None:
        c, h, w = shape
        if self.blur_strength_range[1] >= min(h, w):
            raise ValueError("blur strength must stay below the image size")
        if self.channel_dropout_prob > 0 and self.max_dropped_channels >= c:
            raise ValueError("max_dropped_channels must be smaller than the channel count")


def augment_train(img: MultispectralImage, policy: AugmentPolicy, rng_seed) -> MultispectralImage:
    """Random flip, rotation, blur and channel dropout; deterministic in ``rng_seed``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    policy.validate_for(img.shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    x = img.data
    # Draw every random number unconditionally so the stream layout does not
    # depend on which branches fire.
    u_flip, flip_axis = rng.random(), int(rng.integers(2))
    angle = rng.uniform(0.0, 360.0)
    u_blur, strength = rng.random(), rng.uniform(*policy.blur_strength_range)
    u_drop = rng.random()
    n_drop = int(rng.integers(1, policy.max_dropped_channels + 1))
    dropped = rng.permutation(x.shape[0])[:n_drop]

    if u_flip < policy.flip_prob:
        x = np.flip(x, axis=1 + flip_axis)
    if policy.rotate:
        x = ndimage.rotate(x, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
    if u_blur < policy.blur_prob:
        x = ndimage.gaussian_filter(x, sigma=(0.0, strength, strength), mode="reflect", truncate=3.0)
    if u_drop < policy.channel_dropout_prob:
        x = np.array(x, copy=True)
        x[dropped] = 0.0
    return img.replace(np.ascontiguousarray(x))


def dihedral_variants(img: MultispectralImage) -> list[MultispectralImage]:
    """The 8 right-angle rotations/mirrorings of a square image.

    Order: rotations by 0, 90, 180, 270 degrees counter-clockwise, then the
    same four rotations of the left-right mirrored image. Index 0 is the
    original.
    """
    c, h, w = img.shape
    if h != w:
        raise ValueError(f"dihedral variants need a square image, got {h}x{w}")
    mirrored = np.flip(img.data, axis=2)
    out = [img.replace(np.rot90(img.data, k, axes=(1, 2))) for k in range(4)]
    out += [img.replace(np.rot90(mirrored, k, axes=(1, 2))) for k in range(4)]
    return out


def save_image(img: MultispectralImage, path: str | Path) -> None:
    """Store raster and band names in a compressed ``.npz`` container."""
    np.savez_compressed(path, data=img.data.astype(np.float32), band_names=np.array(img.band_names))


def load_image(path: str | Path) -> MultispectralImage:
    with np.load(path) as f:
        return MultispectralImage(f["data"].astype(float), tuple(str(b) for b in f["band_names"]))
