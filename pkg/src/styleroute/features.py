"""Deterministic surrogate feature extractor for style images.

Stands in for a pretrained vision backbone with a four-level statistics
stack computed from an RGB raster. All statistics are defined on the image
scaled to [0, 1] and are exactly reproducible:

level 1 ``channel_mean``      per-channel means (3 values)
level 2 ``grad_orientation``  gradient-orientation histogram of the luma
                              plane: gradients via central differences with
                              one-sided differences at borders (numpy
                              ``gradient`` convention), 8 equal angle bins
                              over [-pi, pi) with angle pi wrapping to -pi,
                              each pixel weighted by gradient magnitude,
                              normalized by pixel count (8 values)
level 3 ``radial_energy``     for each scale s in {1, 2}: block-mean
                              downsample the luma plane by s, take the 2-D
                              DFT power spectrum |F|^2 / n_pixels, drop the
                              DC term, sum power into 4 equal-width radial
                              frequency bins over (0, r_max] where r_max is
                              the largest grid frequency radius, and apply
                              log1p (2 x 4 = 8 values)
level 4 ``luma_patch``        4 x 4 block-mean downsample of the luma plane,
                              flattened row-major (16 values)

Luma is the Rec.601 weighting 0.299 R + 0.587 G + 0.114 B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ExtractorSpec", "FeatureStack", "extract_features", "luma"]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
LEVEL_NAMES = ("channel_mean", "grad_orientation", "radial_energy", "luma_patch")


@dataclass(frozen=True)
class ExtractorSpec:
    """Shape contract of the surrogate extractor."""

    image_size: int = 16
    orientation_bins: int = 8
    radial_bins: int = 4
    radial_scales: tuple[int, ...] = (1, 2)
    patch_grid: int = 4

    @property
    def level_count(self) -> int:
        return 4

    @property
    def level_widths(self) -> tuple[int, ...]:
        return (
            3,
            self.orientation_bins,
            self.radial_bins * len(self.radial_scales),
            self.patch_grid * self.patch_grid,
        )

    @property
    def width(self) -> int:
        return sum(self.level_widths)


@dataclass
class FeatureStack:
    """One 1-D statistics vector per extractor level."""

    levels: list[np.ndarray] = field(default_factory=list)

    def concat(self) -> np.ndarray:
        return np.concatenate(self.levels)

    @property
    def width(self) -> int:
        return sum(level.size for level in self.levels)


def luma(image01: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * image01[..., 0] + g * image01[..., 1] + b * image01[..., 2]


def _block_mean(plane: np.ndarray, factor: int) -> np.ndarray:
    h, w = plane.shape
    if h % factor or w % factor:
        raise ValueError(f"plane of shape {plane.shape} not divisible by {factor}")
    return plane.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _orientation_histogram(plane: np.ndarray, bins: int) -> np.ndarray:
    gy, gx = np.gradient(plane)
    magnitude = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)
    idx = np.floor((theta + np.pi) / (2.0 * np.pi) * bins).astype(np.intp) % bins
    hist = np.zeros(bins)
    np.add.at(hist, idx.reshape(-1), magnitude.reshape(-1))
    return hist / plane.size


def _radial_energy(plane: np.ndarray, bins: int) -> np.ndarray:
    h, w = plane.shape
    power = np.abs(np.fft.fft2(plane)) ** 2 / plane.size
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.hypot(fy, fx)
    r_max = radius.max()
    energy = np.zeros(bins)
    edges = np.linspace(0.0, r_max, bins + 1)
    for b in range(bins):
        mask = (radius > edges[b]) & (radius <= edges[b + 1])
        energy[b] = power[mask].sum()
    return np.log1p(energy)


def extract_features(image: np.ndarray, spec: ExtractorSpec | None = None) -> FeatureStack:
    """Compute the four-level statistics stack for one RGB image.

    Accepts uint8 in [0, 255] or float in [0, 1]; shape must be exactly
    (image_size, image_size, 3) per the extractor spec.
    """
    spec = spec or ExtractorSpec()
    image = np.asarray(image)
    expected = (spec.image_size, spec.image_size, 3)
    if image.shape != expected:
        raise ValueError(f"unsupported image size: got {image.shape}, extractor expects {expected}")
    if image.dtype == np.uint8:
        img01 = image.astype(np.float64) / 255.0
    else:
        img01 = image.astype(np.float64)

    y = luma(img01)
    levels = [
        img01.mean(axis=(0, 1)),
        _orientation_histogram(y, spec.orientation_bins),
        np.concatenate([_radial_energy(_block_mean(y, s), spec.radial_bins) for s in spec.radial_scales]),
        _block_mean(y, spec.image_size // spec.patch_grid).reshape(-1),
    ]
    return FeatureStack(levels=levels)
