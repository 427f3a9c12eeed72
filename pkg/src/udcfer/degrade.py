"""Parametric under-display-camera degradation.

Fixed pipeline per image: multiplicative brightness attenuation, then
separable Gaussian blur with reflect padding, then additive Gaussian
noise keyed by (seed, sample_index), then a [0,1] clamp.  Identity
parameters leave the image byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError


@dataclass
class DegradeParams:
    gamma: float = 0.6          # brightness attenuation in (0, 1]
    blur_sigma: float = 1.0     # Gaussian PSF std, pixels
    noise_sigma: float = 0.05   # additive noise std
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must be in (0, 1]")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur_sigma and noise_sigma must be >= 0")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, radius ceil(3*sigma)."""
    r = math.ceil(3.0 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _blur_reflect(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a [C, H, W] image with reflect padding."""
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    out = np.pad(image, ((0, 0), (r, r), (0, 0)), mode="reflect")
    H = image.shape[1]
    out = sum(k[i] * out[:, i:i + H, :] for i in range(len(k)))
    W = image.shape[2]
    out = np.pad(out, ((0, 0), (0, 0), (r, r)), mode="reflect")
    out = sum(k[i] * out[:, :, i:i + W] for i in range(len(k)))
    return out


def degrade_image(image: np.ndarray, params: DegradeParams,
                  sample_index: int) -> np.ndarray:
    params.validate()
    out = image
    if params.gamma != 1.0:
        out = out * params.gamma
    if params.blur_sigma > 0.0:
        out = _blur_reflect(out, params.blur_sigma)
    if params.noise_sigma > 0.0:
        rng = np.random.default_rng(
            np.random.SeedSequence([int(params.seed), int(sample_index)]))
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def degrade_dataset(ds: Dataset, params: DegradeParams) -> Dataset:
    """Pair every sample with its degraded counterpart.

    Sample index for the noise key is the position within the split plus
    any ``index_base`` recorded in the dataset meta, so the train and
    test splits draw disjoint noise.
    """
    params.validate()
    base = int(ds.meta.get("index_base", 0))
    udc = np.empty_like(ds.images)
    for i in range(len(ds)):
        udc[i] = degrade_image(ds.images[i], params, base + i)
    meta = dict(ds.meta)
    meta["degrade"] = {"gamma": params.gamma, "blur_sigma": params.blur_sigma,
                       "noise_sigma": params.noise_sigma, "seed": int(params.seed)}
    return Dataset(images=ds.images, landmarks=ds.landmarks, labels=ds.labels,
                   num_classes=ds.num_classes, image_size=ds.image_size,
                   udc=udc, meta=meta)
