"""Procedural toy facial-expression dataset.

Each class is a parametric face glyph: mouth curvature, brow angle and
eye openness vary per class, with optional per-sample jitter on top.
Landmark heatmaps come from the generator's own keypoint geometry, so
the cross-attention stream has ground truth to look at.  Pixel values
stay inside [0.1, 0.95] so downstream brightness attenuation plus noise
does not saturate the [0,1] clamp.

Per-sample randomness is keyed by (seed, index): content is independent
of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ConfigError, DataError
from . import fileio

_BACKGROUND = 0.2
_FACE_RGB = (0.62, 0.55, 0.50)
_LO, _HI = 0.1, 0.95


@dataclass
class ToySpec:
    num_classes: int = 7
    image_size: int = 32
    train_count: int = 2000
    test_count: int = 500
    seed: int = 0
    jitter: float = 0.15

    def validate(self) -> None:
        if not (2 <= self.num_classes <= 8):
            raise ConfigError("num_classes must be in [2, 8]")
        if self.image_size < 16:
            raise ConfigError("image_size < 16: glyphs unresolvable")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("sample counts must be positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be >= 0")


@dataclass
class Dataset:
    images: np.ndarray            # [N, 3, S, S] clean
    landmarks: np.ndarray         # [N, 1, S, S]
    labels: np.ndarray            # [N] int64
    num_classes: int
    image_size: int
    udc: Optional[np.ndarray] = None   # [N, 3, S, S] degraded counterpart
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.labels.shape[0]


def _coprime_step(k: int, m: int) -> int:
    while math.gcd(k, m) != 1:
        k += 1
    return k


def class_prototype(label: int, num_classes: int) -> Dict[str, float]:
    """Deterministic glyph parameters for a class centroid.

    Three articulation axes vary across classes in decorrelated orders so
    no single feature carries all the label information.
    """
    m = num_classes
    lin = lambda lo, hi, i: lo + (hi - lo) * (i / (m - 1) if m > 1 else 0.0)
    p2 = (label * _coprime_step(3, m)) % m
    p3 = (label * _coprime_step(5, m)) % m
    return {
        "mouth_curve": lin(-0.9, 0.9, label),
        "brow_angle": lin(-0.55, 0.55, p2),
        "eye_open": lin(0.05, 0.13, p3),
    }


def sample_params(seed: int, index: int, num_classes: int,
                  jitter: float) -> Dict[str, float]:
    """Full jittered glyph parameterization of sample ``index``.

    The class is ``index % num_classes`` (balanced within one sample by
    construction).  All draws come from an RNG keyed by (seed, index).
    The returned dict includes the five keypoints in face coordinates
    ([-1, 1] per axis), which the landmark heatmap marks.
    """
    label = index % num_classes
    proto = class_prototype(label, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    gap = 1.0 / max(num_classes - 1, 1)
    j = jitter
    p = {
        "label": label,
        "mouth_curve": proto["mouth_curve"] + rng.normal(0.0, 1.8 * gap * j),
        "brow_angle": proto["brow_angle"] + rng.normal(0.0, 1.1 * gap * j),
        "eye_open": proto["eye_open"] + rng.normal(0.0, 0.08 * gap * j),
        "eye_dx": 0.35 + rng.normal(0.0, 0.05 * j),
        "eye_y": -0.28 + rng.normal(0.0, 0.05 * j),
        "mouth_y": 0.42 + rng.normal(0.0, 0.05 * j),
        "face_rx": 0.80 + rng.normal(0.0, 0.04 * j),
        "face_ry": 0.90 + rng.normal(0.0, 0.04 * j),
        "tint": rng.normal(0.0, 0.04 * j, size=3),
    }
    p["eye_open"] = float(np.clip(p["eye_open"], 0.02, 0.2))
    p["brow_y"] = p["eye_y"] - 0.24
    p["keypoints"] = [
        (-p["eye_dx"], p["eye_y"]),
        (p["eye_dx"], p["eye_y"]),
        (-p["eye_dx"], p["brow_y"]),
        (p["eye_dx"], p["brow_y"]),
        (0.0, p["mouth_y"]),
    ]
    return p


def _segment_dist(xx, yy, x0, y0, x1, y1):
    vx, vy = x1 - x0, y1 - y0
    L2 = vx * vx + vy * vy
    t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(xx - (x0 + t * vx), yy - (y0 + t * vy))


def render_glyph(p: Dict, image_size: int) -> np.ndarray:
    """Rasterize one face glyph to a [3, S, S] image in the safe band."""
    S = image_size
    ax = np.linspace(-1.0, 1.0, S)
    xx, yy = np.meshgrid(ax, ax)          # yy grows downward with row index

    face = ((xx / p["face_rx"]) ** 2 + (yy / p["face_ry"]) ** 2) <= 1.0
    mono = np.zeros((S, S))

    # eyes: bright blobs whose vertical spread encodes openness
    for sx in (-1.0, 1.0):
        ex, ey = sx * p["eye_dx"], p["eye_y"]
        mono += 0.55 * np.exp(-(((xx - ex) ** 2) / (2 * 0.10 ** 2)
                                + ((yy - ey) ** 2) / (2 * p["eye_open"] ** 2)))

    # brows: dark slanted strokes, mirrored left/right
    th = p["brow_angle"]
    dx, dy = 0.16 * math.cos(th), 0.16 * math.sin(th)
    for sx in (-1.0, 1.0):
        cx, cy = sx * p["eye_dx"], p["brow_y"]
        d = _segment_dist(xx, yy, cx - dx, cy - sx * dy, cx + dx, cy + sx * dy)
        mono -= 0.50 * np.exp(-(d ** 2) / (2 * 0.035 ** 2))

    # mouth: dark parabolic stroke, curvature is the main class cue
    ts = np.linspace(-0.38, 0.38, 25)
    d = np.full((S, S), np.inf)
    for i in range(len(ts) - 1):
        x0, x1 = ts[i], ts[i + 1]
        y0 = p["mouth_y"] + p["mouth_curve"] * (x0 ** 2 - 0.05)
        y1 = p["mouth_y"] + p["mouth_curve"] * (x1 ** 2 - 0.05)
        d = np.minimum(d, _segment_dist(xx, yy, x0, y0, x1, y1))
    mono -= 0.55 * np.exp(-(d ** 2) / (2 * 0.045 ** 2))

    img = np.empty((3, S, S))
    tint = p.get("tint", np.zeros(3))
    for c in range(3):
        base = np.full((S, S), _BACKGROUND)
        base[face] = _FACE_RGB[c] + tint[c]
        img[c] = base + mono * face
    return np.clip(img, _LO, _HI)


def render_heatmap(keypoints, image_size: int) -> np.ndarray:
    """Sum of Gaussian bumps (sigma = S/16 px) at the keypoints, max 1."""
    S = image_size
    sigma = S / 16.0
    px = lambda u: (u + 1.0) * 0.5 * (S - 1)
    rows, cols = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    hm = np.zeros((S, S))
    for (x, y) in keypoints:
        hm += np.exp(-((cols - px(x)) ** 2 + (rows - px(y)) ** 2) / (2 * sigma ** 2))
    peak = hm.max()
    if peak > 0:
        hm = hm / peak
    return np.clip(hm, 0.0, 1.0)[None, :, :]


def _generate_split(spec: ToySpec, count: int, index_base: int) -> Dataset:
    S = spec.image_size
    images = np.empty((count, 3, S, S))
    heatmaps = np.empty((count, 1, S, S))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        p = sample_params(spec.seed, index_base + i, spec.num_classes, spec.jitter)
        images[i] = render_glyph(p, S)
        heatmaps[i] = render_heatmap(p["keypoints"], S)
        labels[i] = p["label"]
    meta = {"seed": int(spec.seed), "jitter": spec.jitter, "index_base": index_base}
    return Dataset(images=images, landmarks=heatmaps, labels=labels,
                   num_classes=spec.num_classes, image_size=S, meta=meta)


def generate(spec: ToySpec) -> Dict[str, Dataset]:
    """Build balanced train/test splits; test indices continue after train
    so the two splits never share a sample."""
    spec.validate()
    return {
        "train": _generate_split(spec, spec.train_count, 0),
        "test": _generate_split(spec, spec.test_count, spec.train_count),
    }


def nearest_centroid_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of a nearest-class-centroid classifier in raw pixel space."""
    classes = np.unique(labels)
    cents = np.stack([images[labels == c].reshape(np.sum(labels == c), -1).mean(axis=0)
                      for c in classes])
    flat = images.reshape(len(labels), -1)
    d = ((flat[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == labels))


# ---------------------------------------------------------------------------
# persistence (directory format shared with the CLI)
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, directory: str) -> dict:
    udc = ds.udc if ds.udc is not None else ds.images
    meta = {
        "num_samples": len(ds),
        "num_classes": int(ds.num_classes),
        "image_size": int(ds.image_size),
    }
    meta.update(ds.meta)
    arrays = {
        "images": ds.images,
        "udc": udc,
        "landmarks": ds.landmarks,
        "labels": ds.labels.astype(np.float64),
    }
    return fileio.save_dataset_dir(directory, arrays, meta)


def load_dataset(directory: str) -> Dataset:
    arrays, manifest = fileio.load_dataset_dir(directory)
    labels = arrays["labels"]
    if labels.ndim != 1:
        raise DataError(f"{directory}: labels must be rank 1")
    n = labels.shape[0]
    for name in ("images", "udc", "landmarks"):
        if arrays[name].shape[0] != n:
            raise DataError(f"{directory}: {name} count != label count")
    meta = {k: v for k, v in manifest.items()
            if k not in ("files", "kind", "format_version",
                         "num_samples", "num_classes", "image_size")}
    return Dataset(images=arrays["images"].astype(np.float64),
                   landmarks=arrays["landmarks"].astype(np.float64),
                   labels=labels.astype(np.int64),
                   num_classes=int(manifest["num_classes"]),
                   image_size=int(manifest["image_size"]),
                   udc=arrays["udc"].astype(np.float64),
                   meta=meta)
