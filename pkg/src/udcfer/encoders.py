"""Trainable encoders: label embedding, image conditioning vector, and
the multi-scale landmark feature path.

All three are small convolution/embedding stacks registered into a
shared ``ParamStore`` under the ``enc.*`` checkpoint namespaces.
"""

from __future__ import annotations

from typing import List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .nn import ParamStore, apply_linear


def _stage(store: ParamStore, prefix: str, c_in: int, c_out: int) -> None:
    """Strided downsample stage: 1x1 conv (stride 2) + depthwise 3x3."""
    store.conv1x1(f"{prefix}.pw", c_in, c_out)
    store.depthwise3x3(f"{prefix}.dw", c_out)


def _run_stage(x: Tensor, store: ParamStore, prefix: str, stride: int = 2) -> Tensor:
    x = ad.conv1x1(x, store[f"{prefix}.pw"], stride=stride)
    x = ad.depthwise_conv3x3(x, store[f"{prefix}.dw"])
    return ad.gelu(x)


# ---------------------------------------------------------------------------
# label encoder
# ---------------------------------------------------------------------------


def init_label_encoder(store: ParamStore, num_classes: int, d_label: int) -> None:
    store.xavier("enc.label.table", (num_classes, d_label), num_classes, d_label)


def encode_label(store: ParamStore, labels: np.ndarray, num_classes: int) -> Tensor:
    """Row lookup as a one-hot matmul so the table gets gradients."""
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError("labels must be a rank-1 int array")
    if y.min() < 0 or y.max() >= num_classes:
        raise ShapeError(f"label out of range for {num_classes} classes")
    onehot = np.zeros((y.shape[0], num_classes))
    onehot[np.arange(y.shape[0]), y] = 1.0
    return ad.matmul(ad.constant(onehot), store["enc.label.table"])


# ---------------------------------------------------------------------------
# image encoder (conditioning vector for the prior nets)
# ---------------------------------------------------------------------------


def init_image_encoder(store: ParamStore, cfg: ModelConfig) -> None:
    store.depthwise3x3("enc.image.stem.dw", 3)
    store.conv1x1("enc.image.stem.pw", 3, 16)
    _stage(store, "enc.image.s1", 16, 32)
    _stage(store, "enc.image.s2", 32, 64)
    store.linear("enc.image.proj", 64, cfg.d_image)


def encode_image(store: ParamStore, x: Tensor) -> Tensor:
    """[B, 3, S, S] -> [B, d_image]."""
    h = ad.depthwise_conv3x3(x, store["enc.image.stem.dw"])
    h = ad.gelu(ad.conv1x1(h, store["enc.image.stem.pw"]))
    h = _run_stage(h, store, "enc.image.s1")
    h = _run_stage(h, store, "enc.image.s2")
    h = ad.mean(h, axis=(2, 3))
    return apply_linear(h, store, "enc.image.proj")


# ---------------------------------------------------------------------------
# landmark encoder (multi-scale features aligned with the classifier levels)
# ---------------------------------------------------------------------------


def init_landmark_encoder(store: ParamStore, cfg: ModelConfig) -> None:
    c1, c2, c3 = cfg.channels
    store.depthwise3x3("enc.flm.stem.dw", 1)
    store.conv1x1("enc.flm.stem.pw", 1, 16)
    _stage(store, "enc.flm.s1", 16, 24)       # S -> S/2
    _stage(store, "enc.flm.s2", 24, c1)       # S/2 -> S/4, level-1 dim
    _stage(store, "enc.flm.s3", c1, c2)       # S/4 -> S/8, level-2 dim
    _stage(store, "enc.flm.s4", c2, c3)       # S/8 -> S/16, level-3 dim


def encode_landmarks(store: ParamStore, hm: Tensor) -> List[Tensor]:
    """[B, 1, S, S] -> per-level features [B, C_l, S/4 S/8 S/16]."""
    h = ad.depthwise_conv3x3(hm, store["enc.flm.stem.dw"])
    h = ad.gelu(ad.conv1x1(h, store["enc.flm.stem.pw"]))
    h = _run_stage(h, store, "enc.flm.s1")
    f1 = _run_stage(h, store, "enc.flm.s2")
    f2 = _run_stage(f1, store, "enc.flm.s3")
    f3 = _run_stage(f2, store, "enc.flm.s4")
    return [f1, f2, f3]
