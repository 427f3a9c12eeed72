"""Prior-extraction networks.

Two MLPs with identical structure except for the first-layer input
width: the stage-1 net condenses (label embedding, image feature) into
the compact prior vector Z, the stage-2 net maps the image feature
alone to the conditional vector that steers denoising.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .nn import ParamStore, apply_linear


def _layer_widths(n_in: int, hidden: int, n_out: int, layers: int) -> list:
    dims = [n_in] + [hidden] * (layers - 1) + [n_out]
    return list(zip(dims[:-1], dims[1:]))


def _init_mlp(store: ParamStore, prefix: str, n_in: int, hidden: int,
              n_out: int, layers: int) -> None:
    for i, (a, b) in enumerate(_layer_widths(n_in, hidden, n_out, layers)):
        store.linear(f"{prefix}.l{i}", a, b)


def _run_mlp(x: Tensor, store: ParamStore, prefix: str, layers: int) -> Tensor:
    for i in range(layers):
        x = apply_linear(x, store, f"{prefix}.l{i}")
        if i < layers - 1:
            x = ad.gelu(x)
    return x


def init_prior_nets(store: ParamStore, cfg: ModelConfig) -> None:
    _init_mlp(store, "fpen.s1", cfg.d_label + cfg.d_image,
              cfg.fpen_hidden, cfg.epr_dim, cfg.fpen_layers)
    _init_mlp(store, "fpen.s2", cfg.d_image,
              cfg.fpen_hidden, cfg.epr_dim, cfg.fpen_layers)


def fpen_s1(store: ParamStore, label_feat: Tensor, image_feat: Tensor,
            layers: int = 4) -> Tensor:
    """Z = MLP(concat(label features, image features)); [B, C]."""
    x = ad.concat([label_feat, image_feat], axis=1)
    return _run_mlp(x, store, "fpen.s1", layers)


def fpen_s2(store: ParamStore, image_feat: Tensor, layers: int = 4) -> Tensor:
    """Conditional vector from the image feature alone; [B, C]."""
    return _run_mlp(image_feat, store, "fpen.s2", layers)


def epr_norm(z: Tensor) -> Tensor:
    """Normalized view of the prior (rows sum to 1)."""
    return ad.softmax(z, axis=-1)
