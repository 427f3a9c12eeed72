"""Label-restoration transformer.

Two streams over a 3-level pyramid (spatial S/4, S/8, S/16):

* a dynamic stream whose blocks are modulated per level by the compact
  prior vector Z (scale/shift of a per-channel spatial layer norm),
  followed by channel-wise transposed attention and a gated
  feed-forward, every sub-block residual;
* a landmark cross-attention stream: window-partitioned image features
  attend to landmark features (queries) with a relative position bias.

A small fusion transformer pools both streams at every level into three
tokens and emits class logits.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ShapeError
from .nn import ParamStore, apply_linear


def level_spatial(image_size: int, level: int) -> int:
    return image_size // (4 * 2 ** (level - 1))


def level_window(cfg: ModelConfig, image_size: int, level: int) -> int:
    return min(cfg.window, level_spatial(image_size, level))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_udcformer(store: ParamStore, cfg: ModelConfig, num_classes: int,
                   image_size: int) -> None:
    c1, c2, c3 = cfg.channels

    store.depthwise3x3("udc.stem.dw", 3)
    store.conv1x1("udc.stem.pw", 3, 16)
    store.conv1x1("udc.stem.s1.pw", 16, 24)
    store.depthwise3x3("udc.stem.s1.dw", 24)
    store.conv1x1("udc.stem.s2.pw", 24, c1)
    store.depthwise3x3("udc.stem.s2.dw", c1)
    store.conv1x1("udc.down1", c1, c2)
    store.conv1x1("udc.down2", c2, c3)

    for lvl, c in enumerate(cfg.channels, start=1):
        base = f"udc.level{lvl}"
        store.xavier(f"{base}.mod.scale.w", (cfg.epr_dim, c), cfg.epr_dim, c)
        store.constant(f"{base}.mod.scale.b", np.ones((1, c)))
        store.xavier(f"{base}.mod.shift.w", (cfg.epr_dim, c), cfg.epr_dim, c)
        store.constant(f"{base}.mod.shift.b", np.zeros((1, c)))
        hw = level_spatial(image_size, lvl) ** 2
        for k in range(1, cfg.blocks_per_level + 1):
            b = f"{base}.block{k}"
            for proj in ("wq", "wk", "wv", "wo"):
                store.conv1x1(f"{b}.attn.{proj}", c, c)
            for proj in ("dwq", "dwk", "dwv"):
                store.depthwise3x3(f"{b}.attn.{proj}", c)
            store.constant(f"{b}.attn.invtemp",
                           np.full((cfg.dmnet_heads,), 1.0 / hw))
            store.conv1x1(f"{b}.ffn.wc1", c, c)
            store.depthwise3x3(f"{b}.ffn.wd1", c)
            store.conv1x1(f"{b}.ffn.wc2", c, c)
            store.depthwise3x3(f"{b}.ffn.wd2", c)

        w = level_window(cfg, image_size, lvl)
        d = f"dil.level{lvl}"
        for proj in ("wq", "wk", "wv", "wo"):
            store.linear(f"{d}.{proj}", c, c, bias=False)
        store.constant(f"{d}.bias_table",
                       np.zeros(((2 * w - 1) ** 2, cfg.dil_heads)))
        store.linear(f"{d}.mlp.l0", c, 2 * c)
        store.linear(f"{d}.mlp.l1", 2 * c, c)

    for lvl, c in enumerate(cfg.channels, start=1):
        store.linear(f"head.embed{lvl}", 2 * c, cfg.fusion_dim)
    for proj in ("wq", "wk", "wv", "wo"):
        store.linear(f"head.msa.{proj}", cfg.fusion_dim, cfg.fusion_dim)
    store.linear("head.mlp.l0", cfg.fusion_dim, 2 * cfg.fusion_dim)
    store.linear("head.mlp.l1", 2 * cfg.fusion_dim, cfg.fusion_dim)
    store.linear("head.out", cfg.fusion_dim, num_classes)


# ---------------------------------------------------------------------------
# dynamic stream
# ---------------------------------------------------------------------------


def modulate(store: ParamStore, f: Tensor, z: Tensor, level: int) -> Tensor:
    """Scale/shift the spatially layer-normed feature map with the prior.

    ``f`` is [B, C, H, W]; normalization runs per channel over spatial
    positions, then scale = z @ W1 + b1 and shift = z @ W2 + b2 broadcast
    over space.
    """
    B, C, H, W = f.shape
    base = f"udc.level{level}.mod"
    if store[f"{base}.scale.w"].shape[1] != C:
        raise ShapeError(f"modulate: level {level} maps expect "
                         f"{store[f'{base}.scale.w'].shape[1]} channels, got {C}")
    scale = apply_linear(z, store, f"{base}.scale")
    shift = apply_linear(z, store, f"{base}.shift")
    fn = ad.reshape(f, (B, C, H * W))
    fn = ad.layer_norm(fn, axis=2)
    fn = ad.reshape(fn, (B, C, H, W))
    scale = ad.reshape(scale, (B, C, 1, 1))
    shift = ad.reshape(shift, (B, C, 1, 1))
    return ad.add(ad.mul(fn, scale), shift)


def _qkv_map(store: ParamStore, x: Tensor, prefix: str, tag: str) -> Tensor:
    h = ad.conv1x1(x, store[f"{prefix}.w{tag}"])
    return ad.depthwise_conv3x3(h, store[f"{prefix}.dw{tag}"])


def dmnet(store: ParamStore, f_mod: Tensor, f_in: Tensor, level: int,
          block: int, heads: int = 1) -> Tensor:
    """Channel-wise transposed attention; residual adds the block input.

    Attention is over channels: the map is [C/h, C/h] per head, built
    from Q/K/V projections (1x1 conv + depthwise 3x3) of the modulated
    features, tempered by a learnable reciprocal temperature.
    """
    B, C, H, W = f_mod.shape
    if C % heads:
        raise ShapeError(f"dmnet: {C} channels not divisible by {heads} heads")
    prefix = f"udc.level{level}.block{block}.attn"
    q = _qkv_map(store, f_mod, prefix, "q")
    k = _qkv_map(store, f_mod, prefix, "k")
    v = _qkv_map(store, f_mod, prefix, "v")
    ch = C // heads
    hw = H * W
    kh = ad.reshape(k, (B, heads, ch, hw))
    qh = ad.transpose(ad.reshape(q, (B, heads, ch, hw)), (0, 1, 3, 2))
    vh = ad.transpose(ad.reshape(v, (B, heads, ch, hw)), (0, 1, 3, 2))
    invtemp = ad.reshape(store[f"{prefix}.invtemp"], (1, heads, 1, 1))
    scores = ad.mul(ad.matmul(kh, qh), invtemp)
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(vh, attn)
    out = ad.reshape(ad.transpose(out, (0, 1, 3, 2)), (B, C, H, W))
    out = ad.conv1x1(out, store[f"{prefix}.wo"])
    return ad.add(f_in, out)


def dgnet(store: ParamStore, f: Tensor, level: int, block: int) -> Tensor:
    """Gated feed-forward: GELU(conv branch) * conv branch, residual."""
    prefix = f"udc.level{level}.block{block}.ffn"
    b1 = ad.depthwise_conv3x3(ad.conv1x1(f, store[f"{prefix}.wc1"]),
                              store[f"{prefix}.wd1"])
    b2 = ad.depthwise_conv3x3(ad.conv1x1(f, store[f"{prefix}.wc2"]),
                              store[f"{prefix}.wd2"])
    return ad.add(f, ad.mul(ad.gelu(b1), b2))


def dt_block(store: ParamStore, f: Tensor, z: Tensor, level: int, block: int,
             heads: int = 1) -> Tensor:
    """modulate -> channel attention (+f) -> gated feed-forward (+).

    Residuals bypass the modulation entirely, so a block with all-zero
    weights is the identity map.
    """
    f2 = dmnet(store, modulate(store, f, z, level), f, level, block, heads)
    return dgnet(store, f2, level, block)


# ---------------------------------------------------------------------------
# window partition / merge
# ---------------------------------------------------------------------------


def _partition_batched(x: Tensor, window: int) -> Tensor:
    """[B, D, H, W] -> [B, nW, window*window, D]."""
    B, D, H, W = x.shape
    if H % window or W % window:
        raise ShapeError(f"window_partition: {H}x{W} not divisible by {window}")
    nh, nw = H // window, W // window
    t = ad.reshape(x, (B, D, nh, window, nw, window))
    t = ad.transpose(t, (0, 2, 4, 3, 5, 1))
    return ad.reshape(t, (B, nh * nw, window * window, D))


def _merge_batched(wins: Tensor, window: int, H: int, W: int) -> Tensor:
    """Inverse of ``_partition_batched``."""
    B, nwin, M, D = wins.shape
    nh, nw = H // window, W // window
    t = ad.reshape(wins, (B, nh, nw, window, window, D))
    t = ad.transpose(t, (0, 5, 1, 3, 2, 4))
    return ad.reshape(t, (B, D, H, W))


def window_partition(x: Tensor, window: int) -> Tensor:
    """[D, H, W] -> stacked windows [nW, window*window, D]."""
    if x.ndim != 3:
        raise ShapeError(f"window_partition: expected [D, H, W], got {x.shape}")
    D, H, W = x.shape
    out = _partition_batched(ad.reshape(x, (1, D, H, W)), window)
    nwin = out.shape[1]
    return ad.reshape(out, (nwin, window * window, D))


def window_merge(wins: Tensor, window: int, H: int, W: int) -> Tensor:
    """Inverse of ``window_partition``; bit-exact round trip."""
    if wins.ndim != 3:
        raise ShapeError(f"window_merge: expected [nW, M, D], got {wins.shape}")
    nwin, M, D = wins.shape
    if M != window * window or nwin != (H // window) * (W // window):
        raise ShapeError("window_merge: window geometry mismatch")
    out = _merge_batched(ad.reshape(wins, (1, nwin, M, D)), window, H, W)
    return ad.reshape(out, (D, H, W))


def relative_bias_index(window: int) -> np.ndarray:
    """[M, M] lookup indices into the (2w-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


# ---------------------------------------------------------------------------
# landmark cross-attention stream
# ---------------------------------------------------------------------------


def _pool_to(x: Tensor, side: int) -> Tensor:
    """Spatial mean-pool [B, D, H, H] down to [B, D, side, side]."""
    B, D, H, W = x.shape
    if H == side:
        return x
    f = H // side
    t = ad.reshape(x, (B, D, side, f, side, f))
    return ad.mean(t, axis=(3, 5))


def _rowwise_linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    """Apply a [D, D'] map over the last axis of an arbitrary-rank tensor."""
    lead = x.shape[:-1]
    d = x.shape[-1]
    flat = ad.reshape(x, (int(np.prod(lead)), d))
    out = apply_linear(flat, store, name)
    return ad.reshape(out, lead + (out.shape[-1],))


def mhca(store: ParamStore, x_flm: Tensor, x_udc: Tensor, level: int,
         heads: int, window: int) -> Tensor:
    """Window cross-attention: landmarks give queries, image windows
    give keys/values.  ``x_flm`` is [B, M, D]; ``x_udc`` is [B, nW, M, D].
    Returns the attended values per window, before any residual."""
    B, nwin, M, D = x_udc.shape
    if D % heads:
        raise ShapeError(f"mhca: {D} dim not divisible by {heads} heads")
    dh = D // heads
    d = f"dil.level{level}"

    def split_heads(t: Tensor, lead_windows: bool) -> Tensor:
        if lead_windows:
            t = ad.reshape(t, (B, nwin, M, heads, dh))
            return ad.transpose(t, (0, 1, 3, 2, 4))
        t = ad.reshape(t, (B, M, heads, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (B, 1, heads, M, dh))

    q = split_heads(_rowwise_linear(x_flm, store, f"{d}.wq"), lead_windows=False)
    ones = ad.constant(np.ones((1, nwin, 1, 1, 1)))
    q = ad.mul(q, ones)
    k = split_heads(_rowwise_linear(x_udc, store, f"{d}.wk"), lead_windows=True)
    v = split_heads(_rowwise_linear(x_udc, store, f"{d}.wv"), lead_windows=True)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 2, 4, 3))),
                      1.0 / np.sqrt(dh))
    idx = relative_bias_index(window).reshape(-1)
    onehot = np.zeros((idx.size, (2 * window - 1) ** 2))
    onehot[np.arange(idx.size), idx] = 1.0
    bias = ad.matmul(ad.constant(onehot), store[f"{d}.bias_table"])
    bias = ad.transpose(ad.reshape(bias, (M, M, heads)), (2, 0, 1))
    bias = ad.reshape(bias, (1, 1, heads, M, M))
    attn = ad.softmax(ad.add(scores, bias), axis=-1)
    out = ad.matmul(attn, v)
    out = ad.transpose(out, (0, 1, 3, 2, 4))
    out = ad.reshape(out, (B, nwin, M, D))
    return _rowwise_linear(out, store, f"{d}.wo")


def dil_level(store: ParamStore, f_udc: Tensor, f_flm: Tensor, level: int,
              cfg: ModelConfig, image_size: int) -> Tensor:
    """One cross-fusion encoder level: MHCA + residual, then MLP(LN) + residual."""
    B, D, H, W = f_udc.shape
    w = level_window(cfg, image_size, level)
    x = _partition_batched(f_udc, w)                   # [B, nW, M, D]
    flm = _pool_to(f_flm, w)                           # [B, D, w, w]
    flm_tokens = ad.transpose(ad.reshape(flm, (B, D, w * w)), (0, 2, 1))
    o = mhca(store, flm_tokens, x, level, cfg.dil_heads, w)
    x1 = ad.add(x, o)
    h = ad.layer_norm(x1, axis=-1)
    h = _rowwise_linear(h, store, f"dil.level{level}.mlp.l0")
    h = ad.gelu(h)
    h = _rowwise_linear(h, store, f"dil.level{level}.mlp.l1")
    x2 = ad.add(x1, h)
    return _merge_batched(x2, w, H, W)


# ---------------------------------------------------------------------------
# fusion head and full forward
# ---------------------------------------------------------------------------


def _msa(store: ParamStore, x: Tensor, heads: int) -> Tensor:
    """Standard multi-head self-attention over [B, T, D] tokens."""
    B, T, D = x.shape
    dh = D // heads

    def proj(tag: str) -> Tensor:
        t = _rowwise_linear(x, store, f"head.msa.{tag}")
        t = ad.reshape(t, (B, T, heads, dh))
        return ad.transpose(t, (0, 2, 1, 3))

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, D))
    return _rowwise_linear(out, store, "head.msa.wo")


def fusion_head(store: ParamStore, feats: List[Tensor], dils: List[Tensor],
                cfg: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Pool both streams per level, fuse with one transformer block,
    return (logits, penultimate features)."""
    tokens = []
    for lvl, (f, o) in enumerate(zip(feats, dils), start=1):
        pooled = ad.concat([ad.mean(f, axis=(2, 3)), ad.mean(o, axis=(2, 3))], axis=1)
        emb = apply_linear(pooled, store, f"head.embed{lvl}")
        B, D = emb.shape
        tokens.append(ad.reshape(emb, (B, 1, D)))
    x = ad.concat(tokens, axis=1)                      # [B, 3, D]
    x1 = ad.add(x, _msa(store, x, cfg.fusion_heads))
    h = ad.layer_norm(x1, axis=-1)
    h = _rowwise_linear(h, store, "head.mlp.l0")
    h = ad.gelu(h)
    h = _rowwise_linear(h, store, "head.mlp.l1")
    x2 = ad.add(x1, h)
    pooled = ad.mean(x2, axis=1)                       # [B, D] penultimate
    logits = apply_linear(pooled, store, "head.out")
    return logits, pooled


def forward_features(store: ParamStore, x: Tensor, z: Tensor,
                     landmarks: List[Tensor], cfg: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Run the full two-stream stack; returns (logits, penultimate)."""
    h = ad.depthwise_conv3x3(x, store["udc.stem.dw"])
    h = ad.gelu(ad.conv1x1(h, store["udc.stem.pw"]))
    h = ad.gelu(ad.depthwise_conv3x3(
        ad.conv1x1(h, store["udc.stem.s1.pw"], stride=2), store["udc.stem.s1.dw"]))
    h = ad.gelu(ad.depthwise_conv3x3(
        ad.conv1x1(h, store["udc.stem.s2.pw"], stride=2), store["udc.stem.s2.dw"]))

    image_size = x.shape[2]
    feats, dils = [], []
    for lvl in range(1, 4):
        for k in range(1, cfg.blocks_per_level + 1):
            h = dt_block(store, h, z, lvl, k, cfg.dmnet_heads)
        o = dil_level(store, h, landmarks[lvl - 1], lvl, cfg, image_size)
        feats.append(h)
        dils.append(o)
        if lvl < 3:
            h = ad.conv1x1(h, store[f"udc.down{lvl}"], stride=2)
    return fusion_head(store, feats, dils, cfg)


def classify(store: ParamStore, x: Tensor, z: Tensor, landmarks: List[Tensor],
             cfg: ModelConfig, x_s2: Optional[Tensor] = None) -> Tensor:
    """Class logits for a batch.  ``x_s2`` is accepted for interface
    parity with the two-stage drivers; the conditioning it carries enters
    through the chain that produced ``z``, so it is unused here."""
    logits, _ = forward_features(store, x, z, landmarks, cfg)
    return logits


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax with lowest-index tie-break."""
    return np.argmax(logits, axis=-1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    if logits.shape[0] == 0:
        raise ShapeError("cross_entropy: empty batch")
    return ad.softmax_cross_entropy(logits, labels)
