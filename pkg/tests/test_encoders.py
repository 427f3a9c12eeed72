"""Encoder contracts: shapes, batch independence, gradient flow."""

import numpy as np
import pytest

from udcfer import autodiff as ad
from udcfer.config import ModelConfig
from udcfer.encoders import (encode_image, encode_label, encode_landmarks,
                             init_image_encoder, init_label_encoder,
                             init_landmark_encoder)
from udcfer.errors import ShapeError
from udcfer.nn import ParamStore


def _cfg():
    return ModelConfig(d_label=12, d_image=10, epr_dim=8, channels=(6, 8, 12),
                       blocks_per_level=1, window=4, dil_heads=2, dmnet_heads=1,
                       fusion_dim=16, fusion_heads=2, fpen_hidden=16,
                       fpen_layers=2, time_dim=8, denoiser_hidden=16)


# ---------------------------------------------------------------- label

def test_label_lookup_matches_table_rows():
    store = ParamStore(seed=0)
    init_label_encoder(store, num_classes=5, d_label=12)
    table = store["enc.label.table"].data
    out = encode_label(store, np.array([3, 0, 3, 4]), 5)
    assert np.array_equal(out.data, table[[3, 0, 3, 4]])


def test_label_gradient_counts_row_usage():
    store = ParamStore(seed=0)
    init_label_encoder(store, num_classes=4, d_label=3)
    emb = encode_label(store, np.array([2, 2, 0]), 4)
    grads = ad.backward(ad.tsum(emb), dict(store.items()))
    g = grads["enc.label.table"].data
    # d(sum)/d(table[r]) = number of batch rows that used r
    assert np.allclose(g[2], 2.0) and np.allclose(g[0], 1.0)
    assert np.allclose(g[1], 0.0) and np.allclose(g[3], 0.0)


@pytest.mark.parametrize("labels", [np.array([0, 5]), np.array([-1, 0]),
                                    np.array([[0, 1]])])
def test_label_rejects_bad_input(labels):
    store = ParamStore(seed=0)
    init_label_encoder(store, num_classes=5, d_label=4)
    with pytest.raises(ShapeError):
        encode_label(store, labels, 5)


# ---------------------------------------------------------------- image

def test_image_encoder_shape():
    store = ParamStore(seed=1)
    init_image_encoder(store, _cfg())
    x = ad.constant(np.random.default_rng(0).uniform(0, 1, (5, 3, 16, 16)))
    out = encode_image(store, x)
    assert out.data.shape == (5, 10)


def test_image_encoder_rows_independent_of_batch_order():
    store = ParamStore(seed=1)
    init_image_encoder(store, _cfg())
    rng = np.random.default_rng(1)
    imgs = rng.uniform(0, 1, (4, 3, 16, 16))
    full = encode_image(store, ad.constant(imgs)).data
    perm = np.array([2, 0, 3, 1])
    swapped = encode_image(store, ad.constant(imgs[perm])).data
    assert np.array_equal(swapped, full[perm])


def test_image_encoder_zero_params_zero_output():
    store = ParamStore(seed=1)
    init_image_encoder(store, _cfg())
    for p in store.params.values():
        p.data[...] = 0.0
    x = ad.constant(np.random.default_rng(2).uniform(0, 1, (2, 3, 16, 16)))
    assert np.array_equal(encode_image(store, x).data, np.zeros((2, 10)))


def test_image_encoder_deterministic_init_and_forward():
    x = np.random.default_rng(3).uniform(0, 1, (3, 3, 16, 16))
    outs = []
    for _ in range(2):
        store = ParamStore(seed=7)
        init_image_encoder(store, _cfg())
        outs.append(encode_image(store, ad.constant(x)).data)
    assert np.array_equal(outs[0], outs[1])


def test_image_encoder_gradients_reach_all_params():
    store = ParamStore(seed=4)
    init_image_encoder(store, _cfg())
    x = ad.constant(np.random.default_rng(4).uniform(0, 1, (2, 3, 16, 16)))
    grads = ad.backward(ad.tsum(encode_image(store, x)), dict(store.items()))
    for name in store:
        assert name in grads
        assert np.any(grads[name].data != 0.0), name


# ---------------------------------------------------------------- landmarks

def test_landmark_pyramid_shapes():
    store = ParamStore(seed=2)
    init_landmark_encoder(store, _cfg())
    hm = ad.constant(np.random.default_rng(5).uniform(0, 1, (3, 1, 16, 16)))
    f1, f2, f3 = encode_landmarks(store, hm)
    assert f1.data.shape == (3, 6, 4, 4)
    assert f2.data.shape == (3, 8, 2, 2)
    assert f3.data.shape == (3, 12, 1, 1)


def test_landmark_pyramid_batch_order():
    store = ParamStore(seed=2)
    init_landmark_encoder(store, _cfg())
    rng = np.random.default_rng(6)
    hm = rng.uniform(0, 1, (4, 1, 16, 16))
    full = encode_landmarks(store, ad.constant(hm))
    perm = np.array([3, 1, 0, 2])
    swapped = encode_landmarks(store, ad.constant(hm[perm]))
    for a, b in zip(full, swapped):
        assert np.array_equal(b.data, a.data[perm])


def test_landmark_levels_track_config_channels():
    cfg = _cfg()
    cfg.channels = (4, 10, 14)
    store = ParamStore(seed=3)
    init_landmark_encoder(store, cfg)
    hm = ad.constant(np.zeros((1, 1, 32, 32)))
    shapes = [f.data.shape for f in encode_landmarks(store, hm)]
    assert shapes == [(1, 4, 8, 8), (1, 10, 4, 4), (1, 14, 2, 2)]
