import itertools

import numpy as np
import pytest

from cats import autodiff as ad
from cats.inference import predict_labels, sliding_window_proba, tile_starts
from cats.model import CatsConfig, forward, init_params


@pytest.fixture(scope="module")
def toy():
    cfg = CatsConfig.desk(patch_size=4, depth=2, embed_dim=8, num_heads=2, num_layers=2,
                          mlp_hidden=16, base_channels=2, input_size=(8, 8, 8), num_classes=3)
    return cfg, init_params(cfg, 0)


def test_tile_starts():
    assert tile_starts(32, 16, 0.0) == [0, 16]
    assert tile_starts(32, 16, 0.5) == [0, 8, 16]
    assert tile_starts(20, 16, 0.5) == [0, 4]
    assert tile_starts(16, 16, 0.75) == [0]
    with pytest.raises(ValueError, match="larger"):
        tile_starts(8, 16, 0.0)


def test_overlap_zero_equals_independent_tiles(toy):
    cfg, ps = toy
    img = np.random.default_rng(0).random((16, 8, 16)).astype(np.float32)
    proba = sliding_window_proba(img, ps, cfg, overlap=0.0)
    with ad.no_grad():
        for i, k in itertools.product((0, 8), (0, 8)):
            tile = img[i:i + 8, :, k:k + 8][None, None]
            ref = ad.softmax(forward(tile, ps, cfg), axis=1).data[0]
            np.testing.assert_allclose(proba[:, i:i + 8, :, k:k + 8], ref, atol=1e-6)


def test_overlap_average_matches_manual(toy):
    cfg, ps = toy
    img = np.random.default_rng(1).random((12, 8, 8)).astype(np.float32)
    proba = sliding_window_proba(img, ps, cfg, overlap=0.5)
    acc, cnt = np.zeros((3, 12, 8, 8)), np.zeros((12, 8, 8))
    with ad.no_grad():
        for s in (0, 4):
            p = ad.softmax(forward(img[s:s + 8][None, None], ps, cfg), axis=1).data[0]
            acc[:, s:s + 8] += p
            cnt[s:s + 8] += 1
    np.testing.assert_allclose(proba, acc / cnt, atol=1e-6)
    np.testing.assert_allclose(proba.sum(0), 1.0, atol=1e-5)


def test_small_volume_padded_and_cropped(toy):
    cfg, ps = toy
    img = np.random.default_rng(2).random((5, 8, 6)).astype(np.float32)
    labels = predict_labels(img, ps, cfg)
    assert labels.shape == (5, 8, 6) and labels.dtype == np.int16
    padded = np.zeros((8, 8, 8), np.float32)
    padded[:5, :, :6] = img
    with ad.no_grad():
        ref = np.argmax(ad.softmax(forward(padded[None, None], ps, cfg), axis=1).data[0], 0)
    np.testing.assert_array_equal(labels, ref[:5, :, :6])
    assert labels.min() >= 0 and labels.max() <= 2


def test_window_validation(toy):
    cfg, ps = toy
    img = np.zeros((8, 8, 8), np.float32)
    with pytest.raises(ValueError, match="multiple of 4"):
        sliding_window_proba(img, ps, cfg, window=(6, 8, 8))
    with pytest.raises(ValueError, match="overlap"):
        sliding_window_proba(img, ps, cfg, overlap=1.0)
    with pytest.raises(ValueError, match="channel"):
        sliding_window_proba(np.zeros((2, 8, 8, 8)), ps, cfg)
