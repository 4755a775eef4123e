import hashlib

import numpy as np
import pytest
import torch

from vitdeceive.detector import (
    DetectorConfig,
    DetectorError,
    DetectorModel,
    MapEncoder,
    build_channels,
    detect,
    extract_features,
    stack_maps,
    train_detector,
)
from vitdeceive.interpret.chefer import CheferInterpreter
from vitdeceive.interpret.iared import IaredInterpreter, init_params

from conftest import rand_images, tiny_model

FAST = DetectorConfig(encoder_epochs=3, trees=30)


def test_build_channels_modes():
    model = tiny_model(depth=2, image_size=32)
    pair = (CheferInterpreter(), IaredInterpreter(init_params(model, 0)))
    x = rand_images(3, size=32)
    two = build_channels(model, x, pair, 2)
    three = build_channels(model, x, pair, 3)
    assert two.shape == (3, 2, 32, 32) and three.shape == (3, 3, 32, 32)
    assert np.array_equal(three[:, :2], two)
    assert np.allclose(three[:, 2], three[:, 0] * three[:, 1])
    with pytest.raises(ValueError):
        build_channels(model, x, pair, 4)


def test_stack_maps_product_and_zero_channel():
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    s = stack_maps(a, b, 3)
    for i in range(4):
        for j in range(4):
            assert s[2, i, j] == a[i, j] * b[i, j]
    assert np.all(stack_maps(np.zeros((4, 4)), b, 3)[2] == 0)
    with pytest.raises(ValueError):
        stack_maps(a, np.zeros((3, 3)), 2)


def test_encoder_contract():
    enc = MapEncoder(3).eval()
    s = np.random.default_rng(0).random((2, 3, 32, 32))
    f1, f2 = extract_features(enc, s), extract_features(enc, s)
    assert f1.shape == (2, enc.output_dim)
    assert np.array_equal(f1, f2)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 2, 32, 32))


def test_encoder_features_regression_hash():
    torch.manual_seed(0)
    enc = MapEncoder(2).eval()
    s = np.random.default_rng(0).random((2, 2, 32, 32))
    feats = np.round(extract_features(enc, s), 5)
    # locked for the pinned torch version; re-freeze if initialization changes upstream
    assert hashlib.sha256(feats.tobytes()).hexdigest() == "b34cdfdcf37c9e2c51995c2738f42dee74200d2110bb2c6c33e01d5ab5983d12"


def _stacks(n, value, rng):
    return np.clip(value + 0.05 * rng.standard_normal((n, 2, 16, 16)), 0, 1)


def test_separable_case():
    rng = np.random.default_rng(0)
    det = train_detector(_stacks(60, 0.2, rng), _stacks(60, 0.8, rng), FAST, seed=0)
    assert det.val_accuracy == 1.0


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    accs = [train_detector(_stacks(200, 0.5, rng), _stacks(200, 0.5, rng), FAST, seed=s, shuffle_labels=True).val_accuracy for s in range(3)]
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_errors_and_thresholds(tmp_path):
    rng = np.random.default_rng(0)
    with pytest.raises(DetectorError):
        train_detector(_stacks(5, 0.2, rng), np.zeros((0, 2, 16, 16)), FAST)
    with pytest.raises(DetectorError):
        detect(None, _stacks(2, 0.2, rng))
    with pytest.raises(ValueError):
        DetectorConfig(threshold=1.0)
    det = train_detector(_stacks(40, 0.2, rng), _stacks(40, 0.8, rng), FAST, seed=0)
    probe = _stacks(6, 0.5, rng)
    assert all(d["label"] == "adversarial" for d in detect(det, probe, threshold=0.0))
    for d in detect(det, probe, threshold=1.0):
        assert (d["label"] == "adversarial") == (d["score"] == 1.0)
    det.save(tmp_path / "d.npz")
    again = DetectorModel.load(tmp_path / "d.npz")
    assert np.allclose(again.scores(probe), det.scores(probe))
