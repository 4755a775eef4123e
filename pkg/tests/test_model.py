import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vitdeceive.model import (
    DimensionError,
    PredictionRecord,
    ToyViTConfig,
    attention_gradients,
    build_model,
    load_model,
    patchify,
    predict,
    save_model,
)

from conftest import rand_images, tiny_model


def test_patchify_shape_and_order():
    img = torch.arange(3 * 16 * 16, dtype=torch.float32).reshape(3, 16, 16)
    p = patchify(img, 8)
    assert p.shape == (4, 3 * 64)
    # second patch is the top-right block
    assert torch.equal(p[1].reshape(3, 8, 8), img[:, :8, 8:])


def test_config_validation():
    with pytest.raises(ValueError):
        ToyViTConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        ToyViTConfig(embed_dim=30, heads=4)


def test_wrong_shape_raises():
    model = tiny_model()
    with pytest.raises(DimensionError):
        model(torch.rand(1, 3, 8, 8))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), depth=st.integers(1, 3))
def test_attention_rows_sum_to_one(seed, depth):
    model = tiny_model(depth=depth, heads=2, seed=seed)
    trace = model.trace(rand_images(2, seed=seed))
    for a in trace.attentions:
        assert torch.allclose(a.sum(-1), torch.ones(()), atol=1e-5)


def test_per_block_logits_match_truncated_models():
    model = tiny_model(depth=3)
    x = rand_images(3)
    trace = model.trace(x)
    for j in range(1, 4):
        sub = model.trace(x, depth=j)
        assert torch.allclose(trace.per_block_logits[j - 1], sub.final_logits, atol=1e-6)
    assert torch.allclose(model(x), trace.final_logits, atol=1e-6)


def test_prediction_record_invariants():
    model = tiny_model()
    rec = predict(model, rand_images(1)[0])
    assert abs(rec.probabilities.sum() - 1.0) < 1e-6
    assert rec.confidence == rec.probabilities.max()
    assert rec.label == int(np.argmax(rec.probabilities))
    assert PredictionRecord.from_logits(torch.tensor([0.0, 3.0, 1.0])).label == 1


def test_attention_gradients_finite_differences():
    # two tokens (class + one patch), one head, one block
    model = tiny_model(depth=1, heads=1, image_size=8, patch_size=8, embed_dim=8, double=True)
    x = rand_images(1, size=8, dtype=torch.float64)
    cls = 1
    grad = attention_gradients(model, x, cls)[0]
    h = 1e-6
    fd = torch.zeros_like(grad)
    for idx in np.ndindex(*grad.shape):
        off = torch.zeros_like(grad)
        off[idx] = h
        up = model.trace(x, attn_offsets=[off]).final_logits[0, cls]
        down = model.trace(x, attn_offsets=[-off]).final_logits[0, cls]
        fd[idx] = (up - down) / (2 * h)
    rel = (grad - fd).abs().max() / fd.abs().max()
    assert rel < 1e-4


def test_input_gradient_finite_differences():
    model = tiny_model(depth=1, heads=2, image_size=4, patch_size=2, embed_dim=8, double=True)
    x = rand_images(1, size=4, dtype=torch.float64).requires_grad_(True)
    loss = torch.nn.functional.cross_entropy(model(x), torch.tensor([2]))
    grad = torch.autograd.grad(loss, x)[0]
    h = 1e-6
    flat = x.detach().flatten()
    fd = torch.zeros_like(flat)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        lp = torch.nn.functional.cross_entropy(model((flat + e).reshape(x.shape)), torch.tensor([2]))
        lm = torch.nn.functional.cross_entropy(model((flat - e).reshape(x.shape)), torch.tensor([2]))
        fd[i] = (lp - lm) / (2 * h)
    assert ((grad.flatten() - fd).abs().max() / fd.abs().max()) < 1e-3


def test_class_out_of_range():
    model = tiny_model()
    with pytest.raises(ValueError):
        attention_gradients(model, rand_images(1), 7)


def test_save_load_roundtrip(tmp_path):
    model = build_model(ToyViTConfig(depth=2), 3).eval()
    save_model(model, tmp_path / "m.npz")
    again = load_model(tmp_path / "m.npz")
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(model(x), again(x))
