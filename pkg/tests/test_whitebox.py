import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from vitdeceive.attacks.whitebox import (
    AttackConfig,
    adv_loss,
    advit_whitebox,
    advit_whitebox_batch,
    cls_loss,
    int_loss,
    loss_map,
    pgd_step,
    plain_pgd_batch,
)
from vitdeceive.interpret.chefer import CheferInterpreter
from vitdeceive.interpret.iared import IaredInterpreter, init_params

from conftest import rand_images, tiny_model


def test_step_schedule():
    cfg = AttackConfig()
    assert cfg.step_size(0) == pytest.approx(0.08)
    assert cfg.step_size(19) == pytest.approx(0.008)
    assert cfg.step_size(10) < cfg.step_size(9)
    assert AttackConfig(schedule="constant").step_size(7) == 0.08


def test_config_validation():
    for bad in ({"epsilon": -1}, {"alpha_max": 0}, {"iterations": 0}, {"lam": -1}, {"schedule": "cosine"}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_cls_loss_matches_loop_oracle():
    model = tiny_model(depth=3)
    x = rand_images(2)
    with torch.no_grad():
        trace = model.trace(x)
        got = cls_loss(trace, 1)
    for b in range(2):
        total = 0.0
        for logits in trace.per_block_logits:
            p = torch.softmax(logits[b].double(), -1)
            total += -float(torch.log(p[1]))
        assert abs(float(got[b]) + total / 3) < 1e-5


def test_int_loss_matches_loop_oracle(rng):
    a, b, w = rng.random(16), rng.random(16), rng.random(16)
    want = sum(w[i] * (a[i] - b[i]) ** 2 for i in range(16))
    assert abs(float(int_loss(torch.from_numpy(a), torch.from_numpy(b), w)) - want) < 1e-9
    assert float(int_loss(torch.from_numpy(a), torch.from_numpy(a))) == 0.0
    with pytest.raises(ValueError):
        int_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(ValueError):
        int_loss(torch.zeros(3), torch.zeros(3), [-1.0, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(1e-3, 0.2), eps=st.floats(0.0, 0.1))
def test_pgd_step_matches_elementwise_oracle(seed, alpha, eps):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 4, 4, generator=gen, dtype=torch.float64)
    xa = (x + (torch.rand(x.shape, generator=gen, dtype=torch.float64) - 0.5) * 2 * eps).clamp(0, 1)
    g = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    got = pgd_step(xa, g, alpha, eps, x).numpy()
    xn, an, gn = x.numpy(), xa.numpy(), g.numpy()
    want = np.clip(np.clip(an - alpha * np.sign(gn), xn - eps, xn + eps), 0, 1)
    assert np.allclose(got, want, atol=1e-12)
    assert np.abs(got - xn).max() <= eps + 1e-6


def _fd_check(model, interp, seed=0, n_pixels=24):
    x = rand_images(1, size=32, seed=seed, dtype=torch.float64)
    cls = int(model(x).argmax())
    benign = loss_map(interp, interp.token_scores(model, x, torch.tensor([cls])))
    xa = (x + 0.02 * (torch.rand(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 1)) - 0.5)).clamp(0.01, 0.99)
    cfg = AttackConfig()
    grad = adv_loss(xa, model, interp, benign, cls, cfg).grad.flatten()
    pick = np.random.default_rng(seed).choice(xa.numel(), n_pixels, replace=False)
    h = 1e-6
    flat = xa.flatten()
    fd = torch.zeros(n_pixels, dtype=torch.float64)
    for k, i in enumerate(pick):
        e = torch.zeros_like(flat)
        e[i] = h
        up = adv_loss((flat + e).reshape(xa.shape), model, interp, benign, cls, cfg, need_grad=False).total
        down = adv_loss((flat - e).reshape(xa.shape), model, interp, benign, cls, cfg, need_grad=False).total
        fd[k] = (up - down).sum() / (2 * h)
    return float((grad[pick] - fd).abs().max() / fd.abs().max())


def test_adv_loss_gradient_finite_differences_iared():
    model = tiny_model(depth=1, heads=2, image_size=32, patch_size=8, embed_dim=16, double=True)
    interp = IaredInterpreter(init_params(model, 0).double())
    assert _fd_check(model, interp) < 1e-3


def test_adv_loss_gradient_finite_differences_chefer():
    model = tiny_model(depth=1, heads=2, image_size=32, patch_size=8, embed_dim=16, double=True)
    assert _fd_check(model, CheferInterpreter()) < 1e-3


def test_lam_zero_ignores_interpretation_in_gradient():
    model = tiny_model(depth=2, image_size=32)
    interp = IaredInterpreter(init_params(model, 0))
    x = rand_images(1, size=32)
    benign = interp.token_scores(model, x)
    ev = adv_loss(x, model, interp, benign, 0, AttackConfig(lam=0.0))
    xr = x.clone().requires_grad_(True)
    want = torch.autograd.grad(cls_loss(model.trace(xr), 0).sum(), xr)[0]
    assert torch.allclose(ev.grad, want, atol=1e-6)


@pytest.mark.parametrize("name", ["iared", "chefer"])
def test_whitebox_respects_box(name):
    model = tiny_model(depth=2, image_size=32)
    interp = CheferInterpreter() if name == "chefer" else IaredInterpreter(init_params(model, 0))
    x = rand_images(3, size=32)
    cls = model(x).argmax(-1)
    cfg = AttackConfig(iterations=5)
    for r in advit_whitebox_batch(model, interp, x, cls, cfg):
        assert np.abs(r.delta).max() <= cfg.epsilon + 1e-6
        assert r.x_adv.min() >= 0 and r.x_adv.max() <= 1
        assert len(r.loss_trajectory) == 6
        assert r.success == (r.adversarial.label != r.benign.label)
    for r in plain_pgd_batch(model, interp, x, cls, cfg):
        assert np.abs(r.delta).max() <= cfg.epsilon + 1e-6


def test_zero_epsilon_returns_benign():
    model = tiny_model(depth=2, image_size=32)
    x = rand_images(1, size=32)
    r = advit_whitebox(model, CheferInterpreter(), x[0], int(model(x).argmax()), AttackConfig(epsilon=0.0, iterations=3))
    assert not r.success
    assert np.array_equal(r.x_adv, r.x)


def test_start_is_projected():
    model = tiny_model(depth=2, image_size=32)
    x = rand_images(1, size=32)
    cfg = AttackConfig(iterations=1)
    r = advit_whitebox_batch(model, CheferInterpreter(), x, 0, cfg, start=x + 0.5)[0]
    assert np.abs(r.delta).max() <= cfg.epsilon + 1e-6


def test_invalid_class():
    model = tiny_model(depth=2, image_size=32)
    with pytest.raises(ValueError):
        advit_whitebox(model, CheferInterpreter(), rand_images(1, size=32)[0], 9)
