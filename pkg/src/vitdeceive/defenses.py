"""Input-transformation defenses and PGD adversarial training for the toy models.

Transforms act on single ``(C, H, W)`` float images in [0, 1] and always
return an image of the same shape and range.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from vitdeceive.attacks.whitebox import AttackConfig, pgd_step
from vitdeceive.model import ToyViT, ToyViTConfig, TrainConfig, train_toy

DEFENSE_KINDS = ("random_resize_pad", "bit_depth", "median_smooth", "adversarial_training")


def _numpy(image) -> np.ndarray:
    a = image.detach().cpu().numpy() if torch.is_tensor(image) else np.asarray(image)
    if a.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {a.shape}")
    return a


def random_resize_pad(image, rng: np.random.Generator, scale_range=(1.0, 1.1)) -> np.ndarray:
    """Shrink by a random factor with nearest-neighbor sampling, then zero-pad at a random offset.

    A factor ``f`` maps an ``H x W`` image to ``round(H / f) x round(W / f)``;
    the result is placed at a uniformly random offset inside a zero canvas of
    the original size.
    """
    lo, hi = scale_range
    if not 1.0 <= lo <= hi <= 1.25:
        raise ValueError("scale range must satisfy 1.0 <= lo <= hi <= 1.25")
    a = _numpy(image)
    c, h, w = a.shape
    f = rng.uniform(lo, hi)
    nh, nw = max(1, int(round(h / f))), max(1, int(round(w / f)))
    rows = np.minimum((np.arange(nh) * h / nh).astype(int), h - 1)
    cols = np.minimum((np.arange(nw) * w / nw).astype(int), w - 1)
    small = a[:, rows][:, :, cols]
    top = int(rng.integers(0, h - nh + 1))
    left = int(rng.integers(0, w - nw + 1))
    out = np.zeros_like(a)
    out[:, top : top + nh, left : left + nw] = small
    return out


def bit_depth_reduce(image, bits: int) -> np.ndarray:
    """Quantize to ``2**bits`` levels, rounding half away from zero."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must lie in [1, 8]")
    a = np.clip(_numpy(image), 0.0, 1.0)
    levels = 2 ** bits - 1
    scaled = a * levels
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return (q / levels).astype(a.dtype)


def median_smooth(image, k: int = 3) -> np.ndarray:
    """Per-channel ``k x k`` median filter; edges reflect without repeating the border pixel."""
    if k < 3 or k % 2 == 0:
        raise ValueError("kernel size must be odd and >= 3")
    a = _numpy(image)
    return ndimage.median_filter(a, size=(1, k, k), mode="mirror")


@dataclass
class DefenseConfig:
    kind: str
    scale_range: tuple = (1.0, 1.1)
    bits: int = 4
    kernel: int = 3
    mix: float = 0.5
    warmup: int = 30

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        self.scale_range = tuple(self.scale_range)
        lo, hi = self.scale_range
        if not 1.0 <= lo <= hi <= 1.25:
            raise ValueError("scale range must lie within [1.0, 1.25]")
        if not 1 <= self.bits <= 8:
            raise ValueError("bits must lie in [1, 8]")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and >= 3")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def transform(self) -> Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]]:
        """Pre-processing callable ``(image, rng) -> image``; ``None`` for adversarial training."""
        if self.kind == "random_resize_pad":
            return lambda img, rng: random_resize_pad(img, rng, self.scale_range)
        if self.kind == "bit_depth":
            return lambda img, rng: bit_depth_reduce(img, self.bits)
        if self.kind == "median_smooth":
            return lambda img, rng: median_smooth(img, self.kernel)
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


def pgd_augment(attack: AttackConfig, mix: float, iterations: Optional[int] = None, skip_batches: int = 0):
    """Batch hook for :func:`train_toy` replacing a ``mix`` fraction of each batch by PGD examples.

    The first ``skip_batches`` batches pass through untouched.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix ratio must lie in [0, 1]")
    steps = iterations or attack.iterations
    sched = AttackConfig(**{**attack.to_dict(), "iterations": steps})
    seen = [0]

    def hook(model: ToyViT, xb: torch.Tensor, yb: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        seen[0] += 1
        n_adv = int(round(mix * xb.shape[0]))
        if n_adv == 0 or seen[0] <= skip_batches:
            return xb
        pick = torch.randperm(xb.shape[0], generator=gen)[:n_adv]
        x0, y0 = xb[pick], yb[pick]
        was_training = model.training
        model.eval()
        x_adv = x0.clone()
        for t in range(steps):
            xr = x_adv.clone().requires_grad_(True)
            loss = -F.cross_entropy(model(xr), y0, reduction="sum")
            grad = torch.autograd.grad(loss, xr)[0]
            x_adv = pgd_step(x_adv, grad, sched.step_size(t), sched.epsilon, x0)
        model.train(was_training)
        out = xb.clone()
        out[pick] = x_adv.detach()
        return out

    return hook


def adversarial_train(
    config: ToyViTConfig,
    images: torch.Tensor,
    labels: torch.Tensor,
    train: TrainConfig = TrainConfig(),
    attack: AttackConfig = AttackConfig(),
    mix: float = 0.5,
    iterations: Optional[int] = 5,
    warmup: int = 0,
) -> ToyViT:
    """Train on batches where a ``mix`` fraction is replaced by PGD examples against the current model.

    ``warmup`` clean epochs come first, followed by ``train.epochs``
    adversarial epochs under one learning-rate schedule; training from
    scratch on PGD examples tends to stall near chance on the toy data.
    ``mix = 0`` is exactly :func:`train_toy`. ``iterations`` overrides the
    attack's PGD step count to keep training affordable.
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix ratio must lie in [0, 1]")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if mix == 0.0:
        return train_toy(images, labels, config, train)
    skip = warmup * math.ceil(images.shape[0] / train.batch_size)
    full = replace(train, epochs=train.epochs + warmup)
    return train_toy(images, labels, config, full, augment=pgd_augment(attack, mix, iterations, skip))
