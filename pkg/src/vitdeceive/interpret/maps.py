"""Attribution map container and token-to-pixel rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

Tensor = torch.Tensor


def normalize_scores(scores: Tensor, eps: float = 0.0) -> Tensor:
    """Min-max normalize along the last dimension; constant rows map to zeros.

    Differentiable almost everywhere. ``eps`` is added to the range for use
    inside loss functions.
    """
    lo = scores.min(dim=-1, keepdim=True).values
    hi = scores.max(dim=-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span + eps, torch.ones_like(span))
    return torch.where(span > 0, (scores - lo) / safe, torch.zeros_like(scores))


def upsample_token_map(token_scores, grid: int | tuple[int, int] | None = None, target=None) -> Tensor:
    """Nearest-neighbor expand a length-``g*g`` token vector to pixels, then normalize to [0, 1].

    ``target`` is ``(H, W)``; each token covers an ``H/g x W/g`` block. Accepts
    batched ``(B, m)`` input and returns ``(B, H, W)`` in that case.
    """
    t = torch.as_tensor(token_scores, dtype=torch.float32) if not torch.is_tensor(token_scores) else token_scores
    batched = t.dim() == 2
    t = t if batched else t.unsqueeze(0)
    m = t.shape[-1]
    if grid is None:
        g = math.isqrt(m)
        if g * g != m:
            raise ValueError(f"{m} tokens do not form a square grid")
        gh = gw = g
    elif isinstance(grid, int):
        gh = gw = grid
    else:
        gh, gw = grid
    if gh * gw != m:
        raise ValueError(f"{m} tokens do not fit a {gh}x{gw} grid")
    th, tw = (gh, gw) if target is None else (target if not isinstance(target, int) else (target, target))
    if th % gh or tw % gw:
        raise ValueError(f"target {th}x{tw} is not an integer multiple of grid {gh}x{gw}")
    pix = t.reshape(-1, gh, gw).repeat_interleave(th // gh, dim=1).repeat_interleave(tw // gw, dim=2)
    pix = normalize_scores(pix.reshape(pix.shape[0], -1)).reshape(-1, th, tw)
    return pix if batched else pix[0]


@dataclass
class AttributionMap:
    """Per-token scores (nonnegative) plus the normalized single-channel pixel map."""

    token_scores: np.ndarray
    pixel_map: np.ndarray
    source: str

    def __post_init__(self):
        self.token_scores = np.asarray(self.token_scores, dtype=np.float64)
        self.pixel_map = np.asarray(self.pixel_map, dtype=np.float64)
        if (self.token_scores < 0).any():
            raise ValueError("token scores must be nonnegative")

    @classmethod
    def from_tokens(cls, token_scores: Tensor, image_hw: tuple[int, int], source: str) -> "AttributionMap":
        scores = token_scores.detach().double().reshape(-1).clamp_min(0.0)
        pixel = upsample_token_map(scores, target=image_hw)
        return cls(scores.numpy(), pixel.numpy(), source)

    @property
    def normalized_tokens(self) -> np.ndarray:
        return normalize_scores(torch.from_numpy(self.token_scores)).numpy()

    def to_uint8(self) -> np.ndarray:
        """Pixel map quantized as ``round(255 * value)``."""
        return np.rint(255.0 * self.pixel_map).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"source": self.source, "token_scores": [float(v) for v in self.token_scores]}
