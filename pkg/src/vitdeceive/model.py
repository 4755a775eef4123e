"""Toy vision transformer with a classification head shared by every block.

The head ``g`` (final LayerNorm + linear projection) is trained only on the
last block's class token, then reused unchanged on each intermediate block so
that partial models ``F_j = (f_1 o ... o f_j) o g`` produce their own logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vitdeceive.checkpoint import load_container, save_container

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class DimensionError(ValueError):
    """Raised when image or token shapes do not agree with the model."""


def as_image(values, channels_last: Optional[bool] = None) -> Tensor:
    """Return a float32 ``(C, H, W)`` (or batched ``(B, C, H, W)``) tensor clamped to [0, 1].

    Numpy arrays are assumed to be ``H x W x C`` unless ``channels_last`` says
    otherwise; torch tensors are assumed channels-first.
    """
    if isinstance(values, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
        if channels_last is None:
            channels_last = True
    else:
        t = torch.as_tensor(values, dtype=torch.float32)
        if channels_last is None:
            channels_last = False
    if t.dim() == 2:
        t = t.unsqueeze(0 if not channels_last else -1)
    if channels_last:
        t = t.movedim(-1, -3)
    return t.clamp(0.0, 1.0).contiguous()


@dataclass(frozen=True)
class ToyViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 2
    heads: int = 4
    embed_dim: int = 64
    mlp_dim: int = 128
    num_classes: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.depth < 1 or self.heads < 1:
            raise ValueError("depth and heads must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardTrace:
    """Everything downstream interpreters and attacks read from one forward pass.

    ``hidden[j]`` is the token sequence entering block ``j`` (``hidden[n]`` is
    the last block's output); ``internals[j]`` holds the activations of block
    ``j`` needed for relevance propagation.
    """

    per_block_logits: list[Tensor]
    final_logits: Tensor
    attentions: list[Tensor]
    token_count: int
    hidden: list[Tensor] = field(default_factory=list)
    internals: list[dict] = field(default_factory=list)
    head_input: list[Tensor] = field(default_factory=list)


@dataclass
class PredictionRecord:
    label: int
    confidence: float
    probabilities: np.ndarray

    @classmethod
    def from_logits(cls, logits: Tensor) -> "PredictionRecord":
        probs = torch.softmax(logits.detach().double().reshape(-1), dim=0).numpy()
        label = int(np.argmax(probs))
        return cls(label=label, confidence=float(probs[label]), probabilities=probs)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "probabilities": [float(p) for p in self.probabilities],
        }


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split ``(C, H, W)`` or ``(B, C, H, W)`` images into flattened patches.

    Returns ``(m, C*p*p)`` or ``(B, m, C*p*p)`` in row-major grid order.
    """
    batched = image.dim() == 4
    x = image if batched else image.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"expected a 3-d or 4-d image tensor, got shape {tuple(image.shape)}")
    b, c, h, w = x.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, (h // p) * (w // p), c * p * p)
    return x if batched else x[0]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, h: Tensor, key_mask: Optional[Tensor] = None, attn_offset: Optional[Tensor] = None):
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if attn_offset is not None:
            attn = attn + attn_offset
        o = attn @ v
        merged = o.transpose(1, 2).reshape(h.shape[0], h.shape[1], -1)
        out = self.proj(merged)
        return out, {"q": q, "k": k, "v": v, "attn": attn, "o": o, "merged": merged}


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x: Tensor, key_mask=None, attn_offset=None):
        h1 = self.norm1(x)
        a, cache = self.attn(h1, key_mask, attn_offset)
        x1 = x + a
        h2 = self.norm2(x1)
        u = self.fc1(h2)
        g = F.gelu(u)
        f = self.fc2(g)
        x2 = x1 + f
        cache.update(x=x, h1=h1, a=a, x1=x1, h2=h2, u=u, g=g, f=f, out=x2)
        return x2, cache


class ToyViT(nn.Module):
    """Patch embedding, ``depth`` pre-norm blocks and one shared head ``g``."""

    def __init__(self, config: ToyViTConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        patch_dim = config.channels * config.patch_size ** 2
        self.patch_embed = nn.Linear(patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_dim) for _ in range(config.depth))
        self.head_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def g(self, cls_state: Tensor) -> Tensor:
        """The shared classification head applied to a class-token state."""
        return self.head(self.head_norm(cls_state))

    def embed(self, x: Tensor) -> Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        c = self.config
        if tuple(x.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected images of shape {(c.channels, c.image_size, c.image_size)}, got {tuple(x.shape[1:])}"
            )
        tokens = self.patch_embed(patchify(x, c.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed

    def trace(
        self,
        x: Tensor,
        key_masks: Optional[Sequence[Optional[Tensor]]] = None,
        attn_offsets: Optional[Sequence[Optional[Tensor]]] = None,
        depth: Optional[int] = None,
    ) -> ForwardTrace:
        """Run the model and collect per-block logits and attention maps.

        ``key_masks[j]`` (``(B, T)`` bool) hides tokens from block ``j``'s
        attention keys; ``attn_offsets[j]`` is added to block ``j``'s
        post-softmax attention and exists for finite-difference checks.
        ``depth`` truncates the model to its first ``depth`` blocks.
        """
        n = self.config.depth if depth is None else depth
        if not 1 <= n <= self.config.depth:
            raise ValueError(f"depth must be in [1, {self.config.depth}]")
        z = self.embed(x)
        hidden, internals, attns, logits, heads_in = [z], [], [], [], []
        for j in range(n):
            km = key_masks[j] if key_masks is not None else None
            off = attn_offsets[j] if attn_offsets is not None else None
            z, cache = self.blocks[j](z, km, off)
            hidden.append(z)
            internals.append(cache)
            attns.append(cache["attn"])
            heads_in.append(z[:, 0])
            logits.append(self.g(z[:, 0]))
        return ForwardTrace(
            per_block_logits=logits,
            final_logits=logits[-1],
            attentions=attns,
            token_count=self.config.num_patches,
            hidden=hidden,
            internals=internals,
            head_input=heads_in,
        )

    def forward(self, x: Tensor) -> Tensor:
        z = self.embed(x)
        for blk in self.blocks:
            z, _ = blk(z)
        return self.g(z[:, 0])


def forward(model: ToyViT, image: Tensor) -> ForwardTrace:
    return model.trace(image)


def predict(model: ToyViT, image: Tensor) -> PredictionRecord:
    """Prediction for a single image."""
    with torch.no_grad():
        logits = model(image if image.dim() == 4 else image.unsqueeze(0))
    if logits.shape[0] != 1:
        raise DimensionError("predict expects a single image; use predict_batch")
    return PredictionRecord.from_logits(logits[0])


def predict_batch(model: ToyViT, images: Tensor, batch_size: int = 256) -> tuple[Tensor, Tensor]:
    """Return ``(labels, probabilities)`` for a batch of images."""
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(torch.softmax(model(images[i : i + batch_size]), dim=-1))
    probs = torch.cat(out)
    return probs.argmax(dim=-1), probs


def check_class(model: ToyViT, cls) -> None:
    classes = torch.as_tensor(cls).reshape(-1)
    if ((classes < 0) | (classes >= model.config.num_classes)).any():
        raise ValueError(f"class id out of range for {model.config.num_classes} classes: {cls}")


def _class_index(cls, batch: int) -> Tensor:
    idx = torch.as_tensor(cls, dtype=torch.long).reshape(-1)
    if idx.numel() == 1:
        idx = idx.expand(batch)
    return idx


def attention_gradients(
    model: ToyViT,
    image: Tensor,
    cls,
    create_graph: bool = False,
    trace: Optional[ForwardTrace] = None,
) -> list[Tensor]:
    """Gradient of the class logit with respect to each block's attention map.

    ``cls`` may be a single id or one id per batch entry. Samples in a batch
    are independent, so the summed target yields per-sample gradients.
    """
    check_class(model, cls)
    if trace is None:
        x = image if image.dim() == 4 else image.unsqueeze(0)
        if not x.requires_grad:
            x = x.detach().clone().requires_grad_(True)
        trace = model.trace(x)
    idx = _class_index(cls, trace.final_logits.shape[0])
    target = trace.final_logits.gather(1, idx[:, None]).sum()
    grads = torch.autograd.grad(target, trace.attentions, create_graph=create_graph, allow_unused=True)
    return [torch.zeros_like(a) if g is None else g for g, a in zip(grads, trace.attentions)]


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    weight_decay: float = 1e-4
    seed: int = 0


def build_model(config: ToyViTConfig, seed: int) -> ToyViT:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyViT(config)
    return model


def _check_dataset(images: Tensor, labels: Tensor, num_classes: int) -> None:
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range for {num_classes} classes")


def train_toy(
    images: Tensor,
    labels: Tensor,
    config: ToyViTConfig,
    train: TrainConfig = TrainConfig(),
    augment=None,
) -> ToyViT:
    """Train a toy ViT with Adam on final-block cross-entropy.

    ``augment(model, xb, yb, generator)`` may replace a batch before the
    update (adversarial training hooks in here). Deterministic for a given
    ``train.seed``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_dataset(images, labels, config.num_classes)
    model = build_model(config, train.seed)
    if train.epochs <= 0:
        return model.eval()
    gen = torch.Generator().manual_seed(train.seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    steps = train.epochs * math.ceil(images.shape[0] / train.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=train.lr, total_steps=steps, pct_start=0.15)
    for epoch in range(train.epochs):
        model.train()
        perm = torch.randperm(images.shape[0], generator=gen)
        total = 0.0
        for i in range(0, images.shape[0], train.batch_size):
            idx = perm[i : i + train.batch_size]
            xb, yb = images[idx], labels[idx]
            if augment is not None:
                xb = augment(model, xb, yb, gen)
            loss = F.cross_entropy(model(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * idx.numel()
        logger.debug("epoch %d loss %.4f", epoch, total / images.shape[0])
    return model.eval()


def accuracy(model: ToyViT, images: Tensor, labels: Tensor) -> float:
    pred, _ = predict_batch(model, images)
    return float((pred == torch.as_tensor(labels)).float().mean())


def save_model(model: ToyViT, path) -> None:
    save_container(path, "toyvit", model.config.to_dict(), model.state_dict())


def load_model(path) -> ToyViT:
    meta, arrays = load_container(path, expected_kind="toyvit")
    model = ToyViT(ToyViTConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model.eval()
