"""Relevance-propagation interpreter built on gradient-weighted attention.

Each block contributes ``A_bar = I + mean_h (grad_A * R_A)^+`` where ``R_A`` is
the LRP-epsilon relevance reaching the block's post-softmax attention. The
block matrices are chained into ``C`` and the map is the class-token row of
``C`` over the patch tokens.

Propagation rules: epsilon rule for linear layers, identity for LayerNorm,
GELU and softmax, proportional split for residual additions, and the
epsilon rule halved between both operands for the two attention matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from vitdeceive.interpret.maps import AttributionMap
from vitdeceive.model import ForwardTrace, ToyViT, attention_gradients, check_class

Tensor = torch.Tensor


class RelevanceError(RuntimeError):
    """Relevance propagation produced no usable signal."""


def stabilize(z: Tensor, eps: float) -> Tensor:
    """``z + eps * sign(z)`` with ``sign(0) = +1``."""
    return z + eps * torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))


def lrp_linear(layer: nn.Linear, a: Tensor, z: Tensor, relevance: Tensor, eps: float) -> Tensor:
    s = relevance / stabilize(z, eps)
    return a * (s @ layer.weight)


def lrp_add(a: Tensor, b: Tensor, out: Tensor, relevance: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    s = relevance / stabilize(out, eps)
    return a * s, b * s


def modified_attention(attn: Tensor, grad: Tensor, relevance: Tensor) -> Tensor:
    """``I + mean over heads of (grad * relevance)^+``.

    Inputs are ``(heads, m, m)`` or batched ``(B, heads, m, m)``.
    """
    if attn.shape != grad.shape or attn.shape != relevance.shape:
        raise ValueError(
            f"shape mismatch: attention {tuple(attn.shape)}, gradient {tuple(grad.shape)}, "
            f"relevance {tuple(relevance.shape)}"
        )
    if attn.dim() not in (3, 4):
        raise ValueError("expected (heads, m, m) or (B, heads, m, m)")
    cam = (grad * relevance).clamp(min=0).mean(dim=-3)
    eye = torch.eye(cam.shape[-1], dtype=cam.dtype, device=cam.device)
    return eye + cam


def relevance_product(a_bars) -> Tensor:
    """Accumulate ``C`` from the identity by left-multiplying each block's matrix in block order.

    The result is ``A_bar(n) @ ... @ A_bar(1)``: the class-token row then
    follows attention from the last block back to the input tokens.
    """
    out = torch.eye(a_bars[0].shape[-1], dtype=a_bars[0].dtype).expand_as(a_bars[0])
    for a in a_bars:
        out = a @ out
    return out


@dataclass
class RelevanceState:
    modified: list[Tensor]
    softmax_relevance: list[Tensor]
    product: Tensor


def attention_relevance(model: ToyViT, trace: ForwardTrace, cls: Tensor, eps: float = 1e-9) -> list[Tensor]:
    """LRP-epsilon relevance at every block's attention map, ``(B, heads, T, T)`` each.

    Propagation starts from a one-hot vector on ``cls`` at the logits of the
    last block and is kept in the autograd graph.
    """
    depth = len(trace.internals)
    k = trace.final_logits.shape[-1]
    head_in = trace.head_input[-1]
    if not torch.isfinite(head_in).all() or (head_in == 0).all(dim=-1).any():
        raise RelevanceError("degenerate class-token activations at the classification head")
    r_logits = torch.nn.functional.one_hot(cls, k).to(trace.final_logits.dtype)
    normed = model.head_norm(head_in)
    r_cls = lrp_linear(model.head, normed, trace.final_logits, r_logits, eps)
    out = trace.hidden[-1]
    r = torch.zeros_like(out)
    r = torch.cat([r_cls[:, None, :], r[:, 1:]], dim=1)

    per_block: list[Optional[Tensor]] = [None] * depth
    for j in reversed(range(depth)):
        blk, c = model.blocks[j], trace.internals[j]
        attn_mod = blk.attn
        r_x1, r_f = lrp_add(c["x1"], c["f"], c["out"], r, eps)
        r_g = lrp_linear(blk.fc2, c["g"], c["f"], r_f, eps)
        r_x1 = r_x1 + lrp_linear(blk.fc1, c["h2"], c["u"], r_g, eps)
        r_x, r_a = lrp_add(c["x"], c["a"], c["x1"], r_x1, eps)
        r_merged = lrp_linear(attn_mod.proj, c["merged"], c["a"], r_a, eps)
        r_o = attn_mod._split(r_merged)

        attn, v, q, kk = c["attn"], c["v"], c["q"], c["k"]
        s = r_o / stabilize(c["o"], eps)
        r_attn = 0.5 * attn * (s @ v.transpose(-2, -1))
        r_v = 0.5 * v * (attn.transpose(-2, -1) @ s)
        per_block[j] = r_attn

        scores = (q @ kk.transpose(-2, -1)) * attn_mod.scale
        s2 = r_attn / stabilize(scores, eps)
        r_q = 0.5 * q * ((s2 @ kk) * attn_mod.scale)
        r_k = 0.5 * kk * ((s2.transpose(-2, -1) @ q) * attn_mod.scale)

        def merge(t: Tensor) -> Tensor:
            return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], -1)

        h1 = c["h1"]
        r_h1 = (
            lrp_linear(attn_mod.q, h1, merge(q), merge(r_q), eps)
            + lrp_linear(attn_mod.k, h1, merge(kk), merge(r_k), eps)
            + lrp_linear(attn_mod.v, h1, merge(v), merge(r_v), eps)
        )
        r = r_x + r_h1
    for rel in per_block:
        if not torch.isfinite(rel).all():
            raise RelevanceError("non-finite relevance during propagation")
    return per_block


def relevance_state(
    model: ToyViT, x: Tensor, cls, eps: float = 1e-9, create_graph: bool = False
) -> RelevanceState:
    x = x if x.dim() == 4 else x.unsqueeze(0)
    check_class(model, cls)
    if not x.requires_grad:
        x = x.detach().clone().requires_grad_(True)
    trace = model.trace(x)
    idx = torch.as_tensor(cls, dtype=torch.long).reshape(-1).expand(x.shape[0])
    grads = attention_gradients(model, x, idx, create_graph=create_graph, trace=trace)
    rels = attention_relevance(model, trace, idx, eps)
    if not create_graph:
        rels = [r.detach() for r in rels]
    a_bars = [modified_attention(a, g, r) for a, g, r in zip(trace.attentions, grads, rels)]
    return RelevanceState(modified=a_bars, softmax_relevance=rels, product=relevance_product(a_bars))


class CheferInterpreter:
    """Gradient-weighted relevance interpreter (``source = "chefer"``)."""

    name = "chefer"

    def __init__(self, eps: float = 1e-9):
        self.eps = eps

    def token_scores(self, model: ToyViT, x: Tensor, cls, create_graph: bool = False) -> Tensor:
        """Class-token row of the relevance product over patch tokens, ``(B, m)``."""
        state = relevance_state(model, x, cls, self.eps, create_graph=create_graph)
        scores = state.product[:, 0, 1:]
        return scores if create_graph else scores.detach()

    def __call__(self, model: ToyViT, image: Tensor, cls) -> AttributionMap:
        scores = self.token_scores(model, image, cls)
        return AttributionMap.from_tokens(scores[0], tuple(image.shape[-2:]), self.name)


def chefer_relevance(model: ToyViT, image: Tensor, cls, eps: float = 1e-9) -> AttributionMap:
    return CheferInterpreter(eps)(model, image, cls)
