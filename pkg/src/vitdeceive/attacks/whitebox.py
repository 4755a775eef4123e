"""White-box attack: projected sign-gradient descent on classification + interpretation loss.

The classification term averages cross-entropy of the true class over the
logits of every partial model ``F_j`` and is negated, so descending the joint
loss pushes every block away from the true class. The interpretation term is
a weighted squared distance between the normalized token map of the current
iterate and the frozen benign map.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from vitdeceive.interpret.maps import AttributionMap, normalize_scores
from vitdeceive.model import ForwardTrace, PredictionRecord, ToyViT, check_class

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

NORM_EPS = 1e-12


@dataclass
class AttackConfig:
    epsilon: float = 0.031
    alpha_max: float = 0.08
    iterations: int = 20
    lam: float = 10.0
    schedule: str = "linear"
    alpha_min_ratio: float = 0.1
    weights: Optional[list] = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")

    def step_size(self, t: int) -> float:
        """Step ``t`` (0-based): linear decay from ``alpha_max`` to ``alpha_max * alpha_min_ratio``."""
        if self.schedule == "constant" or self.iterations == 1:
            return self.alpha_max
        lo = self.alpha_max * self.alpha_min_ratio
        return self.alpha_max - (self.alpha_max - lo) * t / (self.iterations - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialExample:
    x: np.ndarray
    x_adv: np.ndarray
    benign: PredictionRecord
    adversarial: PredictionRecord
    benign_map: Optional[AttributionMap]
    adv_map: Optional[AttributionMap]
    success: bool
    loss_trajectory: list = field(default_factory=list)
    queries: int = 0
    int_loss: float = float("nan")
    note: str = ""

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def true_label(self) -> int:
        return self.benign.label


def cls_loss(trace: ForwardTrace, cls) -> Tensor:
    """``-(1/n) sum_j CE(softmax(g(F_j(x))), c)`` per sample, shape ``(B,)``."""
    logits = trace.per_block_logits
    idx = torch.as_tensor(cls, dtype=torch.long).reshape(-1).expand(logits[0].shape[0])
    ce = torch.stack([F.cross_entropy(z, idx, reduction="none") for z in logits])
    return -ce.mean(0)


def int_loss(adv_map, benign_map, weights=None) -> Tensor:
    """``sum_i w_i (adv_i - benign_i)^2`` over the last axis."""
    a = torch.as_tensor(adv_map)
    b = torch.as_tensor(benign_map, dtype=a.dtype)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"map lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    if weights is None:
        w = torch.ones(a.shape[-1], dtype=a.dtype)
    else:
        w = torch.as_tensor(weights, dtype=a.dtype)
        if w.shape[-1] != a.shape[-1]:
            raise ValueError("weights length differs from map length")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
    return (w * (a - b) ** 2).sum(-1)


@dataclass
class LossEval:
    """Joint loss and its pieces for a batch of iterates."""

    total: Tensor
    cls: Tensor
    interp: Tensor
    grad: Tensor
    logits: Tensor
    adv_tokens: Tensor


def loss_map(interpreter, tokens: Tensor) -> Tensor:
    """Token map compared by the interpretation loss.

    Scores of interpreters that already live in [0, 1] (``bounded = True``)
    are used as is; unbounded relevance is min-max normalized per image.
    """
    if getattr(interpreter, "bounded", False):
        return tokens
    return normalize_scores(tokens, eps=NORM_EPS)


def adv_loss(
    x_adv: Tensor,
    model: ToyViT,
    interpreter,
    benign_tokens: Tensor,
    cls,
    config: AttackConfig,
    need_grad: bool = True,
) -> LossEval:
    """``cls_loss + lam * int_loss`` and its gradient with respect to ``x_adv``.

    ``benign_tokens`` are the benign token maps ``(B, m)`` as returned by
    :func:`loss_map`. The
    interpreter explains the class currently predicted for ``x_adv``. With
    ``lam == 0`` the interpreter is still evaluated (its map is reported)
    but kept out of the graph.
    """
    x = x_adv.detach().clone().requires_grad_(True)
    trace = model.trace(x)
    l_cls = cls_loss(trace, cls)
    pred = trace.final_logits.argmax(-1).detach()
    differentiable = need_grad and config.lam > 0
    tokens = interpreter.token_scores(model, x, pred, create_graph=differentiable)
    adv_tokens = loss_map(interpreter, tokens)
    l_int = int_loss(adv_tokens, benign_tokens, config.weights)
    total = l_cls + config.lam * l_int if config.lam > 0 else l_cls
    grad = torch.autograd.grad(total.sum(), x)[0] if need_grad else torch.zeros_like(x)
    grad = torch.nan_to_num(grad, nan=0.0, posinf=0.0, neginf=0.0)
    return LossEval(
        total=total.detach(),
        cls=l_cls.detach(),
        interp=l_int.detach(),
        grad=grad.detach(),
        logits=trace.final_logits.detach(),
        adv_tokens=adv_tokens.detach(),
    )


def pgd_step(x_adv: Tensor, grad: Tensor, alpha: float, epsilon: float, x: Tensor) -> Tensor:
    """Descend one signed step, project onto the L-inf box around ``x``, clamp to [0, 1]."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    stepped = x_adv - alpha * torch.sign(grad)
    projected = torch.maximum(torch.minimum(stepped, x + epsilon), x - epsilon)
    return projected.clamp(0.0, 1.0)


def project(delta: Tensor, epsilon: float) -> Tensor:
    return delta.clamp(-epsilon, epsilon)


def _as_batch(x: Tensor) -> Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def advit_whitebox_batch(
    model: ToyViT,
    interpreter,
    x: Tensor,
    cls,
    config: AttackConfig = AttackConfig(),
    select: str = "best",
    start: Optional[Tensor] = None,
) -> list[AdversarialExample]:
    """Attack a batch of images; one :class:`AdversarialExample` per image.

    ``select="best"`` returns, per image, the misclassifying iterate with the
    lowest interpretation loss (the benign image when none misclassifies);
    ``select="last"`` returns the final iterate. ``start`` optionally gives
    the first iterate (projected onto the feasible box).
    """
    if select not in ("best", "last"):
        raise ValueError(f"unknown selection rule {select!r}")
    x = _as_batch(x).detach()
    b = x.shape[0]
    cls = torch.as_tensor(cls, dtype=torch.long).reshape(-1).expand(b).clone()
    check_class(model, cls)
    benign_tokens_raw = interpreter.token_scores(model, x, cls).detach()
    benign_tokens = loss_map(interpreter, benign_tokens_raw)
    with torch.no_grad():
        benign_logits = model(x)

    best_x = x.clone()
    best_int = torch.full((b,), float("inf"))
    best_tokens = benign_tokens.clone()
    found = torch.zeros(b, dtype=torch.bool)
    trajectory = []
    x_adv = x.clone() if start is None else pgd_step(_as_batch(start).detach(), torch.zeros_like(x), 1.0, config.epsilon, x)
    last = None
    for t in range(config.iterations + 1):
        ev = adv_loss(x_adv, model, interpreter, benign_tokens, cls, config, need_grad=t < config.iterations)
        last = (x_adv, ev)
        if t > 0:
            miscls = ev.logits.argmax(-1) != cls
            better = miscls & (ev.interp < best_int)
            best_x[better] = x_adv[better]
            best_int[better] = ev.interp[better]
            best_tokens[better] = ev.adv_tokens[better]
            found |= miscls
        trajectory.append([float(v) for v in ev.total])
        if t == config.iterations:
            break
        x_adv = pgd_step(x_adv, ev.grad, config.step_size(t), config.epsilon, x)

    if select == "last":
        final_x, final_ev = last
        chosen = final_x
        chosen_int = final_ev.interp
        success = final_ev.logits.argmax(-1) != cls
    else:
        chosen, chosen_int, success = best_x, best_int, found
    with torch.no_grad():
        adv_logits = model(chosen)
    adv_pred = adv_logits.argmax(-1)
    adv_tokens = interpreter.token_scores(model, chosen, adv_pred).detach()
    hw = tuple(x.shape[-2:])
    out = []
    for i in range(b):
        out.append(
            AdversarialExample(
                x=x[i].numpy().copy(),
                x_adv=chosen[i].numpy().copy(),
                benign=PredictionRecord.from_logits(benign_logits[i]),
                adversarial=PredictionRecord.from_logits(adv_logits[i]),
                benign_map=AttributionMap.from_tokens(benign_tokens_raw[i], hw, interpreter.name),
                adv_map=AttributionMap.from_tokens(adv_tokens[i], hw, interpreter.name),
                success=bool(success[i]),
                loss_trajectory=[row[i] for row in trajectory],
                int_loss=float(chosen_int[i]) if bool(success[i]) else float("nan"),
            )
        )
    return out


def advit_whitebox(model: ToyViT, interpreter, x: Tensor, cls: int, config: AttackConfig = AttackConfig()) -> AdversarialExample:
    return advit_whitebox_batch(model, interpreter, x, cls, config)[0]


def plain_pgd_batch(model: ToyViT, interpreter, x: Tensor, cls, config: AttackConfig = AttackConfig()):
    """Interpretation-agnostic control: final-logit cross-entropy only, final iterate returned."""
    x = _as_batch(x).detach()
    b = x.shape[0]
    cls = torch.as_tensor(cls, dtype=torch.long).reshape(-1).expand(b).clone()
    check_class(model, cls)
    benign_tokens = interpreter.token_scores(model, x, cls).detach()
    x_adv = x.clone()
    for t in range(config.iterations):
        xr = x_adv.clone().requires_grad_(True)
        loss = -F.cross_entropy(model(xr), cls, reduction="sum")
        grad = torch.autograd.grad(loss, xr)[0]
        x_adv = pgd_step(x_adv, grad, config.step_size(t), config.epsilon, x)
    with torch.no_grad():
        benign_logits, adv_logits = model(x), model(x_adv)
    adv_pred = adv_logits.argmax(-1)
    adv_tokens = interpreter.token_scores(model, x_adv, adv_pred).detach()
    hw = tuple(x.shape[-2:])
    return [
        AdversarialExample(
            x=x[i].numpy().copy(),
            x_adv=x_adv[i].numpy().copy(),
            benign=PredictionRecord.from_logits(benign_logits[i]),
            adversarial=PredictionRecord.from_logits(adv_logits[i]),
            benign_map=AttributionMap.from_tokens(benign_tokens[i], hw, interpreter.name),
            adv_map=AttributionMap.from_tokens(adv_tokens[i], hw, interpreter.name),
            success=bool(adv_pred[i] != cls[i]),
        )
        for i in range(b)
    ]
