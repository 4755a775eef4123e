"""Token-informativeness interpreter with per-group policy tokens.

Before each group of blocks a multi-head interpreter scores every patch token
``I_ij = mean_h sigmoid(F_q^h(x_i) . F_k^h(P_j))``. Tokens scoring below the
threshold are dropped for all later groups. The attribution of a token is the
running product of its scores up to (and including) the group where it was
dropped. The policy is trained with REINFORCE on the Bernoulli keep/drop
likelihood.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import brentq

from vitdeceive.checkpoint import load_container, save_container
from vitdeceive.interpret.maps import AttributionMap
from vitdeceive.model import ToyViT

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

PROB_FLOOR = 1e-6


class MultiHeadInterpreter(nn.Module):
    """One group's scorer: policy token ``P_j`` and per-head query/key maps."""

    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        self.policy = nn.Parameter(torch.randn(dim) * 0.5)
        self.fq = nn.Linear(dim, heads * head_dim)
        self.fk = nn.Linear(dim, heads * head_dim)

    def forward(self, tokens: Tensor) -> Tensor:
        """``(..., m, dim)`` tokens -> ``(..., m)`` informative scores in (0, 1)."""
        q = self.fq(F.layer_norm(tokens, tokens.shape[-1:]))
        q = q.reshape(*tokens.shape[:-1], self.heads, self.head_dim)
        k = self.fk(self.policy).reshape(self.heads, self.head_dim)
        return torch.sigmoid((q * k).sum(-1)).mean(-1)


def informative_score(x_i: Tensor, policy: Tensor, fq: Sequence[nn.Module], fk: Sequence[nn.Module]) -> Tensor:
    """Score of one token against one policy token given explicit per-head maps.

    ``fq[h]`` and ``fk[h]`` are the ``h``-th head's linear maps (callables);
    the result is the head-mean of ``sigmoid(fq[h](x_i) . fk[h](policy))``.
    """
    if len(fq) != len(fk) or len(fq) == 0:
        raise ValueError("need the same positive number of query and key maps")
    vals = []
    for q_map, k_map in zip(fq, fk):
        q, k = q_map(x_i), k_map(policy)
        if q.shape != k.shape:
            raise ValueError(f"query {tuple(q.shape)} and key {tuple(k.shape)} dimensions differ")
        vals.append(torch.sigmoid((q * k).sum(-1)))
    return torch.stack(vals).mean(0)


class IaredParams(nn.Module):
    """Interpreter parameters for all groups plus the drop threshold ``tau``."""

    def __init__(self, dim: int, heads: int, head_dim: int, groups: Sequence[Sequence[int]], tau: float = 0.5):
        super().__init__()
        if not groups:
            raise ValueError("need at least one group")
        flat = [b for g in groups for b in g]
        if sorted(flat) != list(range(len(flat))) or any(len(g) == 0 for g in groups):
            raise ValueError(f"groups must partition blocks 0..n-1 in order, got {groups}")
        if flat != sorted(flat):
            raise ValueError("groups must list blocks in order")
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.groups = [list(g) for g in groups]
        self.tau = tau
        self.dim, self.heads, self.head_dim = dim, heads, head_dim
        self.scorers = nn.ModuleList(MultiHeadInterpreter(dim, heads, head_dim) for _ in groups)

    @property
    def group_starts(self) -> list[int]:
        return [g[0] for g in self.groups]

    def config_dict(self) -> dict:
        return {"dim": self.dim, "heads": self.heads, "head_dim": self.head_dim, "groups": self.groups, "tau": self.tau}

    def save(self, path) -> None:
        save_container(path, "iared_policy", self.config_dict(), self.state_dict())

    @classmethod
    def load(cls, path) -> "IaredParams":
        meta, arrays = load_container(path, expected_kind="iared_policy")
        params = cls(**meta["config"])
        params.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return params


def default_groups(depth: int) -> list[list[int]]:
    """One group per block up to depth 4, otherwise four contiguous groups."""
    if depth <= 4:
        return [[i] for i in range(depth)]
    return [list(c) for c in np.array_split(np.arange(depth), 4)]


def init_params(model: ToyViT, seed: int, groups=None, tau: float = 0.5, heads: Optional[int] = None) -> IaredParams:
    cfg = model.config
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        params = IaredParams(
            cfg.embed_dim, heads or cfg.heads, cfg.head_dim, groups or default_groups(cfg.depth), tau
        )
    return params


@dataclass
class InformativeScoreTable:
    """``scores[j]`` holds ``I_ij`` for group ``j`` (``(B, m)``); ``keep[j]`` is ``scores[j] >= tau``
    restricted to tokens still alive when group ``j`` is evaluated."""

    scores: list[Tensor]
    keep: list[Tensor]
    alive: list[Tensor]
    token_scores: Tensor

    @property
    def surviving_groups(self) -> Tensor:
        """Number of groups in which each token was scored, ``(B, m)``."""
        return torch.stack(self.alive).sum(0)


def group_scores(model: ToyViT, params: IaredParams, x: Tensor) -> list[Tensor]:
    """Informative scores of every patch token for every group on the unpruned model."""
    trace = model.trace(x if x.dim() == 4 else x.unsqueeze(0))
    return [scorer(trace.hidden[start][:, 1:]) for scorer, start in zip(params.scorers, params.group_starts)]


def score_table(scores: Sequence[Tensor], tau: float) -> InformativeScoreTable:
    alive = torch.ones_like(scores[0], dtype=torch.bool)
    running = torch.ones_like(scores[0])
    keeps, alives = [], []
    for s in scores:
        alives.append(alive)
        running = torch.where(alive, running * s, running)
        keep = alive & (s >= tau)
        keeps.append(keep)
        alive = keep
    return InformativeScoreTable(scores=list(scores), keep=keeps, alive=alives, token_scores=running)


class IaredInterpreter:
    """Interpretation from policy-token informativeness (``source = "iared"``)."""

    name = "iared"
    bounded = True

    def __init__(self, params: IaredParams):
        self.params = params

    def table(self, model: ToyViT, x: Tensor) -> InformativeScoreTable:
        return score_table(group_scores(model, self.params, x), self.params.tau)

    def token_scores(self, model: ToyViT, x: Tensor, cls=None, create_graph: bool = False) -> Tensor:
        """``(B, m)`` scores; ``cls`` is accepted for interface parity and ignored."""
        if create_graph:
            return self.table(model, x).token_scores
        with torch.no_grad():
            return self.table(model, x).token_scores

    def __call__(self, model: ToyViT, image: Tensor, cls=None) -> AttributionMap:
        scores = self.token_scores(model, image)
        return AttributionMap.from_tokens(scores[0], tuple(image.shape[-2:]), self.name)


def iared_interpret(model: ToyViT, params: IaredParams, image: Tensor) -> AttributionMap:
    return IaredInterpreter(params)(model, image)


def bernoulli_log_likelihood(scores: Tensor, actions: Tensor) -> tuple[Tensor, bool]:
    """``sum_i log(I_i u_i + (1 - I_i)(1 - u_i))`` over the last axis, with clamping flag."""
    clamped = bool(((scores <= PROB_FLOOR) | (scores >= 1 - PROB_FLOOR)).any())
    p = scores.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    u = actions.to(p.dtype)
    return torch.log(p * u + (1 - p) * (1 - u)).sum(-1), clamped


def policy_gradient(scorer: MultiHeadInterpreter, tokens: Tensor, actions: Tensor, reward: float) -> dict[str, Tensor]:
    """Single-sample REINFORCE estimate ``reward * grad_W log pi(actions)`` for one group.

    Scores at exactly 0 or 1 are clamped to ``[1e-6, 1 - 1e-6]`` and a
    ``RuntimeWarning`` is emitted.
    """
    if not torch.all((actions == 0) | (actions == 1)):
        raise ValueError("actions must be binary")
    names, tensors = zip(*scorer.named_parameters())
    ll, clamped = bernoulli_log_likelihood(scorer(tokens), actions)
    if clamped:
        warnings.warn("informative scores clamped away from 0/1 before taking logs", RuntimeWarning, stacklevel=2)
    grads = torch.autograd.grad(reward * ll.sum(), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


def sample_policy_gradient(
    scorer: MultiHeadInterpreter, tokens: Tensor, reward_fn, samples: int, generator: torch.Generator
) -> dict[str, Tensor]:
    """Monte-Carlo average of :func:`policy_gradient` over ``samples`` action draws."""
    with torch.no_grad():
        probs = scorer(tokens)
    total: dict[str, Tensor] = {}
    for _ in range(samples):
        u = torch.bernoulli(probs, generator=generator)
        g = policy_gradient(scorer, tokens, u, float(reward_fn(u)))
        for k, v in g.items():
            total[k] = total.get(k, 0) + v / samples
    return total


def _group_key_masks(params: IaredParams, alive_after: Sequence[Tensor], depth: int) -> list[Tensor]:
    """Per-block key masks (class token always visible) from per-group keep decisions."""
    masks = [None] * depth
    for keep, blocks in zip(alive_after, params.groups):
        full = torch.cat([torch.ones_like(keep[:, :1]), keep], dim=1)
        for b in blocks:
            masks[b] = full
    return masks


@dataclass
class PolicyTrainConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 64
    rho: float = 0.5
    samples: int = 8
    seed: int = 0


def kept_accuracy(model: ToyViT, params: IaredParams, images: Tensor, labels: Tensor, keeps=None):
    """Accuracy and mean kept-token fraction when dropped tokens are hidden from attention.

    ``keeps`` overrides the threshold policy with explicit per-group masks.
    """
    with torch.no_grad():
        if keeps is None:
            keeps = IaredInterpreter(params).table(model, images).keep
        logits = model.trace(images, key_masks=_group_key_masks(params, keeps, model.config.depth)).final_logits
        acc = float((logits.argmax(-1) == labels).float().mean())
        kept = float(torch.stack([k.float().mean() for k in keeps]).mean())
    return acc, kept


def random_keeps(params: IaredParams, batch: int, m: int, keep_prob: float, generator: torch.Generator):
    """Random policy with the same drop-forever semantics and a given per-group keep rate."""
    alive = torch.ones(batch, m, dtype=torch.bool)
    keeps = []
    for _ in params.groups:
        alive = alive & (torch.rand(batch, m, generator=generator) < keep_prob)
        keeps.append(alive)
    return keeps


def matched_keep_prob(kept: float, groups: int) -> float:
    """Per-group keep rate ``p`` whose drop-forever kept fraction ``mean(p, p**2, ...)`` equals ``kept``."""
    if not 0.0 <= kept <= 1.0:
        raise ValueError("kept fraction must lie in [0, 1]")
    if kept in (0.0, 1.0):
        return kept
    return float(brentq(lambda p: np.mean([p ** (g + 1) for g in range(groups)]) - kept, 0.0, 1.0))


def train_policy(
    model: ToyViT,
    images: Tensor,
    labels: Tensor,
    train: PolicyTrainConfig = PolicyTrainConfig(),
    params: Optional[IaredParams] = None,
) -> IaredParams:
    """REINFORCE training of the group interpreters against a frozen model.

    Reward per sample: ``correct - rho * kept_fraction`` where ``correct``
    is judged with dropped tokens hidden from later attention. Each image
    draws ``samples`` action sets and the mean reward over its own draws is
    subtracted as a baseline.
    """
    params = params if params is not None else init_params(model, train.seed)
    if train.epochs <= 0:
        return params
    gen = torch.Generator().manual_seed(train.seed + 7)
    opt = torch.optim.Adam(params.parameters(), lr=train.lr)
    depth = model.config.depth
    with torch.no_grad():
        hidden = model.trace(images).hidden
    for epoch in range(train.epochs):
        perm = torch.randperm(images.shape[0], generator=gen)
        rewards_seen = []
        for i in range(0, images.shape[0], train.batch_size):
            idx = perm[i : i + train.batch_size].repeat(train.samples)
            loglik = torch.zeros(idx.numel())
            alive = torch.ones(idx.numel(), hidden[0].shape[1] - 1, dtype=torch.bool)
            keeps = []
            for scorer, start in zip(params.scorers, params.group_starts):
                probs = scorer(hidden[start][idx, 1:])
                u = torch.bernoulli(probs.detach(), generator=gen).bool()
                p = probs.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
                ll = torch.where(u, torch.log(p), torch.log(1 - p))
                loglik = loglik + (ll * alive).sum(-1)
                alive = alive & u
                keeps.append(alive)
            with torch.no_grad():
                masks = _group_key_masks(params, keeps, depth)
                pred = model.trace(images[idx], key_masks=masks).final_logits.argmax(-1)
                kept = torch.stack([k.float().mean(-1) for k in keeps]).mean(0)
                reward = (pred == labels[idx]).float() - train.rho * kept
            rewards_seen.append(reward)
            per_image = reward.reshape(train.samples, -1)
            advantage = (per_image - per_image.mean(0, keepdim=True)).reshape(-1)
            loss = -(advantage * loglik).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        r = torch.cat(rewards_seen)
        if float(r.max() - r.min()) == 0.0:
            warnings.warn("policy reward is constant over an epoch; gradient carries no signal", RuntimeWarning)
        logger.debug("policy epoch %d mean reward %.4f", epoch, float(r.mean()))
    return params
