"""Adversarial-input detector over stacked attribution maps.

Channel 1 is the relevance-propagation map, channel 2 the token
informativeness map and the optional channel 3 their elementwise product.
A small convolutional encoder is trained jointly with a logistic head on the
training split; its pooled features then feed a gradient-boosted tree
ensemble which makes the final call.
"""

from __future__ import annotations

import io
import logging
import pickle
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.ensemble import GradientBoostingClassifier

from vitdeceive.checkpoint import load_container, save_container
from vitdeceive.interpret.maps import upsample_token_map
from vitdeceive.model import ToyViT

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class DetectorError(RuntimeError):
    pass


def build_channels(model: ToyViT, x: Tensor, interpreters: Sequence, mode: int = 3) -> np.ndarray:
    """``(B, mode, H, W)`` stack of normalized pixel maps for a batch of images.

    ``interpreters`` is the ``(relevance, informativeness)`` pair; each
    explains the class the model predicts for the image.
    """
    if mode not in (2, 3):
        raise ValueError("mode must be 2 or 3")
    if len(interpreters) != 2:
        raise ValueError("need exactly two interpreters")
    x = x if x.dim() == 4 else x.unsqueeze(0)
    with torch.no_grad():
        pred = model(x).argmax(-1)
    hw = tuple(x.shape[-2:])
    maps = []
    for interp in interpreters:
        tokens = interp.token_scores(model, x, pred).detach().double().clamp_min(0.0)
        maps.append(upsample_token_map(tokens, target=hw).numpy())
    return stack_maps(maps[0], maps[1], mode)


def stack_maps(first: np.ndarray, second: np.ndarray, mode: int) -> np.ndarray:
    first, second = np.asarray(first, dtype=np.float64), np.asarray(second, dtype=np.float64)
    if first.shape != second.shape:
        raise ValueError(f"map shapes differ: {first.shape} vs {second.shape}")
    chans = [first, second] if mode == 2 else [first, second, first * second]
    return np.stack(chans, axis=-3)


class MapEncoder(nn.Module):
    """Three stride-2 conv layers plus a pooled copy of the input, both on a ``grid x grid`` layout.

    Keeping the coarse grid (rather than pooling it away) preserves where the
    maps put their mass, which is most of what distinguishes them. The output
    length is ``feature_dim + in_channels * grid**2``.
    """

    def __init__(self, in_channels: int, feature_dim: int = 128, grid: int = 4):
        super().__init__()
        if feature_dim % (grid * grid):
            raise ValueError("feature_dim must be a multiple of grid * grid")
        self.in_channels, self.feature_dim, self.grid = in_channels, feature_dim, grid
        self.convs = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, feature_dim // (grid * grid), 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(grid),
        )
        self.skip = nn.AdaptiveAvgPool2d(grid)

    def forward(self, stacks: Tensor) -> Tensor:
        if stacks.dim() != 4 or stacks.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W), got {tuple(stacks.shape)}")
        return torch.cat([self.skip(stacks).flatten(1), self.convs(stacks).flatten(1)], dim=1)

    @property
    def output_dim(self) -> int:
        return self.feature_dim + self.in_channels * self.grid * self.grid


@dataclass
class DetectorConfig:
    feature_dim: int = 128
    encoder_epochs: int = 10
    encoder_lr: float = 3e-3
    batch_size: int = 64
    trees: int = 200
    depth: int = 3
    learning_rate: float = 0.1
    threshold: float = 0.5
    val_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class DetectorModel:
    encoder: MapEncoder
    ensemble: GradientBoostingClassifier
    config: DetectorConfig
    mode: int
    val_accuracy: float = float("nan")
    train_accuracy: float = float("nan")

    def scores(self, stacks) -> np.ndarray:
        feats = extract_features(self.encoder, stacks)
        return self.ensemble.predict_proba(feats)[:, 1]

    def save(self, path) -> None:
        blob = io.BytesIO()
        pickle.dump(self.ensemble, blob)
        arrays = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        arrays["ensemble"] = np.frombuffer(blob.getvalue(), dtype=np.uint8).copy()
        extra = {"mode": self.mode, "val_accuracy": self.val_accuracy, "train_accuracy": self.train_accuracy}
        save_container(path, "detector", asdict(self.config), arrays, extra=extra)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        meta, arrays = load_container(path, expected_kind="detector")
        config = DetectorConfig(**meta["config"])
        extra = meta.get("extra", {})
        encoder = MapEncoder(extra["mode"], config.feature_dim)
        encoder.load_state_dict({k[8:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("encoder.")})
        ensemble = pickle.loads(arrays["ensemble"].tobytes())
        return cls(encoder.eval(), ensemble, config, extra["mode"], extra["val_accuracy"], extra["train_accuracy"])


def extract_features(encoder: MapEncoder, stacks) -> np.ndarray:
    """Fixed-length ``(B, feature_dim)`` features of channel stacks."""
    t = torch.as_tensor(np.asarray(stacks), dtype=torch.float32)
    t = t if t.dim() == 4 else t.unsqueeze(0)
    with torch.no_grad():
        return encoder.eval()(t).double().numpy()


def _split(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    cut = n - max(1, int(round(val_fraction * n)))
    return perm[:cut], perm[cut:]


def _fit_encoder(stacks: Tensor, labels: Tensor, config: DetectorConfig, seed: int) -> MapEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = MapEncoder(stacks.shape[1], config.feature_dim)
        head = nn.Linear(encoder.output_dim, 1)
    gen = torch.Generator().manual_seed(seed + 1)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.encoder_lr)
    for _ in range(config.encoder_epochs):
        perm = torch.randperm(stacks.shape[0], generator=gen)
        for i in range(0, stacks.shape[0], config.batch_size):
            idx = perm[i : i + config.batch_size]
            logit = head(encoder(stacks[idx]))[:, 0]
            loss = F.binary_cross_entropy_with_logits(logit, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return encoder.eval()


def train_detector(
    benign,
    adversarial,
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
    shuffle_labels: bool = False,
) -> DetectorModel:
    """Fit encoder and boosted trees on a seeded split; report held-out accuracy.

    ``shuffle_labels`` permutes the training and validation labels (the
    chance-level control).
    """
    benign, adversarial = np.asarray(benign), np.asarray(adversarial)
    if len(benign) == 0 or len(adversarial) == 0:
        raise DetectorError("both benign and adversarial stacks are required")
    if benign.shape[1:] != adversarial.shape[1:]:
        raise DetectorError("benign and adversarial stacks differ in shape")
    stacks = np.concatenate([benign, adversarial]).astype(np.float32)
    labels = np.concatenate([np.zeros(len(benign)), np.ones(len(adversarial))])
    rng = np.random.default_rng(seed)
    if shuffle_labels:
        labels = rng.permutation(labels)
    tr, va = _split(len(stacks), config.val_fraction, rng)
    xs, ys = torch.from_numpy(stacks), torch.from_numpy(labels).float()
    encoder = _fit_encoder(xs[tr], ys[tr], config, seed)
    ensemble = GradientBoostingClassifier(
        n_estimators=config.trees, max_depth=config.depth, learning_rate=config.learning_rate, random_state=seed
    )
    feats = extract_features(encoder, stacks)
    ensemble.fit(feats[tr], labels[tr])
    det = DetectorModel(encoder, ensemble, config, stacks.shape[1])
    det.train_accuracy = float(((det.ensemble.predict_proba(feats[tr])[:, 1] >= config.threshold) == labels[tr]).mean())
    det.val_accuracy = float(((det.ensemble.predict_proba(feats[va])[:, 1] >= config.threshold) == labels[va]).mean())
    logger.info("detector mode %d seed %d: val accuracy %.3f", det.mode, seed, det.val_accuracy)
    return det


def detect(detector: Optional[DetectorModel], stacks, threshold: Optional[float] = None) -> list[dict]:
    """``{"label": "adversarial" | "benign", "score": p}`` per stack."""
    if detector is None or not hasattr(detector.ensemble, "estimators_"):
        raise DetectorError("detector is not trained")
    thr = detector.config.threshold if threshold is None else threshold
    if not 0.0 <= thr <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    scores = detector.scores(stacks)
    return [{"label": "adversarial" if s >= thr else "benign", "score": float(s)} for s in scores]
