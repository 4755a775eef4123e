"""Synthetic shape datasets and image-directory ingestion."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

SHAPES = ("square", "disk", "triangle", "cross", "ring", "hbar", "vbar", "diamond", "xshape", "corner")
TEXTURES = ("hstripe", "vstripe", "diag", "checker", "antidiag", "dots", "hwide", "vwide", "checkwide", "plaid")


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    per_class: int = 200
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    kind: str = "textures"
    contrast: float = 0.35
    amplitude: float = 0.15
    noise: float = 0.04
    min_size: int = 12
    max_size: int = 20

    def __post_init__(self):
        if self.kind not in ("textures", "shapes"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.max_size > self.image_size or self.min_size > self.max_size:
            raise ValueError("invalid shape size range")

    def to_dict(self) -> dict:
        return asdict(self)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil for one shape class."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c, xx - c
    r = size / 2.0
    w = max(2, size // 4)
    lo, hi = (size - w) // 2, (size - w) // 2 + w
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "triangle":
        return (yy >= 0) & (np.abs(dx) <= (yy + 1) / 2.0)
    if kind == "cross":
        return ((xx >= lo) & (xx < hi)) | ((yy >= lo) & (yy < hi))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (r - w) ** 2)
    if kind == "hbar":
        return (yy >= lo) & (yy < hi)
    if kind == "vbar":
        return (xx >= lo) & (xx < hi)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "xshape":
        return (np.abs(dx - dy) <= w / 2) | (np.abs(dx + dy) <= w / 2)
    if kind == "corner":
        return (xx < w) | (yy >= size - w)
    raise ValueError(f"unknown shape {kind!r}")


def texture(kind: str, size: int, phase: tuple[int, int]) -> np.ndarray:
    """Zero-mean +-1 pattern for one texture class on a ``size x size`` patch."""
    yy, xx = np.mgrid[0:size, 0:size]
    yy, xx = yy + phase[0], xx + phase[1]
    if kind == "hstripe":
        on = (yy // 2) % 2
    elif kind == "vstripe":
        on = (xx // 2) % 2
    elif kind == "diag":
        on = ((xx + yy) // 2) % 2
    elif kind == "checker":
        on = (xx // 2 + yy // 2) % 2
    elif kind == "antidiag":
        on = ((xx - yy) // 2) % 2
    elif kind == "dots":
        on = ((xx % 4) < 2) & ((yy % 4) < 2)
    elif kind == "hwide":
        on = (yy // 4) % 2
    elif kind == "vwide":
        on = (xx // 4) % 2
    elif kind == "checkwide":
        on = (xx // 4 + yy // 4) % 2
    elif kind == "plaid":
        on = ((xx // 2) % 2) | ((yy // 4) % 2)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return np.where(on.astype(bool), 1.0, -1.0)


def _render(rng: np.random.Generator, k: int, spec: DatasetSpec) -> np.ndarray:
    s, ch = spec.image_size, spec.channels
    bg = rng.uniform(0.25, 0.75, size=ch)
    direction = rng.choice([-1.0, 1.0], size=ch) * rng.uniform(0.6, 1.0, size=ch)
    fg = np.clip(bg + spec.contrast * direction, spec.amplitude, 1.0 - spec.amplitude)
    img = np.broadcast_to(bg, (s, s, ch)).copy()
    size = int(rng.integers(spec.min_size, spec.max_size + 1))
    top, left = rng.integers(0, s - size + 1, size=2)
    if spec.kind == "shapes":
        mask = shape_mask(SHAPES[k], size)
        fill = np.broadcast_to(fg, (size, size, ch))
    else:
        mask = shape_mask("disk" if rng.random() < 0.5 else "square", size)
        pattern = texture(TEXTURES[k], size, tuple(int(v) for v in rng.integers(0, 8, size=2)))
        fill = fg + spec.amplitude * pattern[..., None]
    region = img[top : top + size, left : left + size]
    region[mask] = fill[mask]
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: DatasetSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Balanced synthetic shape set: ``(images (N, C, H, W) float32, labels (N,) long)``.

    Class ``k`` is the ``k``-th entry of :data:`TEXTURES` (a textured blob at
    a random position) or of :data:`SHAPES` (a flat-colored silhouette),
    depending on ``spec.kind``. Samples are interleaved by class and fully
    determined by ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for _ in range(spec.per_class):
        for k in range(spec.num_classes):
            images.append(_render(rng, k, spec))
            labels.append(k)
    x = torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    return x, torch.tensor(labels, dtype=torch.long)


def split(images: torch.Tensor, labels: torch.Tensor, holdout: float, seed: int):
    """Seeded train/held-out split."""
    n = images.shape[0]
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    cut = n - int(round(holdout * n))
    tr, te = perm[:cut], perm[cut:]
    return (images[tr], labels[tr]), (images[te], labels[te])


class ManifestError(ValueError):
    pass


def load_image_dir(directory, manifest: str = "labels.csv", image_size: int | None = None):
    """Load images listed in a ``filename,label`` CSV manifest inside ``directory``."""
    from PIL import Image

    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"unreadable directory: {root}")
    path = root / manifest
    if not path.is_file():
        raise ManifestError(f"missing manifest {path}")
    images, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 'filename,label'")
            name, label = row[0].strip(), row[1].strip()
            if lineno == 1 and not label.lstrip("-").isdigit():
                continue  # header row
            try:
                label_id = int(label)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: bad label {label!r}") from exc
            img = Image.open(root / name).convert("RGB")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.NEAREST)
            images.append(np.asarray(img, dtype=np.float32) / 255.0)
            labels.append(label_id)
    if not images:
        raise ManifestError(f"{path}: no samples")
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    return x, torch.tensor(labels, dtype=torch.long)
