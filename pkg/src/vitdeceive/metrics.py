"""Attack success, misclassification confidence, attribution IoU and SSIM noise rate."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def success_rate(results: Sequence) -> float:
    if len(results) == 0:
        raise MetricError("success rate of an empty result list")
    return sum(bool(r.success) for r in results) / len(results)


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.mean)

    def __str__(self) -> str:
        return "n/a" if not self.defined else f"{self.mean:.2f}±{self.std:.2f}"


UNDEFINED = MeanStd(float("nan"), float("nan"))


def mean_std(values) -> MeanStd:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return UNDEFINED
    return MeanStd(float(v.mean()), float(v.std()))


def misclassification_confidence(results: Sequence) -> MeanStd:
    """Mean and population std of the adversarial-label probability over successes only.

    Returns :data:`UNDEFINED` (NaN fields) when nothing succeeded.
    """
    return mean_std(r.adversarial.confidence for r in results if r.success)


def _pixels(m) -> np.ndarray:
    return np.asarray(getattr(m, "pixel_map", m), dtype=np.float64)


def iou(map_a, map_b, tau: float = 0.5) -> float:
    """IoU of ``{map >= tau}`` regions; 1.0 when both regions are empty.

    Accepts :class:`AttributionMap` objects (their normalized pixel maps are
    used) or plain arrays already scaled to [0, 1].
    """
    a, b = _pixels(map_a), _pixels(map_b)
    if a.shape != b.shape:
        raise MetricError(f"map shapes differ: {a.shape} vs {b.shape}")
    ba, bb = a >= tau, b >= tau
    union = np.logical_or(ba, bb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ba, bb).sum() / union)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _hwc(img) -> np.ndarray:
    a = img.detach().cpu().numpy() if torch.is_tensor(img) else np.asarray(img)
    a = a.astype(np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise MetricError(f"expected a single image, got shape {a.shape}")
    return a


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian (sigma 1.5) windows, averaged over channels.

    Images are ``(C, H, W)`` arrays or tensors. Windows do not extend past
    the border, so images must be at least 11 pixels on each side.
    """
    a, b = _hwc(x), _hwc(y)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"images must be at least {SSIM_WINDOW} pixels per side")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    w = torch.from_numpy(gaussian_window())[None, None]
    ta = torch.from_numpy(a)[:, None]
    tb = torch.from_numpy(b)[:, None]

    def filt(t):
        return F.conv2d(t, w)

    mu_a, mu_b = filt(ta), filt(tb)
    var_a = filt(ta * ta) - mu_a ** 2
    var_b = filt(tb * tb) - mu_b ** 2
    cov = filt(ta * tb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(dim=(1, 2, 3))
    return float(per_channel.mean())


def noise_rate(x, x_adv) -> float:
    return 1.0 - ssim(x, x_adv)


@dataclass
class SampleRow:
    index: int
    success: bool
    true_label: int
    adv_label: int
    adv_confidence: float
    iou: float
    noise_rate: float
    queries: int = 0
    interpreter: str = ""
    note: str = ""


@dataclass
class MetricsReport:
    success_rate: float
    confidence: MeanStd
    iou: MeanStd
    noise_rate: float
    queries: MeanStd
    rows: list[SampleRow] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[SampleRow]) -> "MetricsReport":
        """Aggregate per-sample rows.

        IoU, noise rate and query statistics are taken over successful
        samples, matching how the confidence is defined.
        """
        if not rows:
            raise MetricError("no rows to aggregate")
        ok = [r for r in rows if r.success]
        return cls(
            success_rate=sum(r.success for r in rows) / len(rows),
            confidence=mean_std(r.adv_confidence for r in ok),
            iou=mean_std(r.iou for r in ok),
            noise_rate=float(np.mean([r.noise_rate for r in ok])) if ok else float("nan"),
            queries=mean_std(r.queries for r in ok),
            rows=list(rows),
        )

    def summary(self) -> dict:
        def ms(v: MeanStd):
            return {"mean": _json_num(v.mean), "std": _json_num(v.std)}

        return {
            "n": len(self.rows),
            "success_rate": _json_num(self.success_rate),
            "confidence": ms(self.confidence),
            "iou": ms(self.iou),
            "noise_rate": _json_num(self.noise_rate),
            "queries": ms(self.queries),
        }

    def to_json(self) -> str:
        payload = {"summary": self.summary(), "rows": [_row_dict(r) for r in self.rows]}
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in SampleRow.__dataclass_fields__.values()]
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(v) for k, v in asdict(r).items()})
        return buf.getvalue()


def _json_num(v: float) -> Optional[float]:
    return None if v is None or math.isnan(v) else round(float(v), 10)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.10g}"
    return v


def _row_dict(r: SampleRow) -> dict:
    d = asdict(r)
    return {k: (_json_num(v) if isinstance(v, float) else v) for k, v in d.items()}


def rows_from_results(results: Sequence, interpreter: str = "", tau: float = 0.5) -> list[SampleRow]:
    rows = []
    for i, r in enumerate(results):
        have_maps = r.benign_map is not None and r.adv_map is not None
        rows.append(
            SampleRow(
                index=i,
                success=bool(r.success),
                true_label=int(r.benign.label),
                adv_label=int(r.adversarial.label),
                adv_confidence=float(r.adversarial.confidence),
                iou=iou(r.benign_map, r.adv_map, tau) if have_maps else float("nan"),
                noise_rate=noise_rate(r.x, r.x_adv),
                queries=int(r.queries),
                interpreter=interpreter,
                note=getattr(r, "note", ""),
            )
        )
    return rows
