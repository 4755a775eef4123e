import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitdeceive.metrics import (
    MetricError,
    MetricsReport,
    SampleRow,
    gaussian_window,
    iou,
    mean_std,
    misclassification_confidence,
    noise_rate,
    ssim,
    success_rate,
)


def res(success, conf=0.5):
    return SimpleNamespace(success=success, adversarial=SimpleNamespace(confidence=conf))


def naive_ssim(x, y, c1=1e-4, c2=9e-4):
    w = gaussian_window()
    k = w.shape[0]
    vals = []
    for ch in range(x.shape[0]):
        for i in range(x.shape[1] - k + 1):
            for j in range(x.shape[2] - k + 1):
                a, b = x[ch, i : i + k, j : j + k], y[ch, i : i + k, j : j + k]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * (a - ma) ** 2).sum()
                vb = (w * (b - mb) ** 2).sum()
                cov = (w * (a - ma) * (b - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_success_rate():
    assert success_rate([res(True)] * 3) == 1.0
    assert success_rate([res(False)] * 3) == 0.0
    assert success_rate([res(True)] * 3 + [res(False)]) == 0.75
    with pytest.raises(MetricError):
        success_rate([])


def test_confidence():
    one = misclassification_confidence([res(True, 0.78), res(False, 0.99)])
    assert one.mean == 0.78 and one.std == 0.0
    two = misclassification_confidence([res(True, 0.6), res(True, 0.8)])
    assert two.mean == pytest.approx(0.7) and two.std == pytest.approx(0.1)
    assert not misclassification_confidence([res(False)]).defined


def test_iou_identities():
    m = np.random.default_rng(0).random((8, 8))
    assert iou(m, m) == 1.0
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[:4, :4] = 1
    b[4:, 4:] = 1
    assert iou(a, b) == 0.0
    # equal squares overlapping on half their area
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[0:4, 0:4] = 1
    b[0:4, 2:6] = 1
    assert iou(a, b) == pytest.approx(1 / 3)
    with pytest.raises(MetricError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)


def test_ssim_identity_and_noise_rate_zero():
    x = np.random.default_rng(0).random((3, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert noise_rate(x, x) == pytest.approx(0.0, abs=1e-12)


def test_ssim_constant_offset_closed_form():
    mu1, delta = 0.3, 0.2
    x = np.full((1, 16, 16), mu1)
    c1 = (0.01) ** 2
    mu2 = mu1 + delta
    want = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    assert ssim(x, x + delta) == pytest.approx(want, abs=1e-10)


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(3)
    x = rng.random((2, 14, 13))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert abs(ssim(x, y) - naive_ssim(x, y)) < 1e-5


def test_noise_rate_complement_is_large():
    pattern = (np.indices((16, 16)).sum(0) % 2).astype(float)[None].repeat(3, 0)
    assert noise_rate(pattern, 1 - pattern) > 0.5


def test_ssim_errors():
    with pytest.raises(MetricError):
        ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 15)))
    with pytest.raises(MetricError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def _row(i, success, conf=0.9, iou_v=0.8, q=10):
    return SampleRow(i, success, 0, 1 if success else 0, conf, iou_v, 0.01, q)


def test_report_aggregates_over_successes():
    rows = [_row(0, True, 0.6, 1.0, 10), _row(1, True, 0.8, 0.5, 20), _row(2, False, 0.99, 0.0, 300)]
    rep = MetricsReport.from_rows(rows)
    assert rep.success_rate == pytest.approx(2 / 3)
    assert rep.confidence.mean == pytest.approx(0.7)
    assert rep.iou.mean == pytest.approx(0.75)
    assert rep.queries.mean == 15
    s = rep.summary()
    assert s["n"] == 3
    assert rep.to_csv().count("\n") == 4
    assert '"summary"' in rep.to_json()
    with pytest.raises(MetricError):
        MetricsReport.from_rows([])


def test_report_without_successes_is_undefined():
    s = MetricsReport.from_rows([_row(0, False)]).summary()
    assert s["confidence"]["mean"] is None and s["iou"]["mean"] is None
    assert math.isnan(mean_std([]).mean)
