"""Disparity error metrics: EPE, >1px, D1, Bad2.0, Bad1.0."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    epe: float
    gt1px: float
    d1: float
    bad2: float
    bad1: float
    n_valid: int
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, gt, valid_mask) -> MetricsReport:
    """Metrics over pixels where ``valid_mask`` is nonzero. Thresholds are strict (error > t).

    The error sum is correctly rounded (``math.fsum``), so the result does not
    depend on summation order.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(valid_mask) > 0
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"metric inputs differ in shape: {pred.shape}, {gt.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels")
    err = np.abs(pred - gt)[mask]
    g = gt[mask]
    return MetricsReport(
        epe=math.fsum(err.tolist()) / n,
        gt1px=100.0 * float((err > 1.0).sum()) / n,
        d1=100.0 * float(((err > 3.0) & (err > 0.05 * g)).sum()) / n,
        bad2=100.0 * float((err > 2.0).sum()) / n,
        bad1=100.0 * float((err > 1.0).sum()) / n,
        n_valid=n,
    )


def aggregate_metrics(reports: list) -> MetricsReport:
    """Valid-pixel-weighted mean of per-sample reports; the inputs are kept in ``per_sample``."""
    if not reports:
        raise ValueError("no samples to aggregate")
    total = sum(r.n_valid for r in reports)
    if total == 0:
        raise ValueError("no valid pixels")

    def wmean(key: str) -> float:
        return float(sum(getattr(r, key) * r.n_valid for r in reports) / total)

    per = []
    for r in reports:
        d = r.to_dict()
        d.pop("per_sample")
        per.append(d)
    return MetricsReport(
        epe=wmean("epe"),
        gt1px=wmean("gt1px"),
        d1=wmean("d1"),
        bad2=wmean("bad2"),
        bad1=wmean("bad1"),
        n_valid=total,
        per_sample=per,
    )
