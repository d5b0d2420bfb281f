"""Concatenation cost volume, 3D aggregation, soft-argmax regression and losses."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .autodiff import ops

LOG_EPS = 1e-12


def build_concat_volume(f_left: Tensor, f_right: Tensor, d_max: int) -> Tensor:
    return ops.concat_volume(f_left, f_right, d_max)


def _squeeze_channel(x: Tensor) -> Tensor:
    B, _, D, H, W = x.shape
    return ops.reshape(x, (B, D, H, W))


def aggregate(volume: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Three 3×3×3 conv layers (2C→8→8→1, relu between) over a B×2C×D×H×W volume → B×D×H×W logits."""
    x = ops.relu(ops.conv3d(volume, params["agg.conv1.w"], params["agg.conv1.b"], padding=1))
    x = ops.relu(ops.conv3d(x, params["agg.conv2.w"], params["agg.conv2.b"], padding=1))
    x = ops.conv3d(x, params["agg.conv3.w"], params["agg.conv3.b"], padding=1)
    return _squeeze_channel(x)


def match_and_aggregate(f_left: Tensor, f_right: Tensor, d_max: int, params: Mapping[str, Tensor]) -> Tensor:
    """Same result as ``aggregate(build_concat_volume(...))`` without materialising the 2C-channel volume."""
    x = ops.relu(ops.concat_volume_conv3d(f_left, f_right, params["agg.conv1.w"], params["agg.conv1.b"], d_max))
    x = ops.relu(ops.conv3d(x, params["agg.conv2.w"], params["agg.conv2.b"], padding=1))
    x = ops.conv3d(x, params["agg.conv3.w"], params["agg.conv3.b"], padding=1)
    return _squeeze_channel(x)


def regress_disparity(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax over the disparity axis of B×D×H×W match scores, then the expected index."""
    probs = ops.softmax_axis(logits, axis=1)
    return probs, ops.weighted_index_sum(probs, axis=1)


def laplacian_gt(disp_gt: np.ndarray, d_max: int, b: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Per-pixel discrete Laplacian over integer disparities [0, d_max), normalised to sum 1."""
    if b <= 0:
        raise ValueError("Laplacian bandwidth must be positive")
    disp = np.asarray(disp_gt, dtype=np.float64)
    d = np.arange(d_max, dtype=np.float64).reshape((1, d_max) + (1,) * (disp.ndim - 1))
    dist = np.abs(d - disp[:, None])
    # subtracting the per-pixel minimum keeps the b → 0 limit finite
    logits = -(dist - dist.min(axis=1, keepdims=True)) / b
    p = np.exp(logits)
    return (p / p.sum(axis=1, keepdims=True)).astype(dtype)


def _pixel_mask(valid_mask, shape) -> np.ndarray:
    mask = np.ones(shape) if valid_mask is None else np.asarray(valid_mask)
    if mask.shape != tuple(shape):
        raise ValueError(f"valid mask shape {mask.shape} != {tuple(shape)}")
    return mask


def ce_loss(pred: Tensor, target: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over valid pixels of −Σ_d target(d) · log(pred(d) + 1e-12)."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"ce_loss: prediction {pred.shape} vs target {target.shape}")
    B, D, H, W = pred.shape
    mask = _pixel_mask(valid_mask, (B, H, W))
    nll = ops.mul(ops.log(pred, LOG_EPS), Tensor(target))
    per_pixel = ops.scale(ops.sum_axis(nll, axis=1), -1.0)
    return ops.reduce_mean(per_pixel, mask)


def smooth_l1_loss(pred: Tensor, gt: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> Tensor:
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"smooth_l1_loss: prediction {pred.shape} vs ground truth {gt.shape}")
    mask = _pixel_mask(valid_mask, pred.shape)
    return ops.reduce_mean(ops.smooth_l1(ops.sub(pred, Tensor(gt))), mask)


def total_loss(
    outputs: Sequence[tuple],
    disp_gt: np.ndarray,
    valid_mask: np.ndarray,
    lambdas: Sequence[float],
    mu: float = 0.1,
    target: Optional[np.ndarray] = None,
    b: float = 2.0,
) -> Tensor:
    """Σ_m λ_m (L_ce + μ·L_sm) over supervised ``(probs, disparity)`` outputs.

    ``probs`` may be None for an output that has no distribution; its
    cross-entropy term is then dropped.
    """
    if len(lambdas) != len(outputs):
        raise ValueError(f"{len(lambdas)} loss weights for {len(outputs)} outputs")
    terms = []
    for (probs, disp), lam in zip(outputs, lambdas):
        sm = smooth_l1_loss(disp, disp_gt, valid_mask)
        if probs is not None:
            if target is None:
                target = laplacian_gt(disp_gt, probs.shape[1], b, dtype=probs.dtype)
            term = ops.add(ce_loss(probs, target, valid_mask), ops.scale(sm, mu))
        else:
            term = ops.scale(sm, mu)
        terms.append(ops.scale(term, lam))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total
