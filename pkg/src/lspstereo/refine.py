"""Cost and disparity self-reassembling (CSR / DSR).

A small U-Net over the left image predicts, per pixel, ``N`` fractional
neighbour offsets and ``N`` modulation weights. The refined value at a pixel is
the modulation-weighted mean of the input (a cost vector or a disparity)
bilinearly sampled at those neighbours. Offsets are shared across the
disparity axis and measured in pixels at the operating resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import ops

REFINE_MODES = ("none", "dsr", "csr", "csr_unweighted")


@dataclass
class RefineConfig:
    neighbors: int = 2
    mode: str = "csr"
    widths: tuple = (16, 32, 32)
    eps: float = 1e-6

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in REFINE_MODES:
            raise ValueError(f"unknown refinement mode {self.mode!r}; expected one of {REFINE_MODES}")
        if self.neighbors < 0:
            raise ValueError("neighbour count must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.mode != "none" and self.neighbors > 0


def _conv(x, params, name, stride=1, act=True):
    y = ops.conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=1)
    return ops.relu(y) if act else y


def predict_offsets(image: Tensor, params: Mapping[str, Tensor], neighbors: int) -> tuple[Tensor, Tensor]:
    """Return (offsets B×2N×H×W ordered Δx₁,Δy₁,…, modulation B×N×H×W in (0,1)).

    Both are zero / one half at initialisation, so refinement starts as the identity.
    """
    B, _, H, W = image.shape
    if H % 4 or W % 4:
        raise ValueError(f"offset network needs H and W divisible by 4, got {H}×{W}")
    e1 = _conv(image, params, "refine.enc1")
    e2 = _conv(e1, params, "refine.enc2", stride=2)
    e3 = _conv(e2, params, "refine.enc3", stride=2)
    d2 = _conv(ops.concat([ops.upsample2x(e3, "bilinear"), e2]), params, "refine.dec2")
    d1 = _conv(ops.concat([ops.upsample2x(d2, "bilinear"), e1]), params, "refine.dec1")
    head = _conv(d1, params, "refine.head", act=False)
    if head.shape[1] != 3 * neighbors:
        raise ValueError(f"head emits {head.shape[1]} channels, expected {3 * neighbors}")
    # Neighbour i's head output is scaled by i + 1. With a zero-initialised head
    # all neighbours would otherwise receive identical gradients and never separate.
    offsets = ops.concat([
        ops.scale(ops.channel_slice(head, 2 * i, 2 * i + 2), float(i + 1)) for i in range(neighbors)
    ])
    modulation = ops.sigmoid(ops.channel_slice(head, 2 * neighbors, 3 * neighbors))
    return offsets, modulation


def _coordinate(offsets: Tensor, channel: int, base: np.ndarray) -> Tensor:
    B, _, H, W = offsets.shape
    delta = ops.reshape(ops.channel_slice(offsets, channel, channel + 1), (B, H, W))
    return ops.add(delta, Tensor(np.broadcast_to(base, (B, H, W)).astype(offsets.dtype)))


def sample_neighbors(values: Tensor, offsets: Tensor) -> Tensor:
    """Bilinear samples of ``values`` (B×C×H×W) at each neighbour → B×N×C×H×W."""
    B, C, H, W = values.shape
    if offsets.shape[0] != B or offsets.shape[2:] != (H, W) or offsets.shape[1] % 2:
        raise ValueError(f"offset field {offsets.shape} does not match values {values.shape}")
    n = offsets.shape[1] // 2
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    samples = []
    for i in range(n):
        xs = _coordinate(offsets, 2 * i, gx)
        ys = _coordinate(offsets, 2 * i + 1, gy)
        samples.append(ops.bilinear_sample(values, xs, ys))
    return ops.stack(samples, axis=1)


def csr_refine(c0: Tensor, offsets: Tensor, modulation: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Reassemble B×D×H×W cost logits from sampled neighbours.

    Without ``modulation`` the neighbours are averaged with equal weight;
    otherwise the result is Σ mᵢ·Cᵢ / max(Σ mᵢ, eps).
    """
    if offsets.shape[1] == 0:
        return c0
    samples = sample_neighbors(c0, offsets)
    B, N = samples.shape[:2]
    H, W = c0.shape[2:]
    if modulation is None:
        return ops.modulated_mean(samples, Tensor(np.ones((B, N, H, W), dtype=c0.dtype)), 0.0)
    if modulation.shape != (B, N, H, W):
        raise ValueError(f"modulation shape {modulation.shape} != {(B, N, H, W)}")
    return ops.modulated_mean(samples, modulation, eps)


def dsr_refine(d0: Tensor, offsets: Tensor, modulation: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Reassemble a B×H×W disparity map; identical to CSR on a one-channel volume."""
    if offsets.shape[1] == 0:
        return d0
    B, H, W = d0.shape
    out = csr_refine(ops.reshape(d0, (B, 1, H, W)), offsets, modulation, eps)
    return ops.reshape(out, (B, H, W))
