"""The miniature stereo network: features (+LSP) → cost volume → regression → refinement."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import ops
from .cost import match_and_aggregate, regress_disparity, total_loss
from .lsp import LspConfig, extract_features, fuse_lsp, lsp_branch_inputs
from .refine import RefineConfig, csr_refine, dsr_refine, predict_offsets


@dataclass
class ModelConfig:
    d_max: int = 32
    lsp: str = "f"
    refine: str = "csr"
    neighbors: int = 2
    feat_ch: int = 16
    fused_ch: int = 32
    lsp_ch: int = 8
    agg_ch: int = 8
    unet: tuple = (16, 32, 32)
    dilations: tuple = (1, 2, 4, 8)
    refine_eps: float = 1e-6

    def __post_init__(self):
        self.lsp = self.lsp.lower()
        self.refine = self.refine.lower()
        if self.d_max < 2 or self.d_max % 2:
            raise ValueError(f"d_max must be an even number >= 2, got {self.d_max}")
        lsp_branch_inputs(self.lsp, self.lsp_config)
        RefineConfig(neighbors=self.neighbors, mode=self.refine)

    @property
    def lsp_config(self) -> LspConfig:
        return LspConfig(dilations=self.dilations)

    @property
    def refine_config(self) -> RefineConfig:
        return RefineConfig(neighbors=self.neighbors, mode=self.refine, widths=tuple(self.unet), eps=self.refine_eps)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Weight shapes in a fixed order; biases follow each weight."""
    F, A = cfg.feat_ch, cfg.agg_ch
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    shapes["feat.conv1"] = (F, 3, 3, 3)
    shapes["feat.conv2"] = (F, F, 3, 3)
    shapes["feat.conv3"] = (F, F, 3, 3)
    shapes["feat.conv4"] = (F, F, 3, 3)
    shapes["fuse.down"] = (F, F, 3, 3)
    branches = lsp_branch_inputs(cfg.lsp, cfg.lsp_config)
    for i, k in enumerate(branches):
        shapes[f"fuse.lsp{i}"] = (cfg.lsp_ch, k, 1, 1)
    shapes["fuse.out"] = (cfg.fused_ch, 2 * F + cfg.lsp_ch * len(branches), 1, 1)
    shapes["agg.conv1"] = (A, 2 * cfg.fused_ch, 3, 3, 3)
    shapes["agg.conv2"] = (A, A, 3, 3, 3)
    shapes["agg.conv3"] = (1, A, 3, 3, 3)
    if cfg.refine_config.enabled:
        u0, u1, u2 = cfg.unet
        shapes["refine.enc1"] = (u0, 3, 3, 3)
        shapes["refine.enc2"] = (u1, u0, 3, 3)
        shapes["refine.enc3"] = (u2, u1, 3, 3)
        shapes["refine.dec2"] = (u1, u2 + u1, 3, 3)
        shapes["refine.dec1"] = (u0, u1 + u0, 3, 3)
        shapes["refine.head"] = (3 * cfg.neighbors, u0, 3, 3)
    return shapes


ZERO_INIT = ("refine.head",)
ZERO_INIT_PREFIX = ("fuse.lsp",)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """He-uniform weights (±sqrt(6/fan_in)), zero biases; the offset head and LSP branches start at zero."""
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        b = np.zeros(shape[0])
        if name in ZERO_INIT or name.startswith(ZERO_INIT_PREFIX):
            w[...] = 0.0
            b[...] = 0.0
        params[name + ".w"] = Tensor(w.astype(dtype), requires_grad=True, name=name + ".w")
        params[name + ".b"] = Tensor(b.astype(dtype), requires_grad=True, name=name + ".b")
    return params


def load_params(cfg: ModelConfig, arrays, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """Build a parameter dict from loaded arrays, checking names and shapes against ``cfg``."""
    expected = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        expected[name + ".w"] = shape
        expected[name + ".b"] = (shape[0],)
    missing = [k for k in expected if k not in arrays]
    extra = [k for k in arrays if k not in expected]
    if missing or extra:
        raise ValueError(f"checkpoint does not match model config (missing {missing}, unexpected {extra})")
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in expected.items():
        arr = np.asarray(arrays[name])
        if arr.shape != tuple(shape):
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {tuple(shape)}")
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class ModelOutput:
    c0: Tensor
    probs0: Tensor
    disp0: Tensor
    cr: Optional[Tensor] = None
    probs_r: Optional[Tensor] = None
    disp_r: Optional[Tensor] = None
    offsets: Optional[Tensor] = None
    modulation: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)

    @property
    def disparity(self) -> Tensor:
        return self.disp_r if self.disp_r is not None else self.disp0

    def supervised(self) -> list:
        """(probs, disparity) pairs for the loss: the initial regression and the refined output.

        Without CSR the refined stage keeps the initial distribution, so the
        pair count (and the loss at initialisation) is the same for every
        refinement mode.
        """
        return [(self.probs0, self.disp0), (self.probs_r, self.disp_r)]


def features(image: Tensor, params, cfg: ModelConfig) -> Tensor:
    return fuse_lsp(extract_features(image, params), cfg.lsp_config, cfg.lsp, params)


def forward(params, cfg: ModelConfig, left: Tensor, right: Tensor) -> ModelOutput:
    """Run the network on B×3×H×W image pairs; disparities come out at full resolution."""
    if left.shape != right.shape:
        raise ValueError(f"left/right shapes differ: {left.shape} vs {right.shape}")
    B = left.shape[0]
    both = features(ops.concat([left, right], axis=0), params, cfg)
    f_left = ops.slice_axis(both, 0, 0, B)
    f_right = ops.slice_axis(both, 0, B, 2 * B)
    logits_half = match_and_aggregate(f_left, f_right, cfg.d_max // 2, params)
    c0 = ops.upsample_disparity2x(ops.upsample2x(logits_half, "bilinear"))
    probs0, disp0 = regress_disparity(c0)
    out = ModelOutput(c0=c0, probs0=probs0, disp0=disp0)
    rcfg = cfg.refine_config
    if not rcfg.enabled:
        out.cr, out.probs_r, out.disp_r = c0, probs0, disp0
        return out
    offsets, modulation = predict_offsets(left, params, rcfg.neighbors)
    out.offsets, out.modulation = offsets, modulation
    if rcfg.mode == "dsr":
        out.cr, out.probs_r = c0, probs0
        out.disp_r = dsr_refine(disp0, offsets, modulation, rcfg.eps)
    else:
        weights = modulation if rcfg.mode == "csr" else None
        out.cr = csr_refine(c0, offsets, weights, rcfg.eps)
        out.probs_r, out.disp_r = regress_disparity(out.cr)
    return out


@dataclass
class LossConfig:
    lambdas: tuple = (0.5, 1.0)
    mu: float = 0.1
    bandwidth: float = 2.0


def model_loss(out: ModelOutput, disp_gt: np.ndarray, mask: np.ndarray, loss_cfg: LossConfig | None = None) -> Tensor:
    loss_cfg = loss_cfg or LossConfig()
    return total_loss(out.supervised(), disp_gt, mask, loss_cfg.lambdas, loss_cfg.mu, b=loss_cfg.bandwidth)
