"""Local Similarity Pattern features and their fusion with convolutional features.

An LSP map holds, per pixel, the cosine similarity between the pixel's feature
vector and each neighbour in a dilated square window. Neighbours are ordered
row-major over ``(dy, dx)``, top-left first, with the centre omitted, so a 3×3
window yields 8 channels per dilation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .autodiff import Tensor
from .autodiff import ops

LSP_MODES = ("off", "ss", "sl", "f")


@dataclass
class LspConfig:
    window: int = 3
    dilations: tuple = (1, 2, 4, 8)
    include_center: bool = False
    eps: float = 1e-8
    levels: tuple = (0, 1)

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"LSP window must be odd and >= 3, got {self.window}")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError(f"LSP dilations must be positive, got {self.dilations}")
        if self.eps <= 0:
            raise ValueError("LSP eps must be positive")

    @property
    def neighbors(self) -> int:
        return self.window * self.window - (0 if self.include_center else 1)


@dataclass
class FeaturePyramid:
    levels: list
    strides: list = field(default_factory=lambda: [1, 2])


def neighbor_shifts(window: int, dilation: int, include_center: bool = False) -> list:
    half = window // 2
    shifts = []
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy == 0 and dx == 0 and not include_center:
                continue
            shifts.append((dy * dilation, dx * dilation))
    return shifts


def lsp_single_scale(f: Tensor, dilation: int, config: LspConfig | None = None) -> Tensor:
    config = config or LspConfig()
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    return ops.neighbor_cosine(f, neighbor_shifts(config.window, dilation, config.include_center), config.eps)


def lsp_multi_scale(f: Tensor, config: LspConfig | None = None) -> Tensor:
    config = config or LspConfig()
    maps = [lsp_single_scale(f, r, config) for r in config.dilations]
    return maps[0] if len(maps) == 1 else ops.concat(maps, axis=1)


def _conv_relu(x, params, name, stride=1):
    return ops.relu(ops.conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=1))


def extract_features(image: Tensor, params: Mapping[str, Tensor]) -> FeaturePyramid:
    """Two-level extractor: stride-1 and stride-2 maps, two conv+relu layers each."""
    if image.ndim != 4:
        raise ValueError(f"expected a B×3×H×W image, got {image.shape}")
    if image.shape[2] % 2 or image.shape[3] % 2:
        raise ValueError(f"image size {image.shape[2:]} is not divisible by 2")
    x = _conv_relu(image, params, "feat.conv1")
    l1 = _conv_relu(x, params, "feat.conv2")
    x = _conv_relu(l1, params, "feat.conv3", stride=2)
    l2 = _conv_relu(x, params, "feat.conv4")
    return FeaturePyramid(levels=[l1, l2], strides=[1, 2])


def lsp_branch_inputs(mode: str, config: LspConfig) -> list:
    """Per-branch LSP channel counts for a fusion mode, in concatenation order."""
    mode = mode.lower()
    if mode not in LSP_MODES:
        raise ValueError(f"unknown LSP mode {mode!r}; expected one of {LSP_MODES}")
    k = config.neighbors
    if mode == "off":
        return []
    if mode == "ss":
        return [k]
    if mode == "sl":
        return [k * len(config.dilations)]
    return [k * len(config.dilations) for _ in config.levels]


def fuse_lsp(pyramid: FeaturePyramid, config: LspConfig, mode: str, params: Mapping[str, Tensor]) -> Tensor:
    """Fuse convolutional features with LSP branches into one stride-2 feature map.

    The stride-1 level is brought to stride 2 by a stride-2 conv, and the two
    levels are concatenated into the fused convolutional feature (CF). Modes:

    - ``off``: CF only.
    - ``ss``: single-scale (dilation 1) LSP of CF.
    - ``sl``: multi-scale LSP of CF.
    - ``f``: multi-scale LSP of every level separately.

    Each LSP block goes through its own 1×1 conv; the results are concatenated
    after CF and a final 1×1 conv mixes everything down to the output width.
    """
    mode = mode.lower()
    if mode not in LSP_MODES:
        raise ValueError(f"unknown LSP mode {mode!r}; expected one of {LSP_MODES}")
    l1, l2 = pyramid.levels
    levels = [_conv_relu(l1, params, "fuse.down", stride=2), l2]
    cf = ops.concat(levels, axis=1)
    if mode == "ss":
        sources = [lsp_single_scale(cf, 1, config)]
    elif mode == "sl":
        sources = [lsp_multi_scale(cf, config)]
    elif mode == "f":
        sources = [lsp_multi_scale(levels[i], config) for i in config.levels]
    else:
        sources = []
    branches = [
        ops.conv2d(s, params[f"fuse.lsp{i}.w"], params[f"fuse.lsp{i}.b"]) for i, s in enumerate(sources)
    ]
    mixed = ops.concat([cf] + branches, axis=1) if branches else cf
    return ops.conv2d(mixed, params["fuse.out.w"], params["fuse.out.b"])
