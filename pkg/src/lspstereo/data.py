"""Synthetic random-texture stereograms with exact ground truth, and dataset files.

Pixel textures come from a counter-based hash (splitmix64) keyed by seed and
stream, so any pixel's value can be computed independently of the others.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import read_pfm, read_pnm, write_pfm, write_pnm

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAM_LEFT = 1
STREAM_FILL = 2


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_key(*parts: int) -> int:
    """Fold integers into one 64-bit key."""
    z = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            z = _mix(np.asarray(z + np.uint64(p & 0xFFFFFFFFFFFFFFFF) + _GOLDEN, dtype=np.uint64))
    return int(z)


def counter_bytes(key: int, stream: int, count: int) -> np.ndarray:
    """Bytes ``0..count-1`` of the (key, stream) sequence; byte ``i`` depends only on ``i``."""
    base = np.uint64(hash_key(key, stream))
    idx = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(base + (idx + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(56)).astype(np.uint8)


@dataclass
class Shape:
    kind: str
    region: tuple
    disparity: float

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        if self.kind == "rectangle":
            x0, y0, x1, y1 = self.region
            return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        if self.kind == "disc":
            cx, cy, r = self.region
            return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    d_max: int = 32
    shapes: list = field(default_factory=list)
    background: float = 0.0

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("scene size must be positive")
        if not 0 <= self.background < self.d_max:
            raise ValueError(f"background disparity {self.background} outside [0, {self.d_max})")
        for s in self.shapes:
            if not 0 <= s.disparity < self.d_max:
                raise ValueError(f"shape disparity {s.disparity} outside [0, {self.d_max})")
            if s.kind == "rectangle":
                x0, y0, x1, y1 = s.region
                if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                    raise ValueError(f"rectangle {s.region} outside the image")
            elif s.kind == "disc":
                cx, cy, r = s.region
                if not (r > 0 and 0 <= cx - r and cx + r < self.width and 0 <= cy - r and cy + r < self.height):
                    raise ValueError(f"disc {s.region} outside the image")
            else:
                raise ValueError(f"unknown shape kind {s.kind!r}")


@dataclass
class Sample:
    left: np.ndarray
    right: np.ndarray
    gt_disp: np.ndarray
    valid_mask: np.ndarray


def disparity_map(spec: SceneSpec) -> np.ndarray:
    gt = np.full((spec.height, spec.width), spec.background, dtype=np.float64)
    # nearer (larger disparity) shapes are painted last and win
    for s in sorted(spec.shapes, key=lambda s: s.disparity):
        gt[s.mask(spec.height, spec.width)] = s.disparity
    return gt


def generate_stereogram(spec: SceneSpec) -> Sample:
    """Random-texture left view, forward-warped right view, exact disparity and validity mask."""
    spec.validate()
    H, W = spec.height, spec.width
    gt = disparity_map(spec)
    left_bytes = counter_bytes(spec.seed, STREAM_LEFT, 3 * H * W).reshape(3, H, W)

    xs = np.broadcast_to(np.arange(W), (H, W))
    ys = np.broadcast_to(np.arange(H)[:, None], (H, W))
    target = np.floor(xs - gt + 0.5).astype(np.int64)
    inside = target >= 0
    # for each right pixel keep the source with the largest disparity; ties go to the leftmost source
    src_y, src_x, tgt = ys[inside], xs[inside], target[inside]
    d = gt[inside]
    order = np.lexsort((-src_x, d, src_y * W + tgt))
    flat_t = (src_y * W + tgt)[order]
    last = np.r_[flat_t[1:] != flat_t[:-1], True]
    win_t = flat_t[last]
    win_y, win_x = src_y[order][last], src_x[order][last]

    right_bytes = counter_bytes(spec.seed, STREAM_FILL, 3 * H * W).reshape(3, H, W).copy()
    ry, rx = win_t // W, win_t % W
    right_bytes[:, ry, rx] = left_bytes[:, win_y, win_x]

    valid = (xs - gt >= 0).astype(np.float32)
    return Sample(
        left=left_bytes.astype(np.float32) / np.float32(255.0),
        right=right_bytes.astype(np.float32) / np.float32(255.0),
        gt_disp=gt.astype(np.float32),
        valid_mask=valid,
    )


def random_scene(seed: int, height: int = 64, width: int = 64, d_max: int = 32) -> SceneSpec:
    """Scene layout for the default dataset: a textured background plane with 3–6 fronto-parallel shapes."""
    rng = np.random.default_rng(hash_key(seed, 0x5CE7E))
    # ranges scale with d_max; for d_max = 32: background in [2, 8), shapes in [bg + 3, 28)
    unit = d_max / 32.0
    hi = d_max - 4.0 * unit
    background = float(rng.uniform(2.0 * unit, 8.0 * unit))
    shapes = []
    for _ in range(int(rng.integers(3, 7))):
        disp = float(rng.uniform(background + 3.0 * unit, hi))
        if rng.random() < 0.5:
            w = int(rng.integers(max(4, width // 8), max(5, width * 7 // 16)))
            h = int(rng.integers(max(4, height // 8), max(5, height * 7 // 16)))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            shapes.append(Shape("rectangle", (x0, y0, x0 + w, y0 + h), disp))
        else:
            r = float(rng.uniform(max(2.0, min(height, width) / 16), max(3.0, min(height, width) / 5)))
            cx = float(rng.uniform(r, width - 1 - r))
            cy = float(rng.uniform(r, height - 1 - r))
            shapes.append(Shape("disc", (cx, cy, r), disp))
    return SceneSpec(seed=seed, height=height, width=width, d_max=d_max, shapes=shapes, background=background)


# ---------------------------------------------------------------------------
# dataset directories


def sample_paths(root, index: int) -> dict:
    stem = os.path.join(str(root), f"{index:06d}")
    return {
        "left": stem + ".left.ppm",
        "right": stem + ".right.ppm",
        "disp": stem + ".disp.pfm",
        "mask": stem + ".mask.pgm",
    }


def write_sample(root, index: int, sample: Sample) -> None:
    p = sample_paths(root, index)
    write_pnm(p["left"], sample.left)
    write_pnm(p["right"], sample.right)
    write_pfm(p["disp"], sample.gt_disp)
    write_pnm(p["mask"], sample.valid_mask)


def read_sample(root, index: int) -> Sample:
    p = sample_paths(root, index)
    return Sample(
        left=read_pnm(p["left"]),
        right=read_pnm(p["right"]),
        gt_disp=read_pfm(p["disp"]),
        valid_mask=read_pnm(p["mask"]),
    )


def generate_dataset(root, count: int, seed: int, height: int = 64, width: int = 64, d_max: int = 32) -> list:
    Path(root).mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        spec = random_scene(hash_key(seed, i), height, width, d_max)
        write_sample(root, i, generate_stereogram(spec))
        written.append(sample_paths(root, i))
    return written


def dataset_indices(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    idx = sorted(int(p.name.split(".")[0]) for p in root.glob("*.left.ppm"))
    for i in idx:
        for path in sample_paths(root, i).values():
            if not os.path.exists(path):
                raise FileNotFoundError(f"incomplete sample {i}: missing {path}")
    return idx


def load_dataset(root) -> list:
    return [read_sample(root, i) for i in dataset_indices(root)]
