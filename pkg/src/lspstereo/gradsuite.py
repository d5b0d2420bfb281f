"""Finite-difference gradient checks for every differentiable operation.

All checks run in float64 with central differences (h = 1e-4) over several
seeds. Inputs are drawn away from the non-differentiable points of each op
(relu at 0, smooth-L1 at ±1, integer sampling coordinates) since a central
difference straddling a kink does not estimate a derivative.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable

import numpy as np

from .autodiff import GradCheckReport, Tensor, finite_diff_check
from .autodiff import ops
from .cost import ce_loss, laplacian_gt, smooth_l1_loss
from .lsp import neighbor_shifts
from .model import ModelConfig, forward, init_params, model_loss
from .refine import csr_refine, dsr_refine

H_STEP = 1e-4
TOLERANCE = 1e-4
# five fixed random 64-bit seeds
SEEDS = (14203337419451325785, 4593208366425493727, 11868442101463596233, 8360130853779007460, 6402930766210045390)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _fractional(rng, lo, hi, shape):
    """Coordinates whose fractional part stays in [0.1, 0.9]."""
    return rng.integers(lo, hi, size=shape) + rng.uniform(0.1, 0.9, size=shape)


def _check(name, fn, inputs, seed) -> GradCheckReport:
    return finite_diff_check(fn, inputs, h=H_STEP, tolerance=TOLERANCE, seed=seed, name=name)


# each case maps a seed to one report


def case_conv2d(seed):
    rng = np.random.default_rng(seed)
    stride, pad, dil = [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1), (1, 1, 1)][seed % 5]
    x, w, b = _t(rng.standard_normal((2, 2, 6, 7))), _t(rng.standard_normal((3, 2, 3, 3))), _t(rng.standard_normal(3))
    return _check(f"conv2d[s{stride},p{pad},d{dil}]", lambda x, w, b: ops.conv2d(x, w, b, stride, pad, dil), [x, w, b], seed)


def case_conv3d(seed):
    rng = np.random.default_rng(seed)
    stride = 2 if seed % 2 else 1
    x, w, b = _t(rng.standard_normal((1, 2, 4, 5, 5))), _t(rng.standard_normal((2, 2, 3, 3, 3))), _t(rng.standard_normal(2))
    return _check(f"conv3d[s{stride}]", lambda x, w, b: ops.conv3d(x, w, b, stride, 1), [x, w, b], seed)


def case_concat_volume(seed):
    rng = np.random.default_rng(seed)
    fl, fr = _t(rng.standard_normal((1, 2, 3, 6))), _t(rng.standard_normal((1, 2, 3, 6)))
    return _check("concat_volume", lambda a, b: ops.concat_volume(a, b, 4), [fl, fr], seed)


def case_concat_volume_conv3d(seed):
    rng = np.random.default_rng(seed)
    fl, fr = _t(rng.standard_normal((1, 2, 3, 6))), _t(rng.standard_normal((1, 2, 3, 6)))
    w, b = _t(rng.standard_normal((2, 4, 3, 3, 3))), _t(rng.standard_normal(2))
    return _check("concat_volume_conv3d", lambda a, c, w, b: ops.concat_volume_conv3d(a, c, w, b, 4), [fl, fr, w, b], seed)


def case_relu(seed):
    rng = np.random.default_rng(seed)
    return _check("relu", ops.relu, [_t(_away_from_zero(rng, (3, 4, 5)))], seed)


def case_sigmoid(seed):
    rng = np.random.default_rng(seed)
    return _check("sigmoid", ops.sigmoid, [_t(3 * rng.standard_normal((3, 4, 5)))], seed)


def case_softmax(seed):
    rng = np.random.default_rng(seed)
    axis = seed % 3
    return _check(f"softmax_axis[{axis}]", lambda x: ops.softmax_axis(x, axis), [_t(2 * rng.standard_normal((3, 4, 5)))], seed)


def case_weighted_index_sum(seed):
    rng = np.random.default_rng(seed)
    return _check("weighted_index_sum", lambda p: ops.weighted_index_sum(p, 1), [_t(rng.random((2, 5, 3, 3)))], seed)


def case_upsample(seed):
    rng = np.random.default_rng(seed)
    mode = "nearest" if seed % 2 else "bilinear"
    return _check(f"upsample2x[{mode}]", lambda x: ops.upsample2x(x, mode), [_t(rng.standard_normal((1, 2, 3, 4)))], seed)


def case_upsample_disparity(seed):
    rng = np.random.default_rng(seed)
    return _check("upsample_disparity2x", ops.upsample_disparity2x, [_t(rng.standard_normal((2, 4, 3, 3)))], seed)


def case_pointwise(seed):
    rng = np.random.default_rng(seed)
    kind = ("add", "mul", "concat_channels", "scale", "add")[seed % 5]
    a = _t(rng.standard_normal((2, 3, 4, 4)))
    if kind == "scale":
        return _check("pointwise[scale]", lambda a: ops.pointwise(a, 1.7, "scale"), [a], seed)
    shape = (2, 2, 4, 4) if kind == "concat_channels" else (2, 3, 4, 4)
    b = _t(rng.standard_normal(shape))
    return _check(f"pointwise[{kind}]", lambda a, b: ops.pointwise(a, b, kind), [a, b], seed)


def case_reduce_mean(seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((3, 4, 5)) < 0.6).astype(np.float64)
    mask.flat[0] = 1.0
    return _check("reduce_mean", lambda x: ops.reduce_mean(x, mask), [_t(rng.standard_normal((3, 4, 5)))], seed)


def case_lsp_cosine(seed):
    rng = np.random.default_rng(seed)
    dilation = (1, 2, 1, 2, 3)[seed % 5]
    shifts = neighbor_shifts(3, dilation)
    f = _t(rng.standard_normal((1, 3, 6, 7)))
    return _check(f"lsp_cosine[r{dilation}]", lambda f: ops.neighbor_cosine(f, shifts, 1e-8), [f], seed)


def case_bilinear_sample(seed):
    rng = np.random.default_rng(seed)
    H, W = 5, 6
    src = _t(rng.standard_normal((1, 2, H, W)))
    # mostly interior, with a few points beyond the border where the clamp applies
    xs = _fractional(rng, -1, W, (1, H, W))
    ys = _fractional(rng, -1, H, (1, H, W))
    return _check("bilinear_sample", ops.bilinear_sample, [src, _t(xs), _t(ys)], seed)


def _refine_inputs(rng, N, C, H=5, W=6):
    values = _t(rng.standard_normal((1, C, H, W)))
    gy, gx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    offs = np.empty((1, 2 * N, H, W))
    for i in range(N):
        offs[0, 2 * i] = _fractional(rng, 0, W - 1, (H, W)) - gx
        offs[0, 2 * i + 1] = _fractional(rng, 0, H - 1, (H, W)) - gy
    m = _t(rng.uniform(0.1, 0.9, size=(1, N, H, W)))
    return values, _t(offs), m


def case_csr(seed):
    rng = np.random.default_rng(seed)
    c0, offs, m = _refine_inputs(rng, N=2, C=4)
    return _check("csr_refine", lambda c, o, m: csr_refine(c, o, m), [c0, offs, m], seed)


def case_dsr(seed):
    rng = np.random.default_rng(seed)
    d0, offs, m = _refine_inputs(rng, N=2, C=1)
    B, _, H, W = d0.shape
    d0 = _t(d0.data.reshape(B, H, W))
    return _check("dsr_refine", lambda d, o, m: dsr_refine(d, o, m), [d0, offs, m], seed)


def case_ce_loss(seed):
    rng = np.random.default_rng(seed)
    D = 6
    logits = rng.standard_normal((2, D, 3, 4))
    gt = rng.uniform(0, D - 1, size=(2, 3, 4))
    target = laplacian_gt(gt, D, 2.0, dtype=np.float64)
    mask = (rng.random((2, 3, 4)) < 0.8).astype(np.float64)
    mask.flat[0] = 1.0
    return _check("ce_loss", lambda x: ce_loss(ops.softmax_axis(x, 1), target, mask), [_t(logits)], seed)


def case_smooth_l1(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 5, size=(2, 4, 4))
    diff = rng.uniform(0.05, 0.95, size=gt.shape) * rng.choice([-1, 1], size=gt.shape)
    far = rng.random(gt.shape) < 0.5
    diff[far] += np.sign(diff[far]) * 1.0
    mask = np.ones(gt.shape)
    return _check("smooth_l1_loss", lambda p: smooth_l1_loss(p, gt, mask), [_t(gt + diff)], seed)


GRADCHECK_MODEL = ModelConfig(
    d_max=8, lsp="f", refine="csr", neighbors=2,
    feat_ch=3, fused_ch=4, lsp_ch=2, agg_ch=2, unet=(2, 2, 2), dilations=(1, 2),
)


def case_model(seed, cfg: ModelConfig = GRADCHECK_MODEL, name="model_end_to_end"):
    rng = np.random.default_rng(seed)
    H, W = 8, 8
    params = init_params(cfg, seed=seed, dtype=np.float64)
    if "refine.head.w" in params:
        # a zero head samples at integer coordinates, where bilinear sampling has a kink
        params["refine.head.w"].data[...] = 0.5 * rng.standard_normal(params["refine.head.w"].shape)
        params["refine.head.b"].data[...] = rng.uniform(0.2, 0.4, size=params["refine.head.b"].shape)
    left = Tensor(rng.random((1, 3, H, W)))
    right = Tensor(rng.random((1, 3, H, W)))
    gt = rng.uniform(0.5, cfg.d_max - 1.5, size=(1, H, W))
    mask = np.ones((1, H, W))
    names = list(params)

    def fn(*ps):
        return model_loss(forward(dict(zip(names, ps)), cfg, left, right), gt, mask)

    return _check(name, fn, list(params.values()), seed)


def case_model_alternating(seed):
    """End-to-end model with CSR on even seeds and DSR on odd seeds."""
    if seed % 2:
        return case_model(seed, replace(GRADCHECK_MODEL, refine="dsr"), "model_end_to_end[dsr]")
    return case_model(seed, GRADCHECK_MODEL, "model_end_to_end[csr]")


CASES: dict = {
    "conv2d": case_conv2d,
    "conv3d": case_conv3d,
    "concat_volume": case_concat_volume,
    "concat_volume_conv3d": case_concat_volume_conv3d,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "softmax_axis": case_softmax,
    "weighted_index_sum": case_weighted_index_sum,
    "upsample2x": case_upsample,
    "upsample_disparity2x": case_upsample_disparity,
    "pointwise": case_pointwise,
    "reduce_mean": case_reduce_mean,
    "lsp_cosine": case_lsp_cosine,
    "bilinear_sample": case_bilinear_sample,
    "csr_refine": case_csr,
    "dsr_refine": case_dsr,
    "ce_loss": case_ce_loss,
    "smooth_l1_loss": case_smooth_l1,
    "model_end_to_end": case_model_alternating,
}


def run_suite(seeds: Iterable[int] = SEEDS, only=None, on_report: Callable | None = None) -> dict:
    """Run each case over all seeds; returns ``{case: [reports]}``."""
    results = {}
    for name, case in CASES.items():
        if only and name not in only:
            continue
        reports = []
        for seed in seeds:
            r = case(seed)
            reports.append(r)
            if on_report is not None:
                on_report(r)
        results[name] = reports
    return results


def summary_lines(results: dict) -> list:
    """One PASS/FAIL line per op with the worst relative error across seeds."""
    lines = []
    for name, reports in results.items():
        worst = max(r.max_rel_error for r in reports)
        ok = all(r.passed for r in reports)
        n = sum(r.n_elements for r in reports)
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: max_rel_err={worst:.3e} over {len(reports)} seeds, {n} elements")
    return lines
