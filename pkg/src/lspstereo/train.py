"""Training, evaluation and inference loops."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Adam, Tape, Tensor, load_checkpoint, save_checkpoint
from .config import RunConfig, format_model_config, read_config
from .cost import laplacian_gt
from .data import Sample, hash_key, load_dataset
from .metrics import MetricsReport, aggregate_metrics, compute_metrics
from .model import ModelConfig, forward, init_params, load_params, model_loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.lacm"
CONFIG_NAME = "config.txt"
LOG_NAME = "train.log"


@dataclass
class TrainResult:
    params: dict
    config: RunConfig
    log: list = field(default_factory=list)
    final: Optional[MetricsReport] = None


def split_samples(samples: Sequence[Sample], holdout: int) -> tuple[list, list]:
    if holdout < 1 or holdout >= len(samples):
        raise ValueError(f"held-out split of {holdout} needs a dataset with more than {holdout} samples, got {len(samples)}")
    return list(samples[:-holdout]), list(samples[-holdout:])


def _check_consistent(cfg: RunConfig, samples: Sequence[Sample]) -> None:
    shapes = {s.left.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"dataset mixes image sizes: {sorted(shapes)}")
    _, H, W = shapes.pop()
    if H % 4 or W % 4:
        raise ValueError(f"image size {H}×{W} must be divisible by 4")
    if cfg.dmax // 2 > W // 2:
        raise ValueError(f"dmax {cfg.dmax} exceeds image width {W}")
    if cfg.crop_h and (cfg.crop_h % 4 or cfg.crop_h > H):
        raise ValueError(f"crop_h {cfg.crop_h} must be a multiple of 4 no larger than {H}")
    for s in samples:
        if float(s.gt_disp[s.valid_mask > 0].max(initial=0.0)) >= cfg.dmax:
            raise ValueError(f"ground truth exceeds dmax {cfg.dmax}")


def _batch(samples: Sequence[Sample], rows: Optional[Sequence[int]] = None, crop_h: int = 0, d_max: Optional[int] = None):
    left, right, gt, mask = [], [], [], []
    for k, s in enumerate(samples):
        ys = slice(None) if rows is None else slice(rows[k], rows[k] + crop_h)
        left.append(s.left[:, ys])
        right.append(s.right[:, ys])
        g = s.gt_disp[ys]
        m = s.valid_mask[ys] > 0
        if d_max is not None:
            m &= (g >= 0) & (g < d_max)
        gt.append(g)
        mask.append(m.astype(np.float32))
    return np.stack(left), np.stack(right), np.stack(gt), np.stack(mask)


def predict(params, mcfg: ModelConfig, samples: Sequence[Sample], batch: int = 8, keep=False) -> list:
    """Refined disparity (or full ModelOutput when ``keep``) for each sample, without recording gradients."""
    outs = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        left, right, _, _ = _batch(chunk)
        out = forward(params, mcfg, Tensor(left), Tensor(right))
        if keep:
            outs.append(out)
        else:
            outs.extend(out.disparity.data[k].copy() for k in range(len(chunk)))
    return outs


def evaluate_params(params, mcfg: ModelConfig, samples: Sequence[Sample]) -> MetricsReport:
    preds = predict(params, mcfg, samples)
    reports = []
    for s, p in zip(samples, preds):
        mask = (s.valid_mask > 0) & (s.gt_disp >= 0) & (s.gt_disp < mcfg.d_max)
        reports.append(compute_metrics(p, s.gt_disp, mask))
    return aggregate_metrics(reports)


def cost_cross_entropy(params, mcfg: ModelConfig, samples: Sequence[Sample], bandwidth: float = 2.0) -> tuple[float, float]:
    """Mean held-out cross-entropy of softmax(C_0) and softmax(C_r) against the Laplacian target."""
    totals = np.zeros(2)
    count = 0.0
    for i in range(0, len(samples), 8):
        chunk = samples[i:i + 8]
        left, right, gt, mask = _batch(chunk, d_max=mcfg.d_max)
        out = forward(params, mcfg, Tensor(left), Tensor(right))
        target = laplacian_gt(gt, mcfg.d_max, bandwidth, dtype=np.float64)
        for j, probs in enumerate((out.probs0, out.probs_r)):
            nll = -(target * np.log(probs.data.astype(np.float64) + 1e-12)).sum(axis=1)
            totals[j] += float((nll * mask).sum())
        count += float(mask.sum())
    return totals[0] / count, totals[1] / count


def train(
    cfg: RunConfig,
    samples: Optional[Sequence[Sample]] = None,
    on_log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Optimise the configured model with Adam for ``cfg.iters`` steps.

    Every ``log_every`` iterations (and at the end) the mean training loss over
    the window and the held-out metrics are logged. If ``cfg.out`` is set the
    checkpoint, model config and log are written there.
    """
    if samples is None:
        if not cfg.data:
            raise ValueError("no dataset given")
        samples = load_dataset(cfg.data)
    mcfg = cfg.model_config()
    lcfg = cfg.loss_config()
    train_set, held = split_samples(samples, cfg.holdout)
    _check_consistent(cfg, samples)
    if cfg.iters < 0 or cfg.batch < 1 or cfg.log_every < 1:
        raise ValueError("iters must be >= 0, batch and log_every >= 1")

    params = init_params(mcfg, seed=hash_key(cfg.seed, 1))
    opt = Adam(list(params.values()), lr=cfg.lr)
    rng = np.random.default_rng(hash_key(cfg.seed, 2))
    H = train_set[0].left.shape[1]
    crop = cfg.crop_h or H

    result = TrainResult(params=params, config=cfg)
    lines: list = []

    def emit(line: str) -> None:
        lines.append(line)
        logger.info(line)
        if on_log is not None:
            on_log(line)

    window = []
    decay_after = int(cfg.lr_decay_at * cfg.iters)
    for it in range(1, cfg.iters + 1):
        if it == decay_after + 1:
            opt.state.lr = cfg.lr * cfg.lr_decay
        while True:
            picks = rng.integers(0, len(train_set), size=cfg.batch)
            rows = rng.integers(0, H - crop + 1, size=cfg.batch)
            chosen = [train_set[i] for i in picks]
            left, right, gt, mask = _batch(chosen, rows, crop, d_max=mcfg.d_max)
            if mask.sum() > 0:
                break
        opt.zero_grad()
        with Tape() as tape:
            out = forward(params, mcfg, Tensor(left), Tensor(right))
            loss = model_loss(out, gt, mask, lcfg)
        tape.backward(loss)
        opt.step()
        window.append(loss.data.item())
        if it % cfg.log_every == 0 or it == cfg.iters:
            report = evaluate_params(params, mcfg, held)
            entry = {"iter": it, "loss": float(np.mean(window)), "epe": report.epe, "gt1px": report.gt1px}
            result.log.append(entry)
            emit(f"iter {it} loss {entry['loss']!r} heldout_epe {report.epe!r} heldout_gt1px {report.gt1px!r}")
            window = []
            result.final = report
    if result.final is None:
        result.final = evaluate_params(params, mcfg, held)
        emit(f"iter 0 heldout_epe {result.final.epe!r} heldout_gt1px {result.final.gt1px!r}")

    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        save_checkpoint(os.path.join(cfg.out, CHECKPOINT_NAME), {k: v.data for k, v in params.items()})
        with open(os.path.join(cfg.out, CONFIG_NAME), "w", encoding="utf-8") as fh:
            fh.write(format_model_config(cfg))
        with open(os.path.join(cfg.out, LOG_NAME), "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
    return result


def load_model(ckpt_path: str, cfg: Optional[RunConfig] = None, overrides: Optional[dict] = None) -> tuple:
    """Rebuild (params, RunConfig) from a checkpoint and the config saved beside it."""
    cfg = cfg or RunConfig()
    side = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), CONFIG_NAME)
    if os.path.exists(side):
        cfg = cfg.updated(**read_config(side))
    if overrides:
        cfg = cfg.updated(**overrides)
    params = load_params(cfg.model_config(), load_checkpoint(ckpt_path))
    return params, cfg


def evaluate(params, cfg: RunConfig, samples: Sequence[Sample]) -> MetricsReport:
    return evaluate_params(params, cfg.model_config(), samples)


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"
