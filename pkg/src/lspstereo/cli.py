"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from .autodiff import CheckpointError, Tensor
from .config import RunConfig, apply_overrides, read_config
from .data import generate_dataset, load_dataset
from .fileio import FormatError, read_pnm, write_pfm
from .lsp import LSP_MODES, LspConfig, extract_features, lsp_single_scale
from .model import forward
from .refine import REFINE_MODES
from .train import CHECKPOINT_NAME, evaluate, load_model, predict, report_json, split_samples, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# flags that map onto RunConfig fields
_CONFIG_FLAGS = ("seed", "data", "out", "dmax", "lsp", "refine", "neighbors", "iters", "height", "width", "count",
                 "holdout", "lr", "batch", "crop_h", "log_every")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--data")
    p.add_argument("--dmax", type=int)
    p.add_argument("--lsp", choices=LSP_MODES)
    p.add_argument("--refine", choices=REFINE_MODES)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop-h", dest="crop_h", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lspstereo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="write a synthetic stereo dataset")
    _common(p)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print a JSON report")
    _common(p)
    p.add_argument("--ckpt", help=f"checkpoint (default <out>/{CHECKPOINT_NAME})")
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.add_argument("--report", help="also write the JSON report to this file")

    p = sub.add_parser("infer", help="predict a disparity map for one image pair")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op")
    p.add_argument("--op", action="append", help="restrict to these ops (repeatable)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("lsp-dump", help="write one LSP channel as PFM")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--ckpt", help="use the trained stride-1 features instead of raw pixels")

    p = sub.add_parser("refine-viz", help="dump the sampled neighbour coordinates for one pixel")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--pixel", help="y,x (default: image centre)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = apply_overrides(cfg, read_config(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    flags = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    return apply_overrides(cfg, flags)


def _require(cfg: RunConfig, *keys) -> None:
    missing = [k for k in keys if getattr(cfg, k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k for k in missing))


def cmd_gen(args, cfg: RunConfig) -> int:
    _require(cfg, "out")
    generate_dataset(cfg.out, cfg.count, cfg.seed, cfg.height, cfg.width, cfg.dmax)
    print(f"wrote {cfg.count} samples to {cfg.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    train(cfg, on_log=lambda line: print(line, flush=True))
    print(f"checkpoint: {os.path.join(cfg.out, CHECKPOINT_NAME)}")
    return EXIT_OK


def _checkpoint_path(args, cfg: RunConfig) -> str:
    if args.ckpt:
        return args.ckpt
    if cfg.out:
        return os.path.join(cfg.out, CHECKPOINT_NAME)
    raise UsageError("--ckpt (or --out holding a checkpoint) is required")


def _model_overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("dmax", "lsp", "refine", "neighbors") if getattr(args, k, None) is not None}


def cmd_eval(args, cfg: RunConfig) -> int:
    _require(cfg, "data")
    params, cfg = load_model(_checkpoint_path(args, cfg), cfg, _model_overrides(args))
    samples = load_dataset(cfg.data)
    if args.split != "all":
        train_set, held = split_samples(samples, cfg.holdout)
        samples = held if args.split == "heldout" else train_set
    text = report_json(evaluate(params, cfg, samples))
    sys.stdout.write(text)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def _load_image(path: str) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 3:
        raise FormatError(f"{path}: expected a colour (P6) image")
    return img


def cmd_infer(args, cfg: RunConfig) -> int:
    _require(cfg, "out")
    params, cfg = load_model(args.ckpt, cfg, _model_overrides(args))
    left, right = _load_image(args.left), _load_image(args.right)
    from .data import Sample

    dummy = np.zeros(left.shape[1:], dtype=np.float32)
    disp = predict(params, cfg.model_config(), [Sample(left, right, dummy, dummy)])[0]
    write_pfm(cfg.out, disp)
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_suite, summary_lines

    if args.op:
        unknown = [o for o in args.op if o not in CASES]
        if unknown:
            raise UsageError(f"unknown op(s) {unknown}; choose from {sorted(CASES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    on_report = (lambda r: print("  " + r.line(), flush=True)) if args.verbose else None
    results = run_suite(range(args.seeds), only=args.op, on_report=on_report)
    lines = summary_lines(results)
    for line in lines:
        print(line)
    return EXIT_OK if all(line.startswith("PASS") for line in lines) else EXIT_RUNTIME


def cmd_lsp_dump(args, cfg: RunConfig) -> int:
    _require(cfg, "out")
    img = Tensor(_load_image(args.image)[None])
    if args.ckpt:
        params, _ = load_model(args.ckpt, cfg, _model_overrides(args))
        feats = extract_features(img, params).levels[0]
    else:
        feats = img
    lsp = lsp_single_scale(feats, args.dilation, LspConfig())
    if not 0 <= args.channel < lsp.shape[1]:
        raise UsageError(f"--channel must be in [0, {lsp.shape[1]})")
    write_pfm(cfg.out, lsp.data[0, args.channel])
    print(f"wrote {cfg.out}")
    return EXIT_OK


def cmd_refine_viz(args, cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    params, cfg = load_model(args.ckpt, cfg, _model_overrides(args))
    mcfg = cfg.model_config()
    if not mcfg.refine_config.enabled:
        raise UsageError("the checkpoint has no refinement stage")
    samples = load_dataset(cfg.data)
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample must be in [0, {len(samples)})")
    s = samples[args.sample]
    H, W = s.gt_disp.shape
    if args.pixel:
        try:
            y, x = (int(v) for v in args.pixel.split(","))
        except ValueError as exc:
            raise UsageError("--pixel must be y,x") from exc
    else:
        y, x = H // 2, W // 2
    if not (0 <= y < H and 0 <= x < W):
        raise UsageError(f"--pixel outside the {H}×{W} image")
    out = forward(params, mcfg, Tensor(s.left[None]), Tensor(s.right[None]))
    offs, mod = out.offsets.data[0], out.modulation.data[0]
    lines = [
        f"# sample {args.sample} pixel y={y} x={x} gt={float(s.gt_disp[y, x])!r} pred={float(out.disparity.data[0, y, x])!r}",
        "# neighbour x y modulation gt_at_nearest",
    ]
    for i in range(mcfg.neighbors):
        nx = x + float(offs[2 * i, y, x])
        ny = y + float(offs[2 * i + 1, y, x])
        gx = int(np.clip(np.floor(nx + 0.5), 0, W - 1))
        gy = int(np.clip(np.floor(ny + 0.5), 0, H - 1))
        lines.append(f"{i} {nx!r} {ny!r} {float(mod[i, y, x])!r} {float(s.gt_disp[gy, gx])!r}")
    with open(cfg.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "lsp-dump": cmd_lsp_dump,
    "refine-viz": cmd_refine_viz,
}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ValueError, OSError, FormatError, CheckpointError, FloatingPointError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


def main() -> int:
    return cli_main(sys.argv[1:])
