"""Run configuration and the plain-text ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional

from .model import LossConfig, ModelConfig


@dataclass
class RunConfig:
    seed: int = 0
    data: Optional[str] = None
    out: Optional[str] = None
    dmax: int = 32
    lsp: str = "f"
    refine: str = "csr"
    neighbors: int = 2
    iters: int = 2000
    lr: float = 1e-3
    # the learning rate is multiplied by lr_decay once lr_decay_at·iters steps are done
    lr_decay: float = 1.0
    lr_decay_at: float = 0.75
    batch: int = 2
    crop_h: int = 32
    holdout: int = 40
    log_every: int = 100
    mu: float = 0.1
    lambda_init: float = 0.5
    lambda_refine: float = 1.0
    bandwidth: float = 2.0
    height: int = 64
    width: int = 64
    count: int = 240

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_max=self.dmax, lsp=self.lsp, refine=self.refine, neighbors=self.neighbors)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambdas=(self.lambda_init, self.lambda_refine), mu=self.mu, bandwidth=self.bandwidth)

    def updated(self, **overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_MODEL_KEYS = ("dmax", "lsp", "refine", "neighbors")


def _convert(name: str, raw):
    if raw is None:
        return None
    kind = _FIELDS[name].type
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r}") from exc
    return str(raw)


def apply_overrides(cfg: RunConfig, overrides: Mapping) -> RunConfig:
    values = {}
    for key, raw in overrides.items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        if raw is not None:
            values[key] = _convert(key, raw)
    return dataclasses.replace(cfg, **values)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_model_config(cfg: RunConfig) -> str:
    """The keys needed to rebuild the network from a checkpoint."""
    return "".join(f"{k} = {getattr(cfg, k)}\n" for k in _MODEL_KEYS)
