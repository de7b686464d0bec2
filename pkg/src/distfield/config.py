"""Flat ``key=value`` run configuration."""
from __future__ import annotations

import math
from pathlib import Path

from .network import NetworkConfig
from .train import TrainOptions
from .metrics import DEFAULT_EDGES

DEFAULTS: dict[str, object] = {
    # network
    "input_size": 128,
    "base_channels": 16,
    "num_residual_blocks": 4,
    "pyramid_dilations": (1, 2, 4),
    "include_gap_branch": True,
    # training
    "epochs": 50,
    "learning_rate": 1e-3,
    "weight_decay": 1e-4,
    "batch_size": 16,
    "lambda_smo": 1.0,
    "val_fraction": 0.1,
    "augment": True,
    "seed": 0,
    # evaluation
    "bin_edges": DEFAULT_EDGES,
    "erode_blocks": 3,
    "min_norm": 0.5,
    "k": 8,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(math.inf if p.strip() in ("inf", "+inf") else kind(p) for p in text.split(","))
    return text


def parse_config(text: str) -> dict[str, object]:
    """Parse ``key=value`` lines (``#`` comments allowed); unknown keys raise ``KeyError``."""
    cfg = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
        cfg[key] = _parse_like(DEFAULTS[key], value)
    return cfg


def load_config(path=None) -> dict[str, object]:
    return parse_config(Path(path).read_text() if path else "")


def format_config(cfg: dict[str, object]) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join("inf" if x == math.inf else str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def network_config(cfg) -> NetworkConfig:
    return NetworkConfig(
        input_size=cfg["input_size"],
        base_channels=cfg["base_channels"],
        num_residual_blocks=cfg["num_residual_blocks"],
        pyramid_dilations=cfg["pyramid_dilations"],
        include_gap_branch=cfg["include_gap_branch"],
    )


def train_options(cfg) -> TrainOptions:
    return TrainOptions(
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        lambda_smo=cfg["lambda_smo"],
        val_fraction=cfg["val_fraction"],
        augment=cfg["augment"],
        seed=cfg["seed"],
    )
