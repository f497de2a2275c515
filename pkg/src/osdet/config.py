"""Flat key=value run configuration with CLI overrides.

Every field has a default; unknown keys are rejected. The fully resolved
config is echoed into the run directory so a run is reproducible from its
output alone. The ``OSDET_OUTPUT_ROOT`` environment variable re-roots
relative output directories.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .labels import LabelSpace
from .splits import SplitConfig


class UsageError(Exception):
    """Bad command line or configuration input (exit code 1)."""


@dataclass
class RunConfig:
    # data / splits
    image_size: int = 64
    id_classes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    ood_classes: tuple[str, ...] = ("star", "ring")
    num_labeled: int = 200
    num_unlabeled: int = 800
    num_test: int = 100
    seed: int = 0
    output_dir: str = "runs/default"

    # optimization schedule
    lr: float = 0.01
    momentum: float = 0.9
    ema_momentum: float = 0.999
    pseudo_threshold: float = 0.7
    alpha_t_init: float = 0.1
    alpha_t_final: float = 0.01
    stage1_iters: int = 500
    stage2_iters: int = 500
    lambda_: float = 2.0
    beta: float = 1.0
    tau: float = 0.1
    alpha: float = 1.0
    k_mine: int = 3
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    log_every: int = 1

    # component toggles
    enable_fc: bool = True
    enable_uc: bool = True
    store_ood_in_pool: bool = True
    literal_denominator: bool = False

    # memory pool
    pool_capacity: int = 256
    s_iou_threshold: float = 0.7
    s_cos_threshold: float = 0.5

    # detector
    embed_dim: int = 128
    hidden_dim: int = 128
    channels: tuple[int, ...] = (16, 32, 32)
    train_proposals: int = 64
    eval_proposals: int = 32
    proposal_nms_iou: float = 0.7

    # inference / evaluation
    pseudo_nms_iou: float = 0.5
    eval_score_threshold: float = 0.05
    eval_nms_iou: float = 0.5
    eval_iou_thresh: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.ema_momentum < 1.0):
            raise UsageError("ema_momentum must lie in (0, 1)")
        if not (0.0 < self.pseudo_threshold < 1.0):
            raise UsageError("pseudo_threshold must lie in (0, 1)")
        if self.alpha_t_final > self.alpha_t_init:
            raise UsageError("alpha_t_final must not exceed alpha_t_init")
        for key in ("lambda_", "beta", "alpha", "alpha_t_init", "alpha_t_final"):
            if getattr(self, key) < 0:
                raise UsageError(f"{key.rstrip('_')} must be non-negative")
        if self.tau <= 0:
            raise UsageError("tau must be positive")
        if len(self.channels) != 3:
            raise UsageError("channels must list exactly three conv widths")

    # ----------------------------------------------------------- derived --

    def label_space(self) -> LabelSpace:
        return LabelSpace(tuple(sorted(self.id_classes)))

    def split_config(self) -> SplitConfig:
        return SplitConfig(
            id_classes=tuple(self.id_classes),
            ood_classes=tuple(self.ood_classes),
            num_labeled=self.num_labeled,
            num_unlabeled=self.num_unlabeled,
            num_test=self.num_test,
            seed=self.seed,
            image_size=self.image_size,
        )

    def run_dir(self) -> Path:
        root = os.environ.get("OSDET_OUTPUT_ROOT", "")
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


# key "lambda" is a Python keyword; map it onto the trailing-underscore field
_KEY_TO_FIELD = {"lambda": "lambda_"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def _field_map() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(raw: str, default) -> object:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


def _assign(values: dict, key: str, raw: str):
    field_name = _KEY_TO_FIELD.get(key, key)
    fields = _field_map()
    if field_name not in fields:
        raise UsageError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), field_name)
    try:
        values[field_name] = _parse_value(raw, default)
    except (ValueError, UsageError) as exc:
        raise UsageError(f"bad value for {key!r}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional key=value file plus override pairs."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            _assign(values, key.strip(), raw)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(values, key.strip(), raw)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def config_key(field_name: str) -> str:
    return _FIELD_TO_KEY.get(field_name, field_name)


def to_dict(cfg: RunConfig) -> dict:
    """JSON-friendly mapping using external key names."""
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[config_key(f.name)] = value
    return out


def from_dict(data: dict) -> RunConfig:
    values: dict = {}
    for key, value in data.items():
        field_name = _KEY_TO_FIELD.get(key, key)
        if field_name not in _field_map():
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        values[field_name] = value
    return RunConfig(**values)


def resolved_text(cfg: RunConfig) -> str:
    """Re-parseable key=value echo of the full config plus the label table."""
    lines = []
    for f in sorted(dataclasses.fields(RunConfig), key=lambda f: config_key(f.name)):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{config_key(f.name)}={value}")
    space = cfg.label_space()
    lines.append("")
    for ext_id, name in sorted(space.label_table().items()):
        lines.append(f"# label {ext_id} = {name}")
    return "\n".join(lines) + "\n"


def write_resolved_config(cfg: RunConfig, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(resolved_text(cfg))
