"""Hierarchical run configuration with strict key checking.

Every key has a default tuned for the 64x64 synthetic benchmark; paper-scale
values are noted in docs/config.md.  ``RunConfig.from_dict`` rejects unknown
keys so a typo cannot silently fall back to a default, and every command
echoes its fully resolved config into the output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from .errors import ConfigError


@dataclass
class DataConfig:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 8
    size_word_prob: float = 0.5
    relation_prob: float = 0.35
    noise_std: float = 2.0
    train_frac: float = 0.8
    val_frac: float = 0.1
    vocab_min_count: int = 15
    max_caption_tokens: int = 10
    min_regions: int = 2
    max_regions: int = 8


@dataclass
class ModelConfig:
    backbone_channels: Tuple[int, ...] = (16, 32, 32, 32)
    backbone_pools: Tuple[bool, ...] = (True, True, False, False)
    rpn_channels: int = 64
    anchor_scales: Tuple[float, ...] = (8.0, 16.0, 24.0, 32.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_x: int = 7
    roi_y: int = 7
    code_dim: int = 256
    fc_dim: int = 256
    dropout: float = 0.1
    embed_dim: int = 64
    hidden_dim: int = 64
    init_std: float = 0.01
    delta_clamp: float = 4.0
    dtype: str = "float32"  # "float64" for wide-precision runs

    @property
    def stride(self) -> int:
        return 2 ** sum(self.backbone_pools)

    @property
    def out_channels(self) -> int:
        return self.backbone_channels[-1]


@dataclass
class TrainConfig:
    iterations: int = 2000
    region_batch: int = 256
    sample_hi: float = 0.7
    sample_lo: float = 0.3
    sgd_lr: float = 1e-3
    momentum: float = 0.9
    adam_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    loss_weights: Tuple[float, ...] = (0.1, 0.1, 0.1, 0.1, 1.0)
    clip_norm: float = 10.0  # 0 disables clipping
    finetune_start: int = 0  # iteration at which backbone updates begin
    freeze_blocks: int = 0   # first N backbone conv blocks never updated
    checkpoint_interval: int = 500
    log_interval: int = 10
    use_gt_boxes: bool = False  # degenerate mode: caption ground-truth boxes


@dataclass
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    lang_thresholds: Tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
    merge_iou: float = 0.7
    test_keep: int = 300
    test_nms_iou: float = 0.7
    max_caption_len: int = 10


@dataclass
class RetrievalConfig:
    n_queries: int = 100
    captions_per_query: int = 4
    top_proposals: int = 100
    nms_iou: float = 0.7  # proposal suppression for the retrieval pool


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)


def _coerce(value, ftype, path):
    origin = getattr(ftype, "__origin__", None)
    if dataclasses.is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _from_dict(ftype, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _from_dict(cls, data: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          + ", ".join(sorted(unknown)))
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        ftype = f.type if not isinstance(f.type, str) else _resolve_type(cls, f.name)
        kwargs[name] = _coerce(value, ftype, f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _resolve_type(cls, name):
    import typing
    hints = typing.get_type_hints(cls)
    return hints[name]


def config_to_dict(cfg) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, tuple):
            return [conv(v) for v in x]
        return x

    return conv(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def validate_config(cfg: RunConfig) -> None:
    m = cfg.model
    if len(m.backbone_channels) != len(m.backbone_pools):
        raise ConfigError("backbone_channels and backbone_pools must align")
    if not 0.0 <= m.dropout < 1.0:
        raise ConfigError("model.dropout must be in [0, 1)")
    if m.dtype not in ("float32", "float64"):
        raise ConfigError("model.dtype must be float32 or float64")
    if len(cfg.train.loss_weights) != 5:
        raise ConfigError("train.loss_weights must have 5 entries")
    if cfg.data.train_frac + cfg.data.val_frac >= 1.0:
        raise ConfigError("train_frac + val_frac must leave room for a test split")
    if cfg.data.image_size < m.stride:
        raise ConfigError("image_size smaller than the backbone stride")
