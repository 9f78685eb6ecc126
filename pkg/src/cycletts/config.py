"""Config file handling: strict YAML <-> dataclass mapping.

Config files are plain key-value YAML mirroring the dataclass fields;
unknown keys are rejected so every run is reproducible from its effective
config dump.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from . import DataError
from .dsp import DspConfig
from .losses import LossWeights


@dataclass(frozen=True)
class ModelSettings:
    """Architecture sizes; vocabulary, class counts, and mel bins come from
    the corpus and DSP config when the model is built."""

    encoder_dim: int = 128
    decoder_dim: int = 128
    attention_dim: int = 64
    attention_rnn_dim: int = 128
    attention_location_filters: int = 16
    attention_location_kernel: int = 15
    prenet_dim: int = 64
    d_style: int = 32
    ref_channels: tuple[int, ...] = (32, 32, 64, 64)
    ref_rnn_dim: int = 128
    classifier_hidden: int = 64
    reduction_factor: int = 2
    reversal_lambda: float = 1.0
    dropout: float = 0.1
    prenet_dropout: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    n_pairs: int = 96
    main_epochs: int = 40000  # one optimizer step per epoch
    finetune_epochs: int = 1000
    learning_rate: float = 1e-3
    lr_decay: float = 0.99994  # per-step exponential factor
    lr_min: float = 1e-5
    seed: int = 1234
    checkpoint_interval: int = 500
    grad_clip: float = 1.0
    stop_pos_weight: float = 6.0
    stop_threshold: float = 0.5
    free_run_cap_factor: int = 4  # frame cap = factor * tokens * reduction
    ablate_intercross: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    dsp: DspConfig = field(default_factory=DspConfig)
    model: ModelSettings = field(default_factory=ModelSettings)

    def __post_init__(self):
        if min(self.n_pairs, self.main_epochs, self.checkpoint_interval) < 1:
            raise ValueError("n_pairs, main_epochs, checkpoint_interval must be >= 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if self.learning_rate <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError("need learning_rate > 0 and 0 < lr_decay <= 1")


def _resolve(f):
    # dataclass fields keep their default's type when nested
    default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
    return type(default) if is_dataclass(type(default)) else None


def dataclass_from_dict(cls, raw: dict, path: str = ""):
    if is_dataclass(cls):
        return _coerce_dataclass(cls, raw or {}, path)
    raise TypeError(f"{cls} is not a dataclass")


def _coerce_dataclass(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise DataError(f"config key {path or '<root>'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise DataError(f"config key {path or '<root>'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        nested = _resolve(f)
        child_path = f"{path}.{name}" if path else name
        if nested is not None:
            kwargs[name] = _coerce_dataclass(nested, value, child_path)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise DataError(f"config key {path or '<root>'}: {e}") from e


def dataclass_to_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            out[f.name] = dataclass_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def load_train_config(path: str | Path) -> TrainConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return dataclass_from_dict(TrainConfig, raw)


def dump_config(config, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(dataclass_to_dict(config), sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text
