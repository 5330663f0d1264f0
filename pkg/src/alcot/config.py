"""Configuration objects and their key-value text serialization.

Config files are INI-style text with ``[model]``, ``[loss]`` and ``[train]``
sections. The same text block is embedded in checkpoint headers.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ROUTER_KINDS = (
    "shared-affine",
    "shared-two-layer",
    "per-step-affine",
    "per-step-two-layer",
    "none",
)
FEED_KINDS = ("identity", "affine")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 172
    max_latent: int = 3  # l_max; K_max = max_latent + 1
    tau: float = 0.1
    router_kind: str = "shared-affine"
    router_hidden: int = 64
    router_init_bias: float = 2.0
    router_detach_input: bool = False
    feed: str = "identity"
    rope_base: float = 10000.0
    max_seq_len: int = 512
    norm_eps: float = 1e-5
    precision: str = "float32"

    def __post_init__(self) -> None:
        self.validate()

    @property
    def k_max(self) -> int:
        return self.max_latent + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_latent < 0:
            raise ConfigError(f"max_latent must be >= 0, got {self.max_latent}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.d_model % self.n_heads or self.head_dim % 2:
            raise ConfigError("d_model must split into an even head_dim per head")
        if self.router_kind not in ROUTER_KINDS:
            raise ConfigError(f"unknown router_kind {self.router_kind!r}")
        if self.feed not in FEED_KINDS:
            raise ConfigError(f"unknown feed {self.feed!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass
class AdaptiveLossConfig:
    lam: float = 0.4
    beta: float = 10.0
    ce_reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.beta < 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if self.ce_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown ce_reduction {self.ce_reduction!r}")


@dataclass
class TrainConfig:
    corpus: str = ""
    eval_corpus: str = ""
    out_dir: str = "runs/default"
    batch_size: int = 16
    seq_len: int = 64
    steps: int = 1000
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_frac: float = 0.05
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    shuffle: bool = True
    log_interval: int = 10
    eval_interval: int = 0
    checkpoint_interval: int = 0
    eval_batches: int = 8
    vanilla: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: AdaptiveLossConfig = field(default_factory=AdaptiveLossConfig)

    def __post_init__(self) -> None:
        for name in ("batch_size", "seq_len", "steps", "log_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2 (inputs plus one target)")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


def _coerce(value: str, kind: Any) -> Any:
    if kind is bool or kind == "bool":
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value.strip()


def _section_from(cls: type, items: dict[str, str]) -> Any:
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(raw, known[key].type)
    return cls(**kwargs)


def _flat_fields(obj: Any) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            continue
        out[f.name] = repr(value) if isinstance(value, float) else str(value)
    return out


def dumps(train: TrainConfig | None = None, model: ModelConfig | None = None,
          loss: AdaptiveLossConfig | None = None, extra: dict[str, str] | None = None) -> str:
    """Serialize configs to the key-value text format."""
    parser = configparser.ConfigParser(interpolation=None)
    if train is not None:
        model = model or train.model
        loss = loss or train.loss
    if model is not None:
        parser["model"] = _flat_fields(model)
    if loss is not None:
        parser["loss"] = _flat_fields(loss)
    if train is not None:
        parser["train"] = _flat_fields(train)
    if extra:
        parser["meta"] = {k: str(v) for k, v in extra.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> tuple[ModelConfig, AdaptiveLossConfig, TrainConfig | None, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    model = _section_from(ModelConfig, dict(parser["model"])) if parser.has_section("model") else ModelConfig()
    loss = _section_from(AdaptiveLossConfig, dict(parser["loss"])) if parser.has_section("loss") else AdaptiveLossConfig()
    train = None
    if parser.has_section("train"):
        train_items = dict(parser["train"])
        train = _section_from(TrainConfig, train_items)
        train.model = model
        train.loss = loss
    meta = dict(parser["meta"]) if parser.has_section("meta") else {}
    return model, loss, train, meta


def load_train_config(path: str | Path) -> TrainConfig:
    model, loss, train, _ = loads(Path(path).read_text())
    if train is None:
        train = TrainConfig(model=model, loss=loss)
    return train
