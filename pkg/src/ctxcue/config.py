"""Dataclass configs for the model, training runs and the synthetic task.

Two presets exist for model and training settings: ``paper()`` carries the
published recipe (hidden size 192, 12/8/1 encoder layers, dropout 0.4, the
two-rate Adam schedule, patience 10), ``desk()`` is a small configuration
that trains on one CPU core in seconds.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

# variant id -> ModelConfig / TrainConfig overrides
VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no-role-emb": {"role_embeddings": False},
    "no-dual-expert": {"dual_expert": False},
    "shared-branches": {"shared_branches": True},
    "no-local-cue": {"local_cue": False},
    "no-global-cue": {"global_cue": False},
    "pair-ta-tv": {"pairs": ("ta", "tv")},
    "pair-ta-av": {"pairs": ("ta", "av")},
    "pair-tv-av": {"pairs": ("tv", "av")},
    "no-guidance": {"guidance": False},
    "uniform-aggregation": {"adaptive_aggregation": False},
    # data-side: context replaced by a copy of the utterance
    "pseudo-context": {"pseudo_context": True},
}

ALL_PAIRS = ("ta", "tv", "av")


@dataclass(frozen=True)
class ModelConfig:
    d_t: int = 16
    d_a: int = 8
    d_v: int = 8
    d_model: int = 16
    num_heads: int = 2
    ff_mult: int = 2
    n_text_layers: int = 2
    n_audio_layers: int = 1
    n_visual_layers: int = 2
    depth: int = 2
    dropout: float = 0.1
    num_classes: int = 2
    # ablation switches
    role_embeddings: bool = True
    dual_expert: bool = True
    shared_branches: bool = False
    local_cue: bool = True
    global_cue: bool = True
    pairs: tuple[str, ...] = ALL_PAIRS
    guidance: bool = True
    adaptive_aggregation: bool = True
    # structure branch starts as an exact copy of the primary branch
    tie_branch_init: bool = True

    def __post_init__(self):
        for name in ("d_t", "d_a", "d_v", "d_model", "num_heads", "ff_mult", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_text_layers", "n_audio_layers", "n_visual_layers", "depth"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even (BiGRU splits it across two directions)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        pairs = tuple(self.pairs)
        bad = [p for p in pairs if p not in ALL_PAIRS]
        if bad:
            raise ConfigError(f"unknown modality pairs {bad}; valid: {ALL_PAIRS}")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def paper(cls, d_t: int = 768, d_a: int = 81, d_v: int = 91, num_classes: int = 2) -> "ModelConfig":
        return cls(
            d_t=d_t, d_a=d_a, d_v=d_v, d_model=192, num_heads=4, ff_mult=4,
            n_text_layers=12, n_audio_layers=1, n_visual_layers=8,
            depth=2, dropout=0.4, num_classes=num_classes,
        )

    @property
    def input_dims(self) -> dict[str, int]:
        return {"t": self.d_t, "a": self.d_a, "v": self.d_v}

    def layers_for(self, modality: str) -> int:
        return {"t": self.n_text_layers, "a": self.n_audio_layers, "v": self.n_visual_layers}[modality]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr_nonverbal: float = 3e-3
    lr_rest: float = 1e-3
    lambda_gate: float = 0.05
    lambda_bias0: float = 1.0
    # epoch at which the balancing weight reaches zero; None -> max_epochs
    tau_end: int | None = None
    patience: int = 10
    max_epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    pseudo_context: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", model_config_from_dict(self.model))
        if self.lr_nonverbal <= 0 or self.lr_rest <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lambda_gate < 0 or self.lambda_bias0 < 0:
            raise ConfigError("regularisation weights must be non-negative")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.tau_end is not None and self.tau_end < 1:
            raise ConfigError("tau_end must be >= 1")

    @property
    def dropout(self) -> float:
        return self.model.dropout

    @property
    def bias_horizon(self) -> int:
        return self.tau_end if self.tau_end is not None else self.max_epochs

    @classmethod
    def paper(cls, **model_kwargs) -> "TrainConfig":
        return cls(
            model=ModelConfig.paper(**model_kwargs),
            lr_nonverbal=3e-3, lr_rest=2e-6, lambda_gate=0.05,
            patience=10, max_epochs=100, batch_size=16,
        )

    def with_variant(self, variant_id: str) -> "TrainConfig":
        if variant_id not in VARIANTS:
            raise ConfigError(f"unknown variant {variant_id!r}; valid ids: {', '.join(VARIANTS)}")
        overrides = dict(VARIANTS[variant_id])
        train_over = {k: overrides.pop(k) for k in list(overrides) if k in _TRAIN_FIELDS}
        model = dataclasses.replace(self.model, **overrides)
        return dataclasses.replace(self, model=model, **train_over)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"]["pairs"] = list(self.model.pairs)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return train_config_from_dict(raw)


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _checked(cls, raw: dict[str, Any]) -> dict[str, Any]:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return raw


def model_config_from_dict(raw: dict[str, Any]) -> ModelConfig:
    raw = dict(_checked(ModelConfig, raw))
    if "pairs" in raw:
        raw["pairs"] = tuple(raw["pairs"])
    return ModelConfig(**raw)


def train_config_from_dict(raw: dict[str, Any]) -> TrainConfig:
    raw = dict(_checked(TrainConfig, raw))
    if "model" in raw:
        raw["model"] = model_config_from_dict(raw["model"])
    return TrainConfig(**raw)


@dataclass(frozen=True)
class SyntheticConfig:
    """Incongruity task: label is 1 iff context polarity differs from utterance polarity."""

    num_samples: int = 1000
    d_t: int = 16
    d_a: int = 8
    d_v: int = 8
    len_ctx: int = 4
    len_utt: int = 3
    snr: float = 4.0
    num_classes: int = 2
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        for name in ("num_samples", "d_t", "d_a", "d_v", "len_ctx", "len_utt"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.snr <= 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if self.num_classes != 2:
            raise ConfigError("the synthetic incongruity task is binary")
        fr = tuple(self.split_fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three non-negative numbers summing to 1, got {fr}")
        object.__setattr__(self, "split_fractions", fr)
