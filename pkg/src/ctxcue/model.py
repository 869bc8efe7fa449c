"""The full three-stage network and its checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, TrainConfig, model_config_from_dict, train_config_from_dict
from .cues import CueConstructor, InterpretationCue
from .data import MODALITIES, Batch
from .errors import ConfigError, LoadError, SchemaError
from .interaction import AggregationResult, Aggregator, Classifier, InteractionLayer
from .structure import RelationState, StageOneOutput, StructureEncoder


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    relation: RelationState
    cue: InterpretationCue
    aggregation: AggregationResult
    guidance: torch.Tensor  # (B, 1, d)
    stage1: StageOneOutput
    layers: list[dict] = field(default_factory=list)

    def gate_rhos(self) -> list[torch.Tensor]:
        """Routing coefficients entering the gate loss, each router counted once."""
        branches = ("primary",) if self.stage1.structure is self.stage1.primary else ("primary", "structure")
        return self.relation.all_rhos(branches)


class CueNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.stage1 = StructureEncoder(cfg)
        self.cues = CueConstructor(cfg)
        self.guidance = nn.Linear(7 * d, d)
        self.layers = nn.ModuleList(
            InteractionLayer(d, cfg.num_heads, cfg.dropout, cfg.guidance) for _ in range(cfg.depth))
        self.aggregate = Aggregator(d, cfg.adaptive_aggregation)
        self.classifier = Classifier(d, cfg.num_classes, cfg.dropout)

    def forward(self, batch: Batch, record_layers: bool = False) -> ForwardOutput:
        s1 = self.stage1(batch)
        cue = self.cues(s1.structure, s1.partition, s1.valid)
        g = self.guidance(cue.u_f).unsqueeze(-2)
        masks = {m: s1.valid for m in MODALITIES}
        streams = dict(s1.primary)
        record = [] if record_layers else None
        for layer in self.layers:
            rec = {} if record_layers else None
            streams = layer(streams, masks, g, rec)
            if record_layers:
                record.append(rec)
        agg = self.aggregate(streams, masks)
        agg.logits = self.classifier(agg.z)
        return ForwardOutput(agg.logits, s1.relation, cue, agg, g, s1, record or [])

    def nonverbal_parameters(self) -> list[nn.Parameter]:
        seen, out = set(), []
        for mod in self.stage1.nonverbal_modules():
            for p in mod.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


def build_model(cfg: ModelConfig, seed: int | None = None, dtype: torch.dtype = torch.float32) -> CueNet:
    if seed is not None:
        torch.manual_seed(seed)
    return CueNet(cfg).to(dtype)


# ---------------------------------------------------------------------------
# checkpoint: 8-byte magic, u64 header length, JSON header, raw little-endian float32

MAGIC = b"CUENET01"


def save_checkpoint(model: CueNet, path: str | Path, train_config: TrainConfig | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    registry, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        registry.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = {
        "model": _model_dict(model.cfg),
        "train": None if train_config is None else train_config.to_dict(),
        "params": registry,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def _model_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["pairs"] = list(cfg.pairs)
    return d


def read_checkpoint_header(path: str | Path) -> tuple[dict, int]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise LoadError(f"{path} is not a checkpoint file")
        try:
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n).decode("utf-8"))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LoadError(f"{path}: unreadable checkpoint header ({exc})") from exc
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> CueNet:
    """Rebuild the model from the header's config (or ``cfg``) and load weights, checking every shape."""
    header, start = read_checkpoint_header(path)
    try:
        saved_cfg = model_config_from_dict(header["model"])
    except ConfigError as exc:
        raise SchemaError(f"checkpoint {path}: bad config header ({exc})") from exc
    if cfg is not None and cfg != saved_cfg:
        raise SchemaError(f"checkpoint {path}: config does not match the requested model config")
    model = CueNet(saved_cfg)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    raw = Path(path).read_bytes()[start:]
    state = {}
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise SchemaError(f"checkpoint {path}: unexpected parameter {name}")
        if shape != expected[name]:
            raise SchemaError(f"checkpoint {path}: {name} has shape {shape}, model expects {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        if entry["offset"] + 4 * count > len(raw):
            raise SchemaError(f"checkpoint {path}: data for {name} is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    missing = set(expected) - set(state)
    if missing:
        raise SchemaError(f"checkpoint {path}: missing parameters {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_train_config(path: str | Path) -> TrainConfig | None:
    header, _ = read_checkpoint_header(path)
    return None if header.get("train") is None else train_config_from_dict(header["train"])
