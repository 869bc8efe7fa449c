"""Conversational samples, the manifest/records file format, joint-sequence
construction and the synthetic incongruity dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import SyntheticConfig
from .errors import DataError, LoadError, PreconditionError, SchemaError

MODALITIES = ("t", "a", "v")
NUM_SPECIAL = 3
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ConversationalSample:
    sample_id: str
    label: int
    context: dict[str, np.ndarray]
    utterance: dict[str, np.ndarray]
    sarcasm: int | None = None

    def context_len(self, m: str = "t") -> int:
        return int(self.context[m].shape[0])

    def utterance_len(self, m: str = "t") -> int:
        return int(self.utterance[m].shape[0])


@dataclass(frozen=True)
class Manifest:
    dims: dict[str, int]
    num_classes: int
    splits: dict[str, list[str]]
    records: str = "records.jsonl"

    def to_json(self) -> dict:
        return {
            "dims": dict(self.dims),
            "num_classes": self.num_classes,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "records": self.records,
        }


@dataclass(frozen=True)
class DatasetBundle:
    manifest: Manifest
    samples: tuple[ConversationalSample, ...]
    _split_of: dict[str, str] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        split_of = {}
        for name, ids in self.manifest.splits.items():
            for sid in ids:
                split_of[sid] = name
        object.__setattr__(self, "_split_of", split_of)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.manifest.dims[m] for m in MODALITIES)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def split_of(self, sample_id: str) -> str | None:
        return self._split_of.get(sample_id)

    def select(self, samples: Iterable[ConversationalSample]) -> "DatasetBundle":
        """Sub-bundle over ``samples``; split lists are filtered to match."""
        samples = tuple(samples)
        keep = {s.sample_id for s in samples}
        splits = {k: [i for i in v if i in keep] for k, v in self.manifest.splits.items()}
        return DatasetBundle(replace(self.manifest, splits=splits), samples)

    def split(self, name: str) -> "DatasetBundle":
        return self.select(s for s in self.samples if self.split_of(s.sample_id) == name)

    def map(self, fn) -> "DatasetBundle":
        return DatasetBundle(self.manifest, tuple(fn(s) for s in self.samples))


def validate_sample(sample: ConversationalSample, dims: dict[str, int] | None = None,
                    num_classes: int | None = None) -> None:
    sid = sample.sample_id
    for m in MODALITIES:
        for part, store in (("context", sample.context), ("utterance", sample.utterance)):
            if m not in store:
                raise SchemaError(f"sample {sid}: missing {part} features for modality {m!r}")
            mat = store[m]
            if mat.ndim != 2:
                raise SchemaError(f"sample {sid}: {part} features for {m!r} must be a matrix")
            if dims is not None and mat.shape[0] > 0 and mat.shape[1] != dims[m]:
                raise SchemaError(
                    f"sample {sid}: modality {m!r} {part} has dim {mat.shape[1]}, manifest declares {dims[m]}")
            if not np.all(np.isfinite(mat)):
                raise DataError(f"sample {sid}: non-finite value in {m!r} {part} features")
        if sample.utterance[m].shape[0] < 1:
            raise SchemaError(f"sample {sid}: modality {m!r} has an empty utterance")
    # modalities share one token timeline
    for part, store in (("context", sample.context), ("utterance", sample.utterance)):
        lens = {m: store[m].shape[0] for m in MODALITIES}
        if len(set(lens.values())) != 1:
            raise SchemaError(f"sample {sid}: unaligned {part} lengths across modalities {lens}")
    if num_classes is not None and not 0 <= sample.label < num_classes:
        raise SchemaError(f"sample {sid}: label {sample.label} outside [0, {num_classes})")
    if sample.sarcasm not in (None, 0, 1):
        raise SchemaError(f"sample {sid}: sarcasm flag must be 0 or 1, got {sample.sarcasm}")


# ---------------------------------------------------------------------------
# file format


def _matrix(rows, dim: int) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, dim), dtype=np.float32)
    return arr.astype(np.float32)


def load_dataset(manifest_path: str | Path) -> DatasetBundle:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
        dims = {m: int(raw["dims"][m]) for m in MODALITIES}
        manifest = Manifest(
            dims=dims,
            num_classes=int(raw["num_classes"]),
            splits={k: [str(i) for i in raw["splits"].get(k, [])] for k in SPLITS},
            records=raw.get("records", "records.jsonl"),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"cannot parse manifest {manifest_path}: {exc}") from exc

    records_path = manifest_path.parent / manifest.records
    if not records_path.exists():
        raise LoadError(f"records file not found: {records_path}")

    samples = []
    with records_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                ctx = {m: _matrix(rec[f"{m}_ctx"], dims[m]) for m in MODALITIES}
                utt = {m: _matrix(rec[f"{m}_utt"], dims[m]) for m in MODALITIES}
                sar = rec.get("sar")
                sample = ConversationalSample(sid, int(rec["label"]), ctx, utt,
                                              None if sar is None else int(sar))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise LoadError(f"{records_path}:{lineno}: malformed record ({exc})") from exc
            except ValueError as exc:
                raise SchemaError(f"{records_path}:{lineno}: ragged or non-numeric matrix ({exc})") from exc
            validate_sample(sample, dims, manifest.num_classes)
            samples.append(sample)

    if not samples:
        raise LoadError(f"no samples in {records_path}")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise SchemaError(f"duplicate sample_id {dup!r}")
    known = set(ids)
    assigned: dict[str, str] = {}
    for name, members in manifest.splits.items():
        for sid in members:
            if sid not in known:
                raise SchemaError(f"split {name!r} references unknown sample_id {sid!r}")
            if sid in assigned:
                raise SchemaError(f"sample_id {sid!r} assigned to both {assigned[sid]!r} and {name!r}")
            assigned[sid] = name
    for name in ("train", "val"):
        if not manifest.splits[name]:
            raise SchemaError(f"split {name!r} is empty")
    return DatasetBundle(manifest, tuple(samples))


def _rows(mat: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(format(float(x), ".9g") for x in row) + "]" for row in mat) + "]"


def save_dataset(bundle: DatasetBundle, out_dir: str | Path) -> Path:
    """Write manifest.json + records.jsonl; float32 values survive the round trip bit-exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(bundle.manifest.to_json(), indent=1) + "\n", encoding="utf-8")
    with (out_dir / bundle.manifest.records).open("w", encoding="utf-8") as fh:
        for s in bundle.samples:
            parts = [f'"id":{json.dumps(s.sample_id)}', f'"label":{int(s.label)}']
            if s.sarcasm is not None:
                parts.append(f'"sar":{int(s.sarcasm)}')
            for m in MODALITIES:
                for key, store in (("ctx", s.context), ("utt", s.utterance)):
                    mat = np.asarray(store[m], dtype=np.float32)
                    if not np.all(np.isfinite(mat)):
                        raise DataError(f"sample {s.sample_id}: refusing to write non-finite values")
                    parts.append(f'"{m}_{key}":{_rows(mat)}')
            fh.write("{" + ",".join(parts) + "}\n")
    return manifest_path


# ---------------------------------------------------------------------------
# sequence construction


@dataclass(frozen=True)
class JointSequence:
    features: np.ndarray  # (max_len, d_m)
    partition: np.ndarray  # 0 = [CLS] + context + [SEP], 1 = utterance + final [SEP]
    valid: np.ndarray
    special: np.ndarray


def special_positions(len_ctx: int, len_utt: int) -> tuple[int, int, int]:
    return 0, 1 + len_ctx, 2 + len_ctx + len_utt


def build_joint_sequence(sample: ConversationalSample, max_len: int) -> dict[str, JointSequence]:
    if max_len <= 0:
        raise PreconditionError(f"max_len must be positive, got {max_len}")
    out = {}
    for m in MODALITIES:
        ctx, utt = sample.context[m], sample.utterance[m]
        tc, tu = ctx.shape[0], utt.shape[0]
        if tu == 0:
            raise PreconditionError(f"sample {sample.sample_id}: empty utterance for modality {m!r}")
        total = tc + tu + NUM_SPECIAL
        if total > max_len:
            raise PreconditionError(
                f"sample {sample.sample_id}: modality {m!r} needs {total} positions, max_len is {max_len}")
        d = utt.shape[1]
        feats = np.zeros((max_len, d), dtype=np.float32)
        feats[1:1 + tc] = ctx
        feats[2 + tc:2 + tc + tu] = utt
        partition = np.zeros(max_len, dtype=np.int64)
        partition[2 + tc:total] = 1
        valid = np.zeros(max_len, dtype=bool)
        valid[:total] = True
        special = np.zeros(max_len, dtype=bool)
        special[list(special_positions(tc, tu))] = True
        out[m] = JointSequence(feats, partition, valid, special)
    return out


def align_word_features(word_features: np.ndarray, word_to_subword_counts: Sequence[int]) -> np.ndarray:
    """Repeat each word-level row once per subword it was split into."""
    counts = np.asarray(word_to_subword_counts, dtype=np.int64)
    word_features = np.asarray(word_features)
    if counts.ndim != 1 or counts.shape[0] != word_features.shape[0]:
        raise PreconditionError(
            f"{counts.shape[0] if counts.ndim == 1 else counts.shape} counts for {word_features.shape[0]} words")
    if np.any(counts < 1):
        raise PreconditionError(f"subword counts must be >= 1, got {counts.tolist()}")
    return np.repeat(word_features, counts, axis=0)


def make_pseudo_context(sample: ConversationalSample) -> ConversationalSample:
    for m in MODALITIES:
        if m not in sample.utterance or sample.utterance[m].shape[0] < 1:
            raise PreconditionError(f"sample {sample.sample_id}: no utterance features for {m!r}")
    return ConversationalSample(
        sample_id=sample.sample_id,
        label=sample.label,
        context={m: sample.utterance[m].copy() for m in MODALITIES},
        utterance={m: sample.utterance[m].copy() for m in MODALITIES},
        sarcasm=sample.sarcasm,
    )


def split_by_sarcasm(bundle: DatasetBundle) -> tuple[DatasetBundle, DatasetBundle]:
    for s in bundle.samples:
        if s.sarcasm is None:
            raise PreconditionError(f"sample {s.sample_id} has no sarcasm flag")
    return (bundle.select(s for s in bundle.samples if s.sarcasm == 1),
            bundle.select(s for s in bundle.samples if s.sarcasm == 0))


@dataclass
class Batch:
    features: dict[str, torch.Tensor]  # (B, T, d_m)
    partition: torch.Tensor  # (B, T) long
    valid: torch.Tensor  # (B, T) bool
    special: torch.Tensor  # (B, T) bool
    labels: torch.Tensor  # (B,)
    sample_ids: list[str]

    @property
    def context_mask(self) -> torch.Tensor:
        return self.valid & (self.partition == 0)

    @property
    def utterance_mask(self) -> torch.Tensor:
        return self.valid & (self.partition == 1)

    def to(self, dtype: torch.dtype) -> "Batch":
        return replace(self, features={m: x.to(dtype) for m, x in self.features.items()})


def collate(samples: Sequence[ConversationalSample], max_len: int | None = None) -> Batch:
    if not samples:
        raise PreconditionError("cannot collate an empty batch")
    need = max(s.context_len() + s.utterance_len() + NUM_SPECIAL for s in samples)
    max_len = need if max_len is None else max_len
    joints = [build_joint_sequence(s, max_len) for s in samples]
    feats = {m: torch.from_numpy(np.stack([j[m].features for j in joints])) for m in MODALITIES}
    # aligned timelines: the text masks stand for all modalities
    return Batch(
        features=feats,
        partition=torch.from_numpy(np.stack([j["t"].partition for j in joints])),
        valid=torch.from_numpy(np.stack([j["t"].valid for j in joints])),
        special=torch.from_numpy(np.stack([j["t"].special for j in joints])),
        labels=torch.tensor([s.label for s in samples], dtype=torch.long),
        sample_ids=[s.sample_id for s in samples],
    )


# ---------------------------------------------------------------------------
# synthetic incongruity task


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_synthetic(config: SyntheticConfig, seed: int) -> DatasetBundle:
    """Context polarity is planted in the text context rows, utterance polarity
    in the audio and visual utterance rows; label = 1 iff the two disagree.

    Each planted row is ``snr * polarity * prototype + N(0, I)`` with a
    unit-norm prototype per modality. Every other row is pure noise, so each
    block taken alone carries no information about the label.
    """
    rng = np.random.default_rng(seed)
    dims = {"t": config.d_t, "a": config.d_a, "v": config.d_v}
    proto = {}
    for m in MODALITIES:
        p = rng.standard_normal(dims[m])
        proto[m] = p / np.linalg.norm(p)
    n = config.num_samples
    tc, tu = config.len_ctx, config.len_utt
    c_pol = rng.choice([-1.0, 1.0], size=n)
    u_pol = rng.choice([-1.0, 1.0], size=n)
    samples = []
    for i in range(n):
        ctx = {m: rng.standard_normal((tc, dims[m])) for m in MODALITIES}
        utt = {m: rng.standard_normal((tu, dims[m])) for m in MODALITIES}
        ctx["t"] += config.snr * c_pol[i] * proto["t"]
        for m in ("a", "v"):
            utt[m] += config.snr * u_pol[i] * proto[m]
        label = int(c_pol[i] != u_pol[i])
        samples.append(ConversationalSample(
            sample_id=f"syn{i:06d}",
            label=label,
            context={m: x.astype(np.float32) for m, x in ctx.items()},
            utterance={m: x.astype(np.float32) for m, x in utt.items()},
            sarcasm=label,
        ))
    n_train, n_val, _ = _split_counts(n, config.split_fractions)
    ids = [s.sample_id for s in samples]
    manifest = Manifest(
        dims=dims,
        num_classes=config.num_classes,
        splits={"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]},
    )
    return DatasetBundle(manifest, tuple(samples))

