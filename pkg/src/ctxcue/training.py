"""Loss, two-rate Adam with cosine decay, the training loop with early
stopping, evaluation by scope, and the ablation runner."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import DatasetBundle, collate, make_pseudo_context, split_by_sarcasm
from .errors import DataError, PreconditionError, SchemaError, TrainingError
from .metrics import ScopeMetrics, classification_metrics
from .model import CueNet, build_model, load_checkpoint, save_checkpoint
from .structure import NONVERBAL, BiasSchedule, gate_loss

log = logging.getLogger(__name__)

SCOPES = ("entire", "subset1", "subset2")


def total_loss(logits, labels, rho_traces, s, epoch: int, config: TrainConfig) -> torch.Tensor:
    num_classes = logits.shape[-1]
    if bool(((labels < 0) | (labels >= num_classes)).any()):
        raise PreconditionError(f"labels outside [0, {num_classes}): {labels.tolist()}")
    task = F.cross_entropy(logits, labels)
    if config.lambda_gate == 0:
        return task
    sched = BiasSchedule(config.lambda_bias0, config.bias_horizon)
    return task + config.lambda_gate * gate_loss(rho_traces, s, epoch, sched)


class CosineSchedule:
    """Per-step cosine decay from each group's base rate to zero over ``total_steps``."""

    def __init__(self, optimizer: torch.optim.Optimizer, total_steps: int):
        self.optimizer = optimizer
        self.total_steps = max(1, total_steps)
        self.base = [g["lr"] for g in optimizer.param_groups]
        self.t = 0

    def factor(self, t: int) -> float:
        t = min(t, self.total_steps)
        return 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))

    def lr_at(self, t: int) -> list[float]:
        return [b * self.factor(t) for b in self.base]

    def step(self) -> None:
        self.t += 1
        for g, lr in zip(self.optimizer.param_groups, self.lr_at(self.t)):
            g["lr"] = lr

    @property
    def current(self) -> list[float]:
        return [g["lr"] for g in self.optimizer.param_groups]


def parameter_groups(model: CueNet) -> tuple[list, list]:
    """(audio/visual encoder parameters, everything else); a set partition."""
    nonverbal = model.nonverbal_parameters()
    ids = {id(p) for p in nonverbal}
    all_ids = {id(p) for p in model.parameters()}
    if not ids <= all_ids:
        raise PreconditionError("nonverbal group holds a parameter that is not registered on the model")
    rest = [p for p in model.parameters() if id(p) not in ids]
    return nonverbal, rest


def make_optimizer_schedule(model: CueNet, config: TrainConfig, steps_per_epoch: int):
    nonverbal, rest = parameter_groups(model)
    opt = torch.optim.Adam(
        [{"params": nonverbal, "lr": config.lr_nonverbal, "name": "nonverbal"},
         {"params": rest, "lr": config.lr_rest, "name": "rest"}],
        betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
    )
    return opt, CosineSchedule(opt, config.max_epochs * steps_per_epoch)


def prepare(bundle: DatasetBundle, config: TrainConfig) -> DatasetBundle:
    return bundle.map(make_pseudo_context) if config.pseudo_context else bundle


def batches(samples: Sequence, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield collate([samples[j] for j in order[i:i + batch_size]])


@torch.no_grad()
def predict(model: CueNet, samples: Sequence, batch_size: int = 64):
    """Eval-mode predictions: (labels, predictions, fused z, per-batch outputs)."""
    was_training = model.training
    model.eval()
    preds, labels, zs = [], [], []
    try:
        for batch in batches(samples, batch_size):
            out = model(batch)
            preds.append(out.logits.argmax(-1))
            labels.append(batch.labels)
            zs.append(out.aggregation.z)
    finally:
        model.train(was_training)
    return torch.cat(labels).numpy(), torch.cat(preds).numpy(), torch.cat(zs)


def stopping_epoch(val_scores: Sequence[float], patience: int, max_epochs: int) -> int:
    """Number of epochs run under patience-based early stopping on ``val_scores``."""
    best, since = -math.inf, 0
    for epoch in range(min(max_epochs, len(val_scores))):
        if val_scores[epoch] > best:
            best, since = val_scores[epoch], 0
        else:
            since += 1
            if since >= patience:
                return epoch + 1
    return min(max_epochs, len(val_scores))


@dataclass
class RunArtifacts:
    config: TrainConfig
    model: CueNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -math.inf
    routing: list[dict] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def checkpoint(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "checkpoint.bin"


def _routing_rows(epoch: int, rho_sums: dict, count: int) -> list[dict]:
    return [{"epoch": epoch, "branch": b, "modality": m, "layer": l, "mean_rho": v / max(count, 1)}
            for (b, m, l), v in sorted(rho_sums.items())]


def train(bundle: DatasetBundle, config: TrainConfig, out_dir: str | Path | None = None) -> RunArtifacts:
    dims = dict(zip("tav", bundle.dims))
    if dims != config.model.input_dims:
        raise SchemaError(f"data dims {dims} do not match model input dims {config.model.input_dims}")
    if bundle.num_classes != config.model.num_classes:
        raise SchemaError(f"data has {bundle.num_classes} classes, model expects {config.model.num_classes}")
    bundle = prepare(bundle, config)
    train_set = bundle.split("train").samples
    val_set = bundle.split("val").samples
    if not train_set or not val_set:
        raise DataError("training needs non-empty train and val splits")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    opt, sched = make_optimizer_schedule(model, config, steps_per_epoch)
    bias = BiasSchedule(config.lambda_bias0, config.bias_horizon)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
    run = RunArtifacts(config, model, out_dir=out)
    best_state, since_best, step = None, 0, 0

    for epoch in range(config.max_epochs):
        model.train()
        lrs = sched.current
        total, seen = 0.0, 0
        rho_sums: dict = {}
        for batch in batches(train_set, config.batch_size, rng):
            out_ = model(batch)
            loss = total_loss(out_.logits, batch.labels, out_.gate_rhos(), out_.relation.s, epoch, config)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            n = len(batch.sample_ids)
            total += loss.item() * n
            seen += n
            for b, per_m in out_.relation.rho.items():
                for m in NONVERBAL:
                    for l, rho in enumerate(per_m[m]):
                        key = (b, m, l)
                        rho_sums[key] = rho_sums.get(key, 0.0) + rho.detach().sum().item()
        y, p, _ = predict(model, val_set)
        val_f1 = classification_metrics(y, p, config.model.num_classes).f1
        run.history.append({
            "epoch": epoch, "train_loss": total / seen, "val_f1": val_f1,
            "lr_nonverbal": lrs[0], "lr_rest": lrs[1], "lambda_bias": bias(epoch),
        })
        run.routing.extend(_routing_rows(epoch, rho_sums, seen))
        log.info("epoch %d loss %.4f val_f1 %.2f", epoch, total / seen, val_f1)
        if val_f1 > run.best_val_f1:
            run.best_val_f1, run.best_epoch, since_best = val_f1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    if out is not None:
        save_checkpoint(model, out / "checkpoint.bin", config, {"best_epoch": run.best_epoch})
        write_csv(out / "history.csv", run.history,
                  ["epoch", "train_loss", "val_f1", "lr_nonverbal", "lr_rest", "lambda_bias"])
        write_csv(out / "routing.csv", run.routing, ["epoch", "branch", "modality", "layer", "mean_rho"])
    return run


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v


def write_csv(path: Path, rows: list[dict], header: list[str], comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


@dataclass
class MetricsReport:
    scopes: dict[str, ScopeMetrics | None]
    epoch: int = -1
    history: list[dict] = field(default_factory=list)

    def __getitem__(self, scope: str) -> ScopeMetrics | None:
        return self.scopes[scope]

    def rows(self) -> list[dict]:
        return [{"scope": s, "precision": f"{m.precision:.2f}", "recall": f"{m.recall:.2f}",
                 "f1": f"{m.f1:.2f}", "epoch": self.epoch}
                for s, m in self.scopes.items() if m is not None]

    def to_csv(self) -> str:
        lines = ["scope,precision,recall,f1,epoch"]
        lines += [f"{r['scope']},{r['precision']},{r['recall']},{r['f1']},{r['epoch']}" for r in self.rows()]
        return "\n".join(lines) + "\n"


def _sarcasm_view(bundle: DatasetBundle) -> DatasetBundle:
    # the label stands in for the S/NS flag when a sample carries none
    return bundle.map(lambda s: s if s.sarcasm is not None else replace(s, sarcasm=int(s.label != 0)))


def evaluate(model: CueNet | str | Path, bundle: DatasetBundle, scope: str = "all", split: str | None = "test",
             pseudo_context: bool = False, epoch: int = -1) -> MetricsReport:
    if scope not in (*SCOPES, "all"):
        raise PreconditionError(f"unknown scope {scope!r}; expected one of {SCOPES + ('all',)}")
    if not isinstance(model, CueNet):
        model = load_checkpoint(model)
    dims = dict(zip("tav", bundle.dims))
    if dims != model.cfg.input_dims or bundle.num_classes != model.cfg.num_classes:
        raise SchemaError(f"checkpoint expects dims {model.cfg.input_dims} / {model.cfg.num_classes} classes, "
                          f"data has {dims} / {bundle.num_classes}")
    data = bundle.split(split) if split else bundle
    if pseudo_context:
        data = data.map(make_pseudo_context)
    if not len(data):
        raise DataError(f"split {split!r} is empty")
    wanted = SCOPES if scope == "all" else (scope,)
    parts = {"entire": data}
    if any(s != "entire" for s in wanted):
        parts["subset1"], parts["subset2"] = split_by_sarcasm(_sarcasm_view(data))
    results = {}
    for s in wanted:
        part = parts[s]
        if not len(part):
            results[s] = None
            continue
        y, p, _ = predict(model, part.samples)
        results[s] = classification_metrics(y, p, model.cfg.num_classes)
    return MetricsReport(results, epoch)


def run_ablation(bundle: DatasetBundle, base_config: TrainConfig, variant_id: str,
                 out_dir: str | Path | None = None) -> dict[str, MetricsReport]:
    """Train and score ``variant_id`` and the full model under the same seed."""
    variant_cfg = base_config.with_variant(variant_id)
    reports = {}
    for name, cfg in (("full", base_config), (variant_id, variant_cfg)):
        if name in reports:
            continue
        sub = None if out_dir is None else Path(out_dir) / name
        run = train(bundle, cfg, sub)
        reports[name] = evaluate(run.model, bundle, "all", pseudo_context=cfg.pseudo_context, epoch=run.best_epoch)
        if sub is not None:
            (sub / "metrics.csv").write_text(reports[name].to_csv())
    if out_dir is not None:
        rows = [{"variant": v, **r} for v, rep in reports.items() for r in rep.rows()]
        write_csv(Path(out_dir) / "ablation.csv", rows, ["variant", "scope", "precision", "recall", "f1", "epoch"])
        variant_cfg.save(Path(out_dir) / "variant_config.json")
    return reports


def config_echo(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)
