"""Fixed protocols for the synthetic functional checks: the overfit probe, the
context-separation run and the interaction-depth comparison.

Scripts in ``scripts/`` and the acceptance tests both call these, so the
numbers they report come from one set of settings.
"""

from __future__ import annotations

import dataclasses
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig, SyntheticConfig, TrainConfig
from .data import DatasetBundle, collate, generate_synthetic
from .metrics import classification_metrics
from .model import build_model
from .training import evaluate, make_optimizer_schedule, predict, total_loss, train

# 2000 train / 250 val / 500 test at SNR 4
TASK = SyntheticConfig(num_samples=2750, snr=4.0, split_fractions=(2000 / 2750, 250 / 2750, 500 / 2750))
SEEDS = (0, 1, 2)


def task_bundle(seed: int, config: SyntheticConfig = TASK) -> DatasetBundle:
    return generate_synthetic(config, seed)


def protocol_config(seed: int, depth: int = 2, pseudo_context: bool = False,
                    max_epochs: int = 20, patience: int = 3) -> TrainConfig:
    """Desk model on the synthetic task: d=16, batch 32, at most 20 epochs."""
    model = ModelConfig(d_t=TASK.d_t, d_a=TASK.d_a, d_v=TASK.d_v, depth=depth)
    return TrainConfig(model=model, max_epochs=max_epochs, patience=patience, batch_size=32,
                       seed=seed, pseudo_context=pseudo_context)


@dataclass
class RunSummary:
    seed: int
    depth: int
    pseudo_context: bool
    accuracy: float
    f1: float
    epochs: int
    seconds: float


def run_protocol(seed: int, depth: int = 2, pseudo_context: bool = False, **kw) -> RunSummary:
    bundle = task_bundle(seed)
    cfg = protocol_config(seed, depth, pseudo_context, **kw)
    t0 = time.perf_counter()
    run = train(bundle, cfg)
    m = evaluate(run.model, bundle, "entire", pseudo_context=pseudo_context)["entire"]
    return RunSummary(seed, depth, pseudo_context, m.accuracy, m.f1, len(run.history), time.perf_counter() - t0)


def median(values) -> float:
    return float(statistics.median(values))


# ---------------------------------------------------------------------------
# overfit probe


@dataclass
class OverfitResult:
    reached_at: int | None  # first step with 100% train accuracy
    final_accuracy: float
    seconds: float


def overfit(seed: int = 0, num_samples: int = 32, max_steps: int = 300, check_every: int = 10) -> OverfitResult:
    """Full-batch training on a tiny synthetic set, d=16 and one interaction layer."""
    bundle = generate_synthetic(dataclasses.replace(TASK, num_samples=num_samples, split_fractions=(1.0, 0.0, 0.0)),
                                seed)
    cfg = TrainConfig(model=ModelConfig(d_t=TASK.d_t, d_a=TASK.d_a, d_v=TASK.d_v, depth=1),
                      max_epochs=max_steps, batch_size=num_samples, seed=seed)
    torch.manual_seed(seed)
    model = build_model(cfg.model)
    opt, sched = make_optimizer_schedule(model, cfg, steps_per_epoch=1)
    batch = collate(list(bundle.samples))
    t0 = time.perf_counter()
    acc = 0.0
    for step in range(1, max_steps + 1):
        model.train()
        out = model(batch)
        loss = total_loss(out.logits, batch.labels, out.gate_rhos(), out.relation.s, step - 1, cfg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % check_every == 0 or step == max_steps:
            y, p, _ = predict(model, bundle.samples)
            acc = classification_metrics(y, p, 2).accuracy
            if acc == 100.0:
                return OverfitResult(step, acc, time.perf_counter() - t0)
    return OverfitResult(None, acc, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# linear probes on the synthetic generator


def block_means(bundle: DatasetBundle) -> dict[str, np.ndarray]:
    """Per-sample means of the context block (text) and utterance blocks (audio, visual)."""
    return {
        "context": np.stack([s.context["t"].mean(0) for s in bundle]),
        "utterance": np.concatenate([np.stack([s.utterance[m].mean(0) for s in bundle]) for m in ("a", "v")], 1),
    }


def logistic_probe(x_train, y_train, x_test, y_test, seed: int = 0, steps: int = 500) -> float:
    """Test accuracy (%) of an L2-regularised logistic regression fit with LBFGS."""
    torch.manual_seed(seed)
    xt = torch.as_tensor(x_train, dtype=torch.float64)
    mu, sd = xt.mean(0), xt.std(0) + 1e-8
    xt = (xt - mu) / sd
    xe = (torch.as_tensor(x_test, dtype=torch.float64) - mu) / sd
    yt = torch.as_tensor(y_train, dtype=torch.float64)
    w = torch.zeros(xt.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=steps, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(xt @ w + b, yt) + 1e-3 * w.pow(2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        pred = ((xe @ w + b) > 0).long().numpy()
    return float((pred == np.asarray(y_test)).mean() * 100)


def probe_features(bundle: DatasetBundle, kind: str) -> np.ndarray:
    """``utterance``/``context`` block means, or ``joint``: both plus their pairwise products."""
    means = block_means(bundle)
    if kind in means:
        return means[kind]
    if kind != "joint":
        raise ValueError(f"unknown probe feature set {kind!r}")
    c, u = means["context"], means["utterance"]
    prods = (c[:, :, None] * u[:, None, :]).reshape(len(c), -1)
    return np.concatenate([c, u, prods], 1)


def probe_accuracy(bundle: DatasetBundle, kind: str, train_fraction: float = 0.5) -> float:
    x = probe_features(bundle, kind)
    y = np.array([s.label for s in bundle])
    cut = int(math.floor(len(y) * train_fraction))
    return logistic_probe(x[:cut], y[:cut], x[cut:], y[cut:])
