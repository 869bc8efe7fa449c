"""Routing heatmaps, expert-consistency scores, the interaction-depth sweep and
embedding export."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import DatasetBundle
from .errors import DataError, PreconditionError, TrainingError
from .model import CueNet, load_checkpoint
from .training import SCOPES, batches, evaluate, train, write_csv

SUBSETS = ("S", "NS")
EXPERTS = ("Con", "Dis")


def routing_matrix(rhos: Sequence[float], sarcastic: Sequence[int]) -> np.ndarray:
    """2x2 matrix: rows S / NS, columns Con = mean(rho), Dis = mean(1 - rho).

    A subset with no samples gets a NaN row.
    """
    rhos = np.asarray(rhos, dtype=np.float64)
    flags = np.asarray(sarcastic).astype(bool)
    if rhos.shape != flags.shape:
        raise PreconditionError("one sarcasm flag per routing coefficient is required")
    out = np.full((2, 2), np.nan)
    for row, sel in enumerate((flags, ~flags)):
        if sel.any():
            mean = rhos[sel].mean()
            out[row] = (mean, 1.0 - mean)
    return out


def consistency_score(matrix: np.ndarray) -> float:
    return float((matrix[0][0] + matrix[1][1]) / 2)


def _flags(bundle: DatasetBundle) -> tuple[np.ndarray, str]:
    if all(s.sarcasm is not None for s in bundle.samples):
        return np.array([s.sarcasm for s in bundle.samples]), "sarcasm flag"
    if bundle.num_classes == 2:
        return np.array([s.label for s in bundle.samples]), "binary label as S/NS proxy"
    raise DataError("routing export needs sarcasm flags (or binary labels to stand in for them)")


@torch.no_grad()
def collect_rhos(model: CueNet, bundle: DatasetBundle, modality: str, branch: str = "structure") -> np.ndarray:
    """(num_samples, num_layers) routing coefficients from eval-mode forwards."""
    if modality not in ("a", "v"):
        raise PreconditionError(f"routing exists only for modalities 'a' and 'v', got {modality!r}")
    if not model.cfg.dual_expert:
        raise PreconditionError("this model has no dual-expert routing")
    model.eval()
    rows = []
    for batch in batches(bundle.samples, 64):
        out = model(batch)
        trace = out.relation.rho[branch][modality]
        rows.append(torch.stack(trace, -1))
    return torch.cat(rows).numpy()


def export_routing(model: CueNet | str | Path, bundle: DatasetBundle, modality: str, layer: int,
                   out_path: str | Path | None = None, branch: str = "structure") -> np.ndarray:
    if not isinstance(model, CueNet):
        model = load_checkpoint(model)
    n_layers = model.cfg.layers_for(modality) if modality in ("a", "v") else 0
    if not 0 <= layer < n_layers:
        raise PreconditionError(f"layer {layer} out of range for modality {modality!r} with {n_layers} layers")
    flags, source = _flags(bundle)
    rhos = collect_rhos(model, bundle, modality, branch)[:, layer]
    mat = routing_matrix(rhos, flags)
    if out_path is not None:
        rows = [{"subset": SUBSETS[i], "Con": float(mat[i, 0]), "Dis": float(mat[i, 1])} for i in range(2)]
        write_csv(Path(out_path), rows, ["subset", "Con", "Dis"],
                  comment=f"modality={modality} layer={layer} branch={branch} subsets from {source}")
    return mat


def layer_consistency(model: CueNet, bundle: DatasetBundle, modality: str = "v",
                      branch: str = "structure") -> list[float]:
    flags, _ = _flags(bundle)
    rhos = collect_rhos(model, bundle, modality, branch)
    return [consistency_score(routing_matrix(rhos[:, l], flags)) for l in range(rhos.shape[1])]


def depth_sweep(bundle: DatasetBundle, base_config: TrainConfig, depths: Sequence[int],
                out_dir: str | Path | None = None, split: str = "test") -> list[dict]:
    """Train one model per interaction depth; rows of (depth, scope, f1)."""
    if not depths:
        raise PreconditionError("depth list is empty")
    if any(d < 0 for d in depths):
        raise PreconditionError(f"depths must be >= 0, got {list(depths)}")
    rows = []
    for depth in depths:
        cfg = dataclasses.replace(base_config, model=dataclasses.replace(base_config.model, depth=depth))
        sub = None if out_dir is None else Path(out_dir) / f"depth{depth}"
        try:
            run = train(bundle, cfg, sub)
        except TrainingError as exc:
            raise TrainingError(f"depth {depth}: {exc}") from exc
        report = evaluate(run.model, bundle, "all", split=split, pseudo_context=cfg.pseudo_context,
                          epoch=run.best_epoch)
        for scope in SCOPES:
            m = report[scope]
            rows.append({"depth": depth, "scope": scope, "f1": float("nan") if m is None else m.f1})
    if out_dir is not None:
        write_csv(Path(out_dir) / "depth_sweep.csv", rows, ["depth", "scope", "f1"])
    return rows


@torch.no_grad()
def export_embeddings(model: CueNet | str | Path, bundle: DatasetBundle,
                      out_path: str | Path | None = None) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Fused representation z for every sample, in bundle order."""
    if not isinstance(model, CueNet):
        model = load_checkpoint(model)
    model.eval()
    ids, zs = [], []
    for batch in batches(bundle.samples, 64):
        zs.append(model(batch).aggregation.z)
        ids.extend(batch.sample_ids)
    z = torch.cat(zs).numpy()
    labels = np.array([s.label for s in bundle.samples])
    if out_path is not None:
        header = ["sample_id", "label"] + [f"z{i}" for i in range(z.shape[1])]
        rows = [dict(zip(header, [sid, int(lab)] + [float(v) for v in row])) for sid, lab, row in zip(ids, labels, z)]
        write_csv(Path(out_path), rows, header)
    return ids, labels, z
