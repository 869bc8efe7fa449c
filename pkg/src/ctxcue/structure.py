"""Stage 1: role-embedded encoders, the text-anchored relation state and
relation-guided dual-expert encoders for audio and video."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .config import ModelConfig
from .data import Batch
from .errors import PreconditionError
from .primitives import FeedForward, MultiHeadAttention, masked_mean_pool

NONVERBAL = ("a", "v")


class RoleEmbedding(nn.Module):
    """Adds one of two learned vectors per position, picked by the partition
    indicator. Disabled, it is the identity map."""

    def __init__(self, d_in: int, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.weight = nn.Parameter(torch.randn(2, d_in) * 0.02) if enabled else None

    def forward(self, x: torch.Tensor, partition: torch.Tensor, valid: torch.Tensor | None = None):
        if not self.enabled:
            return x
        emb = self.weight[partition]
        if valid is not None:
            emb = emb * valid.unsqueeze(-1).to(emb.dtype)
        return x + emb


def add_structure_embeddings(x, partition, valid, role: RoleEmbedding):
    return role(x, partition, valid)


class EncoderLayer(nn.Module):
    """Post-norm transformer layer: attention and FFN, each add-then-LayerNorm."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.dropout(self.attn(x, x, mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class TextEncoder(nn.Module):
    """Trainable stand-in for the pretrained text encoder: special-slot and
    role embeddings, an input projection, then ``n_layers`` encoder layers."""

    def __init__(self, d_in: int, d_model: int, n_layers: int, num_heads: int, d_ff: int,
                 dropout: float, role_embeddings: bool = True):
        super().__init__()
        self.role = RoleEmbedding(d_in, role_embeddings)
        self.special = nn.Parameter(torch.randn(2, d_in) * 0.02)  # [CLS], [SEP]
        self.proj = nn.Linear(d_in, d_model)
        self.layers = nn.ModuleList(EncoderLayer(d_model, num_heads, d_ff, dropout) for _ in range(n_layers))

    def embed(self, x, partition, valid, special):
        pos = torch.arange(x.shape[-2], device=x.device)
        kind = torch.where(pos == 0, 0, 1).expand_as(special)
        x = x + self.special[kind] * special.unsqueeze(-1).to(x.dtype)
        return self.role(x, partition, valid)

    def encode(self, embedded, mask):
        h = self.proj(embedded)
        for layer in self.layers:
            h = layer(h, mask)
        return h

    def forward(self, x, partition, valid, special):
        return self.encode(self.embed(x, partition, valid, special), valid)


def encode_text(embedded_text, mask, encoder: TextEncoder):
    return encoder.encode(embedded_text, mask)


def relation_representation(h_text: torch.Tensor, partition: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    ctx_mask = valid.bool() & (partition == 0)
    utt_mask = valid.bool() & (partition == 1)
    if not (bool(ctx_mask.any(-1).all()) and bool(utt_mask.any(-1).all())):
        raise PreconditionError("relation representation needs non-empty context and utterance blocks")
    h_c = masked_mean_pool(h_text, ctx_mask)
    h_u = masked_mean_pool(h_text, utt_mask)
    return torch.cat([h_c, h_u, h_c - h_u], dim=-1)


def relation_score(r: torch.Tensor, scorer: nn.Linear) -> torch.Tensor:
    return torch.sigmoid(scorer(r)).squeeze(-1)


def route_coefficient(layer_state, mask, r_tilde, router: nn.Linear) -> torch.Tensor:
    z = masked_mean_pool(layer_state, mask)
    return torch.sigmoid(router(torch.cat([z, r_tilde], dim=-1))).squeeze(-1)


def dual_expert_ffn(x: torch.Tensor, rho: torch.Tensor, e_con: nn.Module, e_dis: nn.Module) -> torch.Tensor:
    """rho * E_con(x) + (1 - rho) * E_dis(x); rho is a scalar or one value per batch row."""
    rho = torch.as_tensor(rho, dtype=x.dtype, device=x.device)
    if rho.dim() == 1:
        rho = rho.view(-1, *([1] * (x.dim() - 1)))
    return rho * e_con(x) + (1 - rho) * e_dis(x)


class DualExpertLayer(nn.Module):
    """Self-attention, then a routed mix of two FFN experts.

    The router reads the post-attention states pooled over the sequence,
    concatenated with the modality's relation guidance. Both experts start
    as exact copies of one FFN.
    """

    def __init__(self, d_model: int, num_heads: int, d_ff: int, dropout: float, dual: bool = True):
        super().__init__()
        self.dual = dual
        self.attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)
        if dual:
            self.e_con = FeedForward(d_model, d_ff, dropout)
            self.e_dis = copy.deepcopy(self.e_con)
            self.router = nn.Linear(2 * d_model, 1)
        else:
            self.ffn = FeedForward(d_model, d_ff, dropout)

    def forward(self, x, mask, r_tilde, rho_override: float | None = None):
        x = self.norm1(x + self.dropout(self.attn(x, x, mask)))
        if not self.dual:
            return self.norm2(x + self.dropout(self.ffn(x))), None
        rho = route_coefficient(x, mask, r_tilde, self.router)
        mix = rho if rho_override is None else torch.full_like(rho, rho_override)
        y = dual_expert_ffn(x, mix, self.e_con, self.e_dis)
        return self.norm2(x + self.dropout(y)), rho


class NonverbalEncoder(nn.Module):
    def __init__(self, d_in: int, d_model: int, n_layers: int, num_heads: int, d_ff: int,
                 dropout: float, dual: bool = True, role_embeddings: bool = True):
        super().__init__()
        self.role = RoleEmbedding(d_in, role_embeddings)
        self.proj = nn.Linear(d_in, d_model)
        self.rel_proj = nn.Linear(3 * d_model, d_model)
        self.layers = nn.ModuleList(
            DualExpertLayer(d_model, num_heads, d_ff, dropout, dual) for _ in range(n_layers))

    def project_relation(self, r):
        return self.rel_proj(r)

    def forward(self, x, partition, valid, r):
        """Returns final states, the per-layer rho trace (each (B,)) and r_tilde."""
        r_tilde = self.project_relation(r)
        h = self.proj(self.role(x, partition, valid))
        trace = []
        for layer in self.layers:
            h, rho = layer(h, valid, r_tilde)
            if rho is not None:
                trace.append(rho)
        return h, trace, r_tilde


def project_relation(r, encoder: NonverbalEncoder):
    return encoder.project_relation(r)


def encode_nonverbal(embedded, mask, r_tilde, encoder: NonverbalEncoder):
    h = encoder.proj(embedded)
    trace = []
    for layer in encoder.layers:
        h, rho = layer(h, mask, r_tilde)
        if rho is not None:
            trace.append(rho)
    return h, trace


@dataclass
class BiasSchedule:
    """Balancing weight lambda0 * max(0, 1 - epoch / tau_end)."""

    lambda0: float = 1.0
    tau_end: int = 20

    def __call__(self, epoch: int) -> float:
        return self.lambda0 * max(0.0, 1.0 - epoch / self.tau_end)


def gate_loss(rho_traces, s: torch.Tensor, epoch: int, schedule: BiasSchedule,
              include_bce: bool = True) -> torch.Tensor:
    """Routing regulariser, averaged over the batch and summed over coefficients.

    The BCE target is the relation prior with its gradient stopped.
    """
    rhos = list(rho_traces)
    if not rhos:
        return s.new_zeros(())
    rho = torch.stack([torch.as_tensor(r, dtype=s.dtype) for r in rhos], dim=-1)
    target = s.detach().unsqueeze(-1).expand_as(rho)
    per_sample = rho.new_zeros(rho.shape[:-1])
    if include_bce:
        per_sample = per_sample + F.binary_cross_entropy(rho, target, reduction="none").sum(-1)
    lam = schedule(epoch)
    if lam:
        per_sample = per_sample + lam * ((rho - 0.5) ** 2).sum(-1)
    return per_sample.mean()


@dataclass
class RelationState:
    r: torch.Tensor  # (B, 3d)
    s: torch.Tensor  # (B,)
    r_tilde: dict[str, dict[str, torch.Tensor]]  # branch -> modality -> (B, d)
    rho: dict[str, dict[str, list[torch.Tensor]]]  # branch -> modality -> per-layer (B,)

    def all_rhos(self, branches=("primary", "structure")) -> list[torch.Tensor]:
        return [r for b in branches if b in self.rho for m in NONVERBAL for r in self.rho[b][m]]


@dataclass
class StageOneOutput:
    primary: dict[str, torch.Tensor]
    structure: dict[str, torch.Tensor]
    relation: RelationState
    partition: torch.Tensor
    valid: torch.Tensor


class StructureEncoder(nn.Module):
    """Shared text encoder plus a primary and a structure-preserving instance
    of each nonverbal encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, ff = cfg.d_model, cfg.d_model * cfg.ff_mult
        self.text = TextEncoder(cfg.d_t, d, cfg.n_text_layers, cfg.num_heads, ff, cfg.dropout, cfg.role_embeddings)
        self.scorer = nn.Linear(3 * d, 1)
        self.primary = nn.ModuleDict({
            m: NonverbalEncoder(cfg.input_dims[m], d, cfg.layers_for(m), cfg.num_heads, ff, cfg.dropout,
                                cfg.dual_expert, cfg.role_embeddings)
            for m in NONVERBAL
        })
        if cfg.shared_branches:
            self.structure = None
        elif cfg.tie_branch_init:
            self.structure = copy.deepcopy(self.primary)
        else:
            self.structure = nn.ModuleDict({
                m: NonverbalEncoder(cfg.input_dims[m], d, cfg.layers_for(m), cfg.num_heads, ff, cfg.dropout,
                                    cfg.dual_expert, cfg.role_embeddings)
                for m in NONVERBAL
            })

    def branch(self, name: str) -> nn.ModuleDict:
        if name == "structure" and self.structure is not None:
            return self.structure
        return self.primary

    def nonverbal_modules(self) -> list[nn.Module]:
        mods = [self.primary]
        if self.structure is not None:
            mods.append(self.structure)
        return mods

    def forward(self, batch: Batch) -> StageOneOutput:
        part, valid = batch.partition, batch.valid
        h_t = self.text(batch.features["t"], part, valid, batch.special)
        r = relation_representation(h_t, part, valid)
        s = relation_score(r, self.scorer)
        outs, traces, guides = {}, {}, {}
        branches = ("primary",) if self.structure is None else ("primary", "structure")
        for b in branches:
            outs[b], traces[b], guides[b] = {"t": h_t}, {}, {}
            for m in NONVERBAL:
                h, trace, r_tilde = self.branch(b)[m](batch.features[m], part, valid, r)
                outs[b][m], traces[b][m], guides[b][m] = h, trace, r_tilde
        if self.structure is None:
            outs["structure"] = outs["primary"]
            # one set of routers: the telemetry view aliases, the loss must not double count
            traces["structure"] = traces["primary"]
            guides["structure"] = guides["primary"]
        relation = RelationState(r=r, s=s, r_tilde=guides, rho=traces)
        return StageOneOutput(outs["primary"], outs["structure"], relation, part, valid)


def run_stage1(batch: Batch, encoder: StructureEncoder) -> StageOneOutput:
    return encoder(batch)
