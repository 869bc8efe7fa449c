"""Stage 3: guidance-conditioned interaction layers, adaptive aggregation and
the classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import MODALITIES
from .primitives import MultiHeadAttention, masked_mean_pool

# anchor -> (m1, m2)
SUPPORT = {"t": ("a", "v"), "a": ("t", "v"), "v": ("t", "a")}


class GuidedBlock(nn.Module):
    """Cross-attention to the guidance token, then masked self-attention;
    each sublayer is add-then-LayerNorm."""

    def __init__(self, d_model: int, num_heads: int, dropout: float):
        super().__init__()
        self.cross = MultiHeadAttention(d_model, num_heads, dropout)
        self.self_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.norm_cross = nn.LayerNorm(d_model)
        self.norm_self = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h, mask, guidance):
        g = guidance.expand(h.shape[0], -1, -1) if guidance.shape[0] != h.shape[0] else guidance
        a = self.norm_cross(h + self.dropout(self.cross(h, g)))
        return self.norm_self(a + self.dropout(self.self_attn(a, a, mask)))


def guided_update(h_prev, mask, guidance, block: GuidedBlock | None):
    """H + Phi(H, G); ``block=None`` is the no-guidance ablation."""
    if block is None:
        return h_prev
    return h_prev + block(h_prev, mask, guidance)


def gated_integration(r1, r2, gate_1: nn.Linear, gate_2: nn.Linear, return_gate: bool = False):
    beta = torch.sigmoid(gate_1(r1) + gate_2(r2))
    # same as beta*r1 + (1-beta)*r2, but exact when r1 == r2
    c = r2 + beta * (r1 - r2)
    return (c, beta) if return_gate else c


class RefineBlock(nn.Module):
    """Masked self-attention with add-then-LayerNorm, then an output projection."""

    def __init__(self, d_model: int, num_heads: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, c, mask):
        return self.out(self.norm(c + self.dropout(self.self_attn(c, c, mask))))


def refine(h_tilde, c, mask, block: RefineBlock):
    return h_tilde + block(c, mask)


class InteractionLayer(nn.Module):
    def __init__(self, d_model: int, num_heads: int, dropout: float, guidance: bool = True):
        super().__init__()
        self.guided = nn.ModuleDict({m: GuidedBlock(d_model, num_heads, dropout) for m in MODALITIES}) \
            if guidance else None
        self.cross = nn.ModuleDict({
            f"{m}{s}": MultiHeadAttention(d_model, num_heads, dropout) for m in MODALITIES for s in SUPPORT[m]
        })
        self.gate_1 = nn.ModuleDict({m: nn.Linear(d_model, d_model) for m in MODALITIES})
        self.gate_2 = nn.ModuleDict({m: nn.Linear(d_model, d_model, bias=False) for m in MODALITIES})
        self.refine = nn.ModuleDict({m: RefineBlock(d_model, num_heads, dropout) for m in MODALITIES})

    def cross_modal_responses(self, anchor: str, streams, masks):
        m1, m2 = SUPPORT[anchor]
        h = streams[anchor]
        return (self.cross[anchor + m1](h, streams[m1], masks[m1]),
                self.cross[anchor + m2](h, streams[m2], masks[m2]))

    def forward(self, streams, masks, guidance, record: dict | None = None):
        tilde = {m: guided_update(streams[m], masks[m], guidance,
                                  None if self.guided is None else self.guided[m]) for m in MODALITIES}
        out = {}
        for m in MODALITIES:
            r1, r2 = self.cross_modal_responses(m, tilde, masks)
            c, beta = gated_integration(r1, r2, self.gate_1[m], self.gate_2[m], return_gate=True)
            out[m] = refine(tilde[m], c, masks[m], self.refine[m])
            if record is not None:
                record.setdefault(m, []).append(
                    {"prev": streams[m], "tilde": tilde[m], "beta": beta, "c": c, "out": out[m]})
        return out


@dataclass
class AggregationResult:
    pooled: dict[str, torch.Tensor]  # m -> (B, d)
    scores: torch.Tensor  # (B, 3) in t, a, v order
    weights: torch.Tensor  # (B, 3)
    z: torch.Tensor  # (B, d)
    logits: torch.Tensor | None = None


class Aggregator(nn.Module):
    def __init__(self, d_model: int, adaptive: bool = True):
        super().__init__()
        self.adaptive = adaptive
        self.score = nn.ModuleDict({m: nn.Linear(d_model, 1) for m in MODALITIES})

    def forward(self, streams, masks) -> AggregationResult:
        pooled = {m: masked_mean_pool(streams[m], masks[m]) for m in MODALITIES}
        scores = torch.cat([self.score[m](pooled[m]) for m in MODALITIES], dim=-1)
        if self.adaptive:
            weights = torch.softmax(scores, dim=-1)
        else:
            weights = torch.full_like(scores, 1.0 / 3.0)
        stacked = torch.stack([pooled[m] for m in MODALITIES], dim=-2)
        z = (weights.unsqueeze(-1) * stacked).sum(-2)
        return AggregationResult(pooled, scores, weights, z)


def adaptive_aggregate(streams, masks, aggregator: Aggregator) -> AggregationResult:
    return aggregator(streams, masks)


class Classifier(nn.Module):
    def __init__(self, d_model: int, num_classes: int, dropout: float):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(d_model, num_classes)

    def forward(self, z):
        return self.fc(self.dropout(z))
