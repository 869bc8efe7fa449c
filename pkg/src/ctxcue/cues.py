"""Stage 2: local pairwise cues and the context-queried global readout, packed
into one interpretation cue vector."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .config import ALL_PAIRS, ModelConfig
from .data import MODALITIES
from .errors import PreconditionError
from .primitives import MultiHeadAttention, masked_mean_pool, seq_max_pool


class GateEnc(nn.Module):
    """BiGRU (d/2 per direction) followed by a width-3 convolutional sigmoid gate."""

    def __init__(self, d_model: int):
        super().__init__()
        self.gru = nn.GRU(d_model, d_model // 2, batch_first=True, bidirectional=True)
        self.conv = nn.Conv1d(d_model, d_model, kernel_size=3, padding=1)

    def recurrent_states(self, h, mask):
        mask = mask.bool()
        lengths = mask.sum(-1)
        if bool((lengths == 0).any()):
            raise PreconditionError("GateEnc needs at least one valid position per sequence")
        pos = torch.arange(mask.shape[-1], device=mask.device)
        if not torch.equal(mask, pos < lengths.unsqueeze(-1)):
            raise PreconditionError("GateEnc expects valid positions to form a prefix")
        packed = pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=h.shape[1])
        return out * mask.unsqueeze(-1).to(out.dtype)

    def forward(self, h, mask):
        states = self.recurrent_states(h, mask)
        gate = torch.sigmoid(self.conv(states.transpose(1, 2))).transpose(1, 2)
        return gate * states * mask.unsqueeze(-1).to(states.dtype)


def gate_enc(h, mask, module: GateEnc):
    return module(h, mask)


class Fuse(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.gate = nn.Linear(2 * d_model, d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, h, h_bar):
        g = torch.sigmoid(self.gate(torch.cat([h, h_bar], dim=-1)))
        return self.proj(g * h_bar + (1 - g) * h)


def fuse_pool(h, h_bar, mask, fuse: Fuse):
    return seq_max_pool(fuse(h, h_bar), mask)


def pairwise_cue(z_i: torch.Tensor, z_j: torch.Tensor, norm: nn.LayerNorm) -> torch.Tensor:
    """Stack two projected summaries as a 2 x d pair, LayerNorm each slot, flatten row-major."""
    pair = norm(torch.stack([z_i, z_j], dim=-2))
    return pair.flatten(-2)


class GlobalReadout(nn.Module):
    def __init__(self, d_model: int, num_heads: int, dropout: float):
        super().__init__()
        self.query = nn.Linear(d_model, d_model)
        self.attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.out = nn.Linear(3 * d_model, d_model)

    def global_query(self, h_text, partition, valid):
        ctx_mask = valid.bool() & (partition == 0)
        if not bool(ctx_mask.any(-1).all()):
            raise PreconditionError("empty context block; substitute a pseudo-context first")
        return self.query(masked_mean_pool(h_text, ctx_mask))

    def readout(self, q_hat, h_utt, utt_mask):
        if not bool(utt_mask.bool().any(-1).all()):
            raise PreconditionError("empty utterance block in global readout")
        return self.attn(q_hat.unsqueeze(-2), h_utt, utt_mask).squeeze(-2)


@dataclass
class InterpretationCue:
    pairs: dict[str, torch.Tensor]  # "ta"/"tv"/"av" -> (B, 2d)
    global_reads: dict[str, torch.Tensor]  # m -> (B, d)
    g_hat: torch.Tensor  # (B, d)
    u_f: torch.Tensor  # (B, 7d)
    q_hat: torch.Tensor  # (B, d)


def build_cue(p_ta, p_tv, p_av, g_t, g_a, g_v, out_proj: nn.Linear, q_hat=None) -> InterpretationCue:
    g_hat = out_proj(torch.cat([g_t, g_a, g_v], dim=-1))
    u_f = torch.cat([p_ta, p_tv, p_av, g_hat], dim=-1)
    return InterpretationCue({"ta": p_ta, "tv": p_tv, "av": p_av}, {"t": g_t, "a": g_a, "v": g_v},
                             g_hat, u_f, q_hat)


def cue_slices(d_model: int) -> dict[str, slice]:
    """Positions of each component inside u_f."""
    return {"ta": slice(0, 2 * d_model), "tv": slice(2 * d_model, 4 * d_model),
            "av": slice(4 * d_model, 6 * d_model), "global": slice(6 * d_model, 7 * d_model)}


class CueConstructor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.gate_enc = nn.ModuleDict({m: GateEnc(d) for m in MODALITIES})
        self.fuse = nn.ModuleDict({m: Fuse(d) for m in MODALITIES})
        self.shared_proj = nn.ModuleDict({m: nn.Linear(d, d) for m in MODALITIES})
        self.pair_norm = nn.ModuleDict({p: nn.LayerNorm(d) for p in ALL_PAIRS})
        self.readout = GlobalReadout(d, cfg.num_heads, cfg.dropout)

    def local_summaries(self, streams, valid):
        z_hat = {}
        for m in MODALITIES:
            h = streams[m]
            h_bar = self.gate_enc[m](h, valid)
            z_hat[m] = self.shared_proj[m](fuse_pool(h, h_bar, valid, self.fuse[m]))
        return z_hat

    def forward(self, streams: dict[str, torch.Tensor], partition, valid) -> InterpretationCue:
        cfg = self.cfg
        some = streams["t"]
        b, d = some.shape[0], cfg.d_model
        zeros2 = some.new_zeros(b, 2 * d)

        if cfg.local_cue:
            z_hat = self.local_summaries(streams, valid)
            pairs = {p: pairwise_cue(z_hat[p[0]], z_hat[p[1]], self.pair_norm[p]) if p in cfg.pairs else zeros2
                     for p in ALL_PAIRS}
        else:
            pairs = {p: zeros2 for p in ALL_PAIRS}

        q_hat = self.readout.global_query(streams["t"], partition, valid)
        utt_mask = valid.bool() & (partition == 1)
        g = {m: self.readout.readout(q_hat, streams[m], utt_mask) for m in MODALITIES}
        cue = build_cue(pairs["ta"], pairs["tv"], pairs["av"], g["t"], g["a"], g["v"], self.readout.out, q_hat)
        if not cfg.global_cue:
            g_hat = torch.zeros_like(cue.g_hat)
            cue = InterpretationCue(cue.pairs, cue.global_reads, g_hat,
                                    torch.cat([pairs["ta"], pairs["tv"], pairs["av"], g_hat], dim=-1), q_hat)
        return cue
