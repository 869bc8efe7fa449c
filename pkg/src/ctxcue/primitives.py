"""Masked attention, masked pooling and a central-difference gradient checker."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import nn

from .errors import AttentionError, ConfigError, GradcheckError, PoolingError, PreconditionError


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with masked keys.

    The key projection carries no bias: a bias there only shifts every score
    of a query by the same amount, which the softmax cancels.
    """

    def __init__(self, d_model: int, num_heads: int = 1, dropout: float = 0.0):
        super().__init__()
        if d_model % num_heads:
            raise ConfigError(f"d_model={d_model} not divisible by num_heads={num_heads}")
        self.d_model = d_model
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor,
                kv_mask: torch.Tensor | None = None, return_weights: bool = False):
        unbatched = query.dim() == 2
        if unbatched:
            query, key_value = query.unsqueeze(0), key_value.unsqueeze(0)
            kv_mask = None if kv_mask is None else kv_mask.unsqueeze(0)
        b, lq, _ = query.shape
        lk = key_value.shape[1]
        if kv_mask is not None:
            kv_mask = kv_mask.bool()
            if not bool(kv_mask.any(-1).all()):
                raise AttentionError("attention over an all-masked key set")

        def heads(x, length):
            return x.view(b, length, self.num_heads, self.head_dim).transpose(1, 2)

        q = heads(self.q_proj(query), lq)
        k = heads(self.k_proj(key_value), lk)
        v = heads(self.v_proj(key_value), lk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if kv_mask is not None:
            scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = self.dropout(weights) @ v
        out = self.out_proj(ctx.transpose(1, 2).reshape(b, lq, self.d_model))
        if unbatched:
            out, weights = out.squeeze(0), weights.squeeze(0)
        return (out, weights) if return_weights else out

    @torch.no_grad()
    def set_identity(self) -> "MultiHeadAttention":
        """Identity projections with zero biases (test and probe helper)."""
        eye = torch.eye(self.d_model, dtype=self.q_proj.weight.dtype)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            lin.weight.copy_(eye)
            if lin.bias is not None:
                lin.bias.zero_()
        return self


def attention(query_seq: torch.Tensor, key_value_seq: torch.Tensor, kv_mask: torch.Tensor,
              module: MultiHeadAttention) -> torch.Tensor:
    return module(query_seq, key_value_seq, kv_mask)


def _check_mask(mask: torch.Tensor, what: str) -> torch.Tensor:
    mask = mask.bool()
    if not bool(mask.any(-1).all()):
        raise PoolingError(f"{what} over an empty mask")
    return mask


def masked_mean_pool(seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over rows with mask = 1; ``seq`` is (..., L, d), ``mask`` (..., L)."""
    mask = _check_mask(mask, "mean pooling")
    w = mask.to(seq.dtype).unsqueeze(-1)
    return (seq * w).sum(-2) / w.sum(-2)


def seq_max_pool(seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = _check_mask(mask, "max pooling")
    return seq.masked_fill(~mask.unsqueeze(-1), float("-inf")).amax(-2)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_model)
        self.act = nn.GELU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(self.act(self.fc1(x))))


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck_report(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                     names: Sequence[str] | None = None, eps: float = 1e-5,
                     max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-tensor max relative error between autograd and central differences.

    ``fn`` must be a pure, deterministic closure over ``tensors`` returning a
    scalar. With ``max_entries`` set, that many coordinates per tensor are
    sampled (seeded) instead of sweeping every entry.
    """
    tensors = list(tensors)
    names = list(names) if names is not None else [f"tensor{i}" for i in range(len(tensors))]
    for name, t in zip(names, tensors):
        if t.dtype != torch.float64:
            raise PreconditionError(f"gradcheck needs float64 tensors; {name} is {t.dtype}")
    for t in tensors:
        t.requires_grad_(True)
    out = fn()
    if out.numel() != 1:
        raise PreconditionError("gradcheck target must be a scalar")
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    report = {}
    with torch.no_grad():
        for name, t, g in zip(names, tensors, grads):
            g = torch.zeros_like(t).reshape(-1) if g is None else g.reshape(-1)
            if not torch.isfinite(g).all():
                raise GradcheckError(f"non-finite analytic gradient for {name}")
            flat = t.view(-1)
            idx = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_entries].tolist()
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn().item()
                flat[i] = orig - eps
                minus = fn().item()
                flat[i] = orig
                fd = (plus - minus) / (2 * eps)
                an = g[i].item()
                if not math.isfinite(fd):
                    raise GradcheckError(f"non-finite numerical gradient for {name}[{i}]")
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst = max(worst, err)
            report[name] = worst
    return report


def finite_diff_gradcheck(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                          eps: float = 1e-5, **kwargs) -> float:
    report = gradcheck_report(fn, tensors, eps=eps, **kwargs)
    return max(report.values(), default=0.0)
