"""Attention primitives and transformer blocks used across the model."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def dot_attention(query, keys, mask=None):
    """Unscaled dot-product attention pooling.

    query: (B, d); keys: (B, L, d); mask: (B, L) bool, True marks real positions.
    Returns (context (B, d), weights (B, L)).
    """
    logits = torch.bmm(keys, query.unsqueeze(-1)).squeeze(-1)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.bmm(weights.unsqueeze(1), keys).squeeze(1), weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d, heads, dropout=0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden size {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory=None, key_mask=None, causal=False):
        """Returns (output (B, Lq, d), weights (B, heads, Lq, Lk))."""
        memory = x if memory is None else memory
        B, Lq, _ = x.shape
        Lk = memory.shape[1]
        hd = self.d // self.heads

        q = self.q_proj(x).view(B, Lq, self.heads, hd).transpose(1, 2)
        k = self.k_proj(memory).view(B, Lk, self.heads, hd).transpose(1, 2)
        v = self.v_proj(memory).view(B, Lk, self.heads, hd).transpose(1, 2)

        scores = q @ k.transpose(-1, -2) / hd ** 0.5
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, Lq, self.d)
        return self.out_proj(out), weights


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention, optional cross-attention, GELU feed-forward."""

    def __init__(self, d, heads, ffn_mult=4, cross=False, dropout=0.0):
        super().__init__()
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, dropout)
        self.cross = cross
        if cross:
            self.cross_norm = nn.LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, heads, dropout)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn_mult * d, d)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None, memory=None, memory_mask=None, causal=False):
        h = self.self_norm(x)
        a, self_w = self.self_attn(h, key_mask=mask, causal=causal)
        x = x + self.dropout(a)
        cross_w = None
        if self.cross:
            a, cross_w = self.cross_attn(self.cross_norm(x), memory, key_mask=memory_mask)
            x = x + self.dropout(a)
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x, (self_w, cross_w)


def masked_log_softmax(logits, legal):
    """log-softmax restricted to ``legal`` (bool, same shape); illegal entries get -inf."""
    return F.log_softmax(logits.masked_fill(~legal, float("-inf")), dim=-1)
