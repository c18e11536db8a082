"""Explicit reasoning: token prediction (attention + recurrent cell) and goal generation."""

from __future__ import annotations

import torch
from torch import nn

from .layers import TransformerBlock, dot_attention, masked_log_softmax


class GoalGenerator(nn.Module):
    """Small causal transformer decoder over the decoder-state history H^S.

    Self-attention is masked, cross-attention reads H_M. The goal is the output
    at the last history position.
    """

    def __init__(self, d, layers=2, heads=4, ffn_mult=4, max_len=64, dropout=0.0):
        super().__init__()
        self.pos = nn.Embedding(max_len, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, heads, ffn_mult, cross=True, dropout=dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, H_S, H_M, mask_M):
        """H_S (B, L, d) -> all positions (B, L, d)."""
        pos = torch.arange(H_S.shape[1], device=H_S.device)
        x = H_S + self.pos(pos)[None]
        for blk in self.blocks:
            x, _ = blk(x, memory=H_M, memory_mask=mask_M, causal=True)
        return self.norm(x)


class InferenceSystem(nn.Module):
    def __init__(self, d, vocab_size, guide_dim, pad_id=0, use_ggm=True, ggm_layers=2, heads=4,
                 ffn_mult=4, max_len=32, dropout=0.0):
        super().__init__()
        self.d = d
        self.token_embed = nn.Embedding(vocab_size, d, padding_idx=pad_id)
        self.s0 = nn.Linear(d, d)
        self.phi = nn.LSTMCell(2 * d + guide_dim, d)
        self.out = nn.Linear(d, vocab_size)
        self.use_ggm = use_ggm
        if use_ggm:
            # history holds s_0 plus one state per emitted token
            self.ggm = GoalGenerator(d, ggm_layers, heads, ffn_mult, max_len + 2, dropout)

    def embed_token(self, ids):
        return self.token_embed(ids)

    def initial(self, h_M):
        """Learned initial state s_0 (and a zero cell) from the pooled problem vector."""
        return torch.tanh(self.s0(h_M)), torch.zeros_like(h_M)

    def tpm_step(self, H_M, mask_M, guide, e_prev, s_prev, c_prev, legal=None):
        """One token step: returns (s, c, log P over the program vocabulary, context weights)."""
        h_c, ctx_w = dot_attention(s_prev, H_M, mask_M)
        s, c = self.phi(torch.cat([h_c, guide, e_prev], dim=-1), (s_prev, c_prev))
        logits = self.out(s)
        logp = masked_log_softmax(logits, legal) if legal is not None else torch.log_softmax(logits, -1)
        return s, c, logp, ctx_w

    def ggm_next_goal(self, H_M, mask_M, H_S):
        return self.ggm(H_S, H_M, mask_M)[:, -1]
