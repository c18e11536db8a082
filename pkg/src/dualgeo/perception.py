"""Problem encoders: text (BiLSTM + self-attention, linearly merged), diagram
(patch embedding + self-attention) and text-guided co-attention fusion."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import SequenceTooLong
from .layers import TransformerBlock


class ContextEncoder(nn.Module):
    """Small from-scratch self-attention text encoder (stand-in for a pretrained one)."""

    def __init__(self, vocab_size, d, max_len, layers=2, heads=4, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d, padding_idx=0)
        self.pos = nn.Embedding(max_len, d)
        self.blocks = nn.ModuleList(TransformerBlock(d, heads, ffn_mult, dropout=dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, ids, mask):
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.embed(ids) + self.pos(pos)[None]
        for blk in self.blocks:
            x, _ = blk(x, mask)
        return self.norm(x)


def load_context_weights(encoder: ContextEncoder, path) -> None:
    """Load pretrained weights for the contextual encoder from a state-dict file."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    encoder.load_state_dict(state)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, d, max_len=128, layers=2, heads=4, ffn_mult=4, dropout=0.0,
                 position_capacity=None):
        super().__init__()
        if d % 2:
            raise ValueError("hidden size must be even for the bidirectional LSTM")
        self.max_len = max_len
        # knowledge concatenations may run longer than problem texts
        self.position_capacity = max(max_len, position_capacity or 0)
        self.embed = nn.Embedding(vocab_size, d, padding_idx=0)
        self.lstm = nn.LSTM(d, d // 2, batch_first=True, bidirectional=True)
        self.context = ContextEncoder(vocab_size, d, self.position_capacity, layers, heads, ffn_mult, dropout)
        self.merge = nn.Linear(2 * d, d)

    def forward(self, ids, mask, limit=None):
        """ids, mask: (B, n) -> H_P (B, n, d); padded rows are zero."""
        lengths = mask.sum(1)
        if (lengths == 0).any():
            raise ValueError("cannot encode an empty token sequence")
        limit = limit or self.max_len
        if int(lengths.max()) > limit:
            raise SequenceTooLong(f"{int(lengths.max())} tokens exceed the limit of {limit}")
        ids = ids[:, : int(lengths.max())]
        mask = mask[:, : ids.shape[1]]
        packed = pack_padded_sequence(self.embed(ids), lengths.cpu(), batch_first=True, enforce_sorted=False)
        rec, _ = self.lstm(packed)
        rec, _ = pad_packed_sequence(rec, batch_first=True, total_length=ids.shape[1])
        ctx = self.context(ids, mask)
        out = self.merge(torch.cat([rec, ctx], dim=-1))
        return out * mask.unsqueeze(-1).to(out.dtype), mask


class DiagramEncoder(nn.Module):
    def __init__(self, patch_dim, num_patches, d, layers=2, heads=4, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.patch_embed = nn.Linear(patch_dim, d)
        self.pos = nn.Parameter(torch.randn(num_patches, d) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, heads, ffn_mult, dropout=dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d)
        self.use_positions = True

    def embed(self, patches):
        x = self.patch_embed(patches)
        if self.use_positions:
            x = x + self.pos[None, : x.shape[1]]
        return x

    def forward(self, patches, embedded=None):
        """patches: (B, m, patch_dim) -> H_D (B, m, d)."""
        x = self.embed(patches) if embedded is None else embedded
        for blk in self.blocks:
            x, _ = blk(x)
        return self.norm(x)


def pretrain_diagram_encoder(encoder: DiagramEncoder, patches: torch.Tensor, epochs=10, mask_ratio=0.5,
                             lr=1e-3, batch_size=32, seed=0):
    """Toy masked-patch reconstruction: hide patches, regress their pixels.

    Returns the per-epoch mean reconstruction loss.
    """
    g = torch.Generator().manual_seed(seed)
    d = encoder.pos.shape[1]
    mask_token = nn.Parameter(torch.zeros(d, dtype=encoder.pos.dtype))
    head = nn.Linear(d, patches.shape[-1]).to(encoder.pos.dtype)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()) + [mask_token], lr=lr)
    history = []
    for _ in range(epochs):
        order = torch.randperm(len(patches), generator=g)
        total, n = 0.0, 0
        for start in range(0, len(order), batch_size):
            x = patches[order[start:start + batch_size]]
            hide = torch.rand(x.shape[:2], generator=g) < mask_ratio
            emb = encoder.embed(x)
            emb = torch.where(hide.unsqueeze(-1), mask_token + encoder.pos[None, : x.shape[1]], emb)
            recon = head(encoder(x, embedded=emb))
            loss = F.mse_loss(recon[hide], x[hide])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(x)
            n += len(x)
        history.append(total / n)
    return history


class CoAttentionFusion(nn.Module):
    """Text self-attention stack guiding an image stack through cross-attention.

    Returns F_D, H_M = [H_P; F_D] with its mask, and the pooled vector h_M.
    """

    def __init__(self, d, depth=2, heads=4, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.text_blocks = nn.ModuleList(TransformerBlock(d, heads, ffn_mult, dropout=dropout) for _ in range(depth))
        self.image_blocks = nn.ModuleList(
            TransformerBlock(d, heads, ffn_mult, cross=True, dropout=dropout) for _ in range(depth))
        self.text_norm = nn.LayerNorm(d)
        self.image_norm = nn.LayerNorm(d)
        self.reduce_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))
        self.reduce_out = nn.Linear(d, d)
        self.project = nn.Linear(2 * d, d)

    def forward(self, H_P, text_mask, H_D):
        t = H_P
        for blk in self.text_blocks:
            t, _ = blk(t, text_mask)
        t = self.text_norm(t)
        f = H_D
        for blk in self.image_blocks:
            f, _ = blk(f, memory=t, memory_mask=text_mask)
        F_D = self.image_norm(f)

        reduce_w = torch.softmax(self.reduce_mlp(F_D).squeeze(-1), dim=-1)
        pooled = self.reduce_out(torch.bmm(reduce_w.unsqueeze(1), F_D).squeeze(1))
        last = text_mask.sum(1) - 1
        last_tok = H_P[torch.arange(H_P.shape[0], device=H_P.device), last]
        h_M = self.project(torch.cat([pooled, last_tok], dim=-1))

        H_M = torch.cat([H_P, F_D], dim=1)
        img_mask = torch.ones(F_D.shape[:2], dtype=torch.bool, device=F_D.device)
        mask_M = torch.cat([text_mask, img_mask], dim=1)
        return F_D, H_M, mask_M, h_M, reduce_w
