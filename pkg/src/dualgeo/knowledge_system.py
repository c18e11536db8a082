"""Implicit reasoning: knowledge selection, visual spotlight and knowledge injection.

At each step boundary the goal vector picks knowledge entries (sigmoid scores
over the base, thresholded), attends over the diagram features, and the two
are folded together with the decoder state into the guiding vector ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import dot_attention


@dataclass
class KnowledgeSelection:
    scores: torch.Tensor            # (N,)
    selected: tuple[int, ...]
    features: torch.Tensor | None = None   # (n_c, d)


def threshold_select(scores, theta: float) -> tuple[int, ...]:
    """Ids with score strictly above theta; falls back to the single best (lowest id on ties)."""
    p = np.asarray(scores, dtype=np.float64)
    chosen = tuple(int(i) for i in np.flatnonzero(p > theta))
    if not chosen:
        chosen = (int(np.argmax(p)),)
    return chosen


class KnowledgeSystem(nn.Module):
    def __init__(self, d, n_knowledge, use_ksm=True, use_vsm=True, use_kim=True):
        super().__init__()
        self.d = d
        self.use_ksm, self.use_vsm, self.use_kim = use_ksm, use_vsm, use_kim
        if use_ksm:
            self.ksm = nn.Linear(d, n_knowledge)
            # stands in for H^K when a step has no knowledge at all
            self.null_knowledge = nn.Parameter(torch.zeros(d))
        n_parts = int(use_vsm) + int(use_ksm)
        if use_kim:
            self.zeta = nn.LSTMCell(d * (n_parts + 1), d)
            self.r0 = nn.Linear(d, d)
            self.guide_dim = d
        else:
            self.guide_dim = d * n_parts

    def knowledge_scores(self, g):
        return torch.sigmoid(self.ksm(g))

    def select(self, scores, theta):
        return [threshold_select(row, theta) for row in scores.detach().cpu().double().numpy()]

    def vsm_attend(self, g, H_D):
        """Spotlight: softmax(g . h_i) weighted sum of diagram features."""
        return dot_attention(g, H_D)

    def initial(self, h_M):
        """(r_0, cell_0) with r_0 a linear map of the pooled problem vector."""
        B = h_M.shape[0]
        if self.use_kim:
            return self.r0(h_M), h_M.new_zeros(B, self.d)
        return h_M.new_zeros(B, self.guide_dim), None

    def guide(self, H_K, K_mask, h_vis, s_prev, r_prev, cell_prev):
        """New guiding information for one step; returns (r, cell, knowledge weights)."""
        know_w = None
        if self.use_kim:
            parts = []
            if self.use_vsm:
                parts.append(h_vis)
            if self.use_ksm:
                h_know, know_w = dot_attention(r_prev, H_K, K_mask)
                parts.append(h_know)
            parts.append(s_prev)
            r, cell = self.zeta(torch.cat(parts, dim=-1), (r_prev, cell_prev))
            return r, cell, know_w
        # without injection: knowledge pooled by the decoder state, fed raw to the decoder
        parts = []
        if self.use_vsm:
            parts.append(h_vis)
        if self.use_ksm:
            h_know, know_w = dot_attention(s_prev, H_K, K_mask)
            parts.append(h_know)
        if not parts:
            return s_prev.new_zeros(s_prev.shape[0], 0), None, None
        return torch.cat(parts, dim=-1), None, know_w
