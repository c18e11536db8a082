"""The full solver: encoders, fusion, knowledge system and inference system."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pad_sequence

from .config import ModelConfig
from .geoprog import ProgramVocabulary
from .inference_system import InferenceSystem
from .knowledge import KnowledgeBase
from .knowledge_system import KnowledgeSystem
from .perception import CoAttentionFusion, DiagramEncoder, TextEncoder
from .text import TextVocabulary, tokenize


@dataclass
class Encoded:
    H_P: torch.Tensor
    text_mask: torch.Tensor
    H_D: torch.Tensor
    F_D: torch.Tensor
    H_M: torch.Tensor
    mask_M: torch.Tensor
    h_M: torch.Tensor
    reduce_w: torch.Tensor


class DualGeoSolver(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: ProgramVocabulary, text_vocab: TextVocabulary,
                 kb: KnowledgeBase):
        super().__init__()
        self.cfg, self.vocab, self.text_vocab, self.kb = cfg, vocab, text_vocab, kb
        d = cfg.d
        # every explanation at once is the longest sequence the text encoder may see
        capacity = len(self.knowledge_token_ids(range(len(kb))))
        self.text_encoder = TextEncoder(len(text_vocab), d, cfg.max_text_len, cfg.text_layers, cfg.heads,
                                        cfg.ffn_mult, cfg.dropout, position_capacity=capacity)
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.diagram_encoder = DiagramEncoder(patch_dim, cfg.num_patches, d, cfg.diagram_layers, cfg.heads,
                                              cfg.ffn_mult, cfg.dropout)
        if cfg.freeze_diagram_encoder:
            self.diagram_encoder.requires_grad_(False)
        self.fusion = CoAttentionFusion(d, cfg.coattn_depth, cfg.heads, cfg.ffn_mult, cfg.dropout)
        self.knowledge = KnowledgeSystem(d, len(kb), cfg.use_ksm, cfg.use_vsm, cfg.use_kim)
        self.inference = InferenceSystem(d, len(vocab), self.knowledge.guide_dim, vocab.pad_id, cfg.use_ggm,
                                         cfg.ggm_layers, cfg.heads, cfg.ffn_mult, cfg.max_decode_len, cfg.dropout)

    @property
    def n_knowledge(self) -> int:
        return len(self.kb)

    def knowledge_token_ids(self, selected) -> list[int]:
        return self.text_vocab.encode(tokenize(self.kb.concat_explanations(selected)))

    def encode(self, text, text_mask, patches) -> Encoded:
        H_P, text_mask = self.text_encoder(text, text_mask)
        H_D = self.diagram_encoder(patches)
        F_D, H_M, mask_M, h_M, reduce_w = self.fusion(H_P, text_mask, H_D)
        return Encoded(H_P, text_mask, H_D, F_D, H_M, mask_M, h_M, reduce_w)

    def encode_knowledge(self, sets, cache: dict | None = None):
        """Encode one concatenated explanation sequence per selection set.

        Returns (features (k, L, d), mask (k, L)). Empty sets map to the learned
        null vector. ``cache`` (selection tuple -> features) is only safe when no
        gradients are needed.
        """
        sets = [tuple(sorted(set(s))) for s in sets]
        todo = sorted({s for s in sets if s and (cache is None or s not in cache)})
        fresh = {}
        if todo:
            ids = [torch.tensor(self.knowledge_token_ids(s), dtype=torch.long) for s in todo]
            lengths = [len(x) for x in ids]
            padded = pad_sequence(ids, batch_first=True).to(self.knowledge.null_knowledge.device)
            mask = torch.arange(padded.shape[1])[None] < torch.tensor(lengths)[:, None]
            feats, _ = self.text_encoder(padded, mask.to(padded.device), limit=padded.shape[1])
            for j, s in enumerate(todo):
                fresh[s] = feats[j, : lengths[j]]
            if cache is not None:
                cache.update(fresh)
        rows = []
        for s in sets:
            if not s:
                rows.append(self.knowledge.null_knowledge[None])
            else:
                rows.append(fresh[s] if s in fresh else cache[s])
        lengths = torch.tensor([len(r) for r in rows])
        feats = pad_sequence(rows, batch_first=True)
        mask = torch.arange(feats.shape[1])[None] < lengths[:, None]
        return feats, mask.to(feats.device)
