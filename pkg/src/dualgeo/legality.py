"""Structural legality of program prefixes, used to mask the token distribution.

A prefix alternates operator and argument slots: an operator, then exactly
``arity`` arguments, then SEP or EOS. ``V_j`` is legal only inside step ``k``
with ``j < k``; ``N_i`` only for numbers the problem actually has.
"""

from __future__ import annotations

import numpy as np

from .geoprog import ProgramVocabulary


class LegalityTracker:
    __slots__ = ("vocab", "n_numbers", "max_len", "max_steps", "structural",
                 "length", "completed", "pending", "done", "seps", "last_was_sep")

    def __init__(self, vocab: ProgramVocabulary, n_numbers: int, max_len: int = 32,
                 max_steps: int = 8, structural: bool = True):
        self.vocab = vocab
        self.n_numbers = min(n_numbers, vocab.max_problem_numbers)
        self.max_len = max_len
        self.max_steps = min(max_steps, vocab.max_variables)
        self.structural = structural
        self.length = 0
        self.completed = 0        # finished steps
        self.pending = None       # args still owed by the current operator; None = expecting operator
        self.done = False
        self.seps = 0
        self.last_was_sep = False

    def copy(self) -> "LegalityTracker":
        new = LegalityTracker.__new__(LegalityTracker)
        for name in self.__slots__:
            setattr(new, name, getattr(self, name))
        return new

    @property
    def at_boundary(self) -> bool:
        """True when the next token opens a new reasoning step."""
        if self.done:
            return False
        if self.structural:
            return self.pending is None
        return self.length == 0 or self.last_was_sep

    @property
    def step_index(self) -> int:
        return self.completed if self.structural else self.seps

    def legal_mask(self) -> np.ndarray:
        v = self.vocab
        mask = np.zeros(len(v), dtype=bool)
        if self.done:
            mask[v.pad_id] = True
            return mask
        remaining = self.max_len - self.length
        if remaining <= 1:
            mask[v.eos_id] = True
            return mask
        if not self.structural:
            mask[:] = True
            mask[v.pad_id] = mask[v.bos_id] = False
            return mask

        if self.pending is None:
            for op_id, arity in v.arity_by_id.items():
                # operator, its args, then at least EOS
                if arity + 2 <= remaining:
                    mask[op_id] = True
        elif self.pending > 0:
            mask[v.constant_ids] = True
            mask[v.number_ids[: self.n_numbers]] = True
            mask[v.variable_ids[: self.completed]] = True
        else:
            mask[v.eos_id] = True
            min_arity = min(v.arity_by_id.values())
            if self.completed < self.max_steps and min_arity + 3 <= remaining:
                mask[v.sep_id] = True
        if not mask.any():
            # budget too short for any operator; end rather than dead-end
            mask[v.eos_id] = True
        return mask

    def advance(self, token_id: int) -> None:
        v = self.vocab
        token_id = int(token_id)
        self.length += 1
        self.last_was_sep = token_id == v.sep_id
        if token_id == v.eos_id:
            self.done = True
        if token_id == v.sep_id:
            self.seps += 1
        if not self.structural:
            return
        if self.pending is None:
            self.pending = v.arity_by_id.get(token_id, 0)
            if self.pending == 0:
                self.completed += 1
        elif self.pending > 0:
            self.pending -= 1
            if self.pending == 0:
                self.completed += 1
        elif token_id == v.sep_id:
            self.pending = None


def sequence_masks(vocab: ProgramVocabulary, target_ids, n_numbers: int, max_len: int = 32,
                   max_steps: int = 8, structural: bool = True):
    """Legal masks, boundary flags and step indices along a teacher-forced target."""
    tracker = LegalityTracker(vocab, n_numbers, max_len, max_steps, structural)
    masks, boundary, steps = [], [], []
    for tok in target_ids:
        masks.append(tracker.legal_mask())
        boundary.append(tracker.at_boundary)
        steps.append(tracker.step_index)
        tracker.advance(tok)
    return np.stack(masks), np.array(boundary, dtype=bool), np.array(steps, dtype=np.int64)
