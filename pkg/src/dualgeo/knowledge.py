"""Geometry knowledge base: ordered concept/explanation pairs plus per-step labels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DuplicateConcept, EmptyExplanation, EmptyKnowledgeBase, LabelMismatch

# token inserted between concatenated explanations
KNOWLEDGE_SEPARATOR = "[KSEP]"


@dataclass(frozen=True)
class KnowledgeEntry:
    id: int
    concept: str
    explanation: str


def _reject_duplicates(pairs):
    seen = set()
    for key, _ in pairs:
        if key in seen:
            raise DuplicateConcept(f"concept {key!r} appears more than once")
        seen.add(key)
    return pairs


class KnowledgeBase:
    """Immutable, densely indexed set of knowledge-explanation pairs."""

    def __init__(self, pairs: Iterable[tuple[str, str]]):
        entries = []
        seen = set()
        for i, (concept, explanation) in enumerate(pairs):
            if concept in seen:
                raise DuplicateConcept(f"concept {concept!r} appears more than once")
            if not explanation or not explanation.strip():
                raise EmptyExplanation(f"concept {concept!r} has no explanation")
            seen.add(concept)
            entries.append(KnowledgeEntry(i, concept, explanation))
        if not entries:
            raise EmptyKnowledgeBase("knowledge base has no entries")
        self._entries = tuple(entries)
        self._by_concept = {e.concept: e.id for e in entries}

    def __len__(self):
        return len(self._entries)

    def __getitem__(self, i: int) -> KnowledgeEntry:
        return self._entries[i]

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other):
        return isinstance(other, KnowledgeBase) and self._entries == other._entries

    def id_of(self, concept: str) -> int:
        return self._by_concept[concept]

    @property
    def concepts(self) -> list[str]:
        return [e.concept for e in self._entries]

    def to_dict(self) -> dict[str, str]:
        return {e.concept: e.explanation for e in self._entries}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "KnowledgeBase":
        return cls(d.items())

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        text = Path(path).read_text(encoding="utf-8")
        if not text.strip():
            raise EmptyKnowledgeBase(f"{path} is empty")
        pairs = json.loads(text, object_pairs_hook=_reject_duplicates)
        return cls(pairs)

    def save(self, path):
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )

    def concat_explanations(self, selected: Iterable[int]) -> str:
        """Join the selected explanations in ascending id order.

        Order-invariant in ``selected``; the empty selection gives ``""``.
        """
        ids = sorted(set(int(i) for i in selected))
        for i in ids:
            if not 0 <= i < len(self):
                raise IndexError(f"knowledge id {i} out of range [0, {len(self)})")
        return f" {KNOWLEDGE_SEPARATOR} ".join(self._entries[i].explanation for i in ids)


def sample_knowledge_base() -> KnowledgeBase:
    ref = resources.files("dualgeo") / "resources" / "knowledge_base.json"
    with resources.as_file(ref) as p:
        return KnowledgeBase.load(p)


def labels_to_vectors(step_ids: Sequence[Sequence[int]], n: int) -> list[list[int]]:
    out = []
    for ids in step_ids:
        row = [0] * n
        for i in ids:
            if not 0 <= i < n:
                raise LabelMismatch(f"knowledge id {i} out of range [0, {n})")
            row[i] = 1
        out.append(row)
    return out


def load_step_labels(path) -> dict[str, list[list[int]]]:
    """Label file: ``{problem_id: [[ids of step 0], [ids of step 1], ...]}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(k): [sorted(int(i) for i in step) for step in v] for k, v in data.items()}


def save_step_labels(labels: dict[str, list[list[int]]], path):
    Path(path).write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n", encoding="utf-8")
