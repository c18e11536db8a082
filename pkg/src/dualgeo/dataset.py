"""GeoQA-style problems: canonical schema, ingestion, diagram patching and batching.

Canonical split document (``<split>.json``)::

    {"split": "train", "records": [
        {"id": "...", "text": "... ∠ACD = 40° ...", "image": "images/x.png",
         "choices": [35, 70, 110, 140], "program": "Minus C_3 N_0 ; Half V_0",
         "knowledge": [[0], [0, 1]], "category": "Angle", "answer": 1}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import GeoError, ProgramValidationError, SequenceTooLong
from .geoprog import NumberMap, Program, ProgramVocabulary, default_vocabulary, execute, match_choice, segment
from .knowledge import KnowledgeBase
from .legality import sequence_masks
from .text import TextVocabulary, map_numbers

log = logging.getLogger(__name__)

CATEGORIES = ("Angle", "Length", "Other")


@dataclass
class GeometryProblem:
    id: str
    text: str
    tokens: list[str]
    numbers: NumberMap
    diagram: np.ndarray
    choices: tuple[float, ...]
    program: Program
    step_labels: list[list[int]]
    category: str
    answer: int

    @property
    def n_steps(self) -> int:
        return len(self.program.steps)


def validate_record(rec: dict, vocab: ProgramVocabulary, n_knowledge: int | None = None):
    """Check one raw record; returns (tokens, numbers, program, answer index)."""
    rid = rec.get("id", "?")
    for key in ("text", "choices", "program", "knowledge"):
        if key not in rec:
            raise ProgramValidationError(f"record {rid}: missing field {key!r}", [rid])
    tokens, values = map_numbers(rec["text"])
    if not tokens:
        raise ProgramValidationError(f"record {rid}: empty text", [rid])
    if len(values) > vocab.max_problem_numbers:
        raise ProgramValidationError(f"record {rid}: too many numbers ({len(values)})", [rid])
    numbers = NumberMap(tuple(values))
    choices = tuple(float(c) for c in rec["choices"])
    if len(choices) != 4:
        raise ProgramValidationError(f"record {rid}: expected 4 choices, got {len(choices)}", [rid])
    try:
        program = segment(rec["program"], vocab)
        result = execute(program, numbers, vocab)
        answer = match_choice(result.final, choices)
    except (GeoError, ValueError) as exc:
        raise ProgramValidationError(f"record {rid}: gold program invalid: {exc}", [rid]) from exc
    if rec.get("answer") is not None and int(rec["answer"]) != answer:
        raise ProgramValidationError(
            f"record {rid}: program matches choice {answer}, record says {rec['answer']}", [rid])
    labels = rec["knowledge"]
    if len(labels) != len(program.steps):
        raise ProgramValidationError(
            f"record {rid}: {len(labels)} knowledge label steps for {len(program.steps)} program steps", [rid])
    if n_knowledge is not None:
        for step in labels:
            if any(not 0 <= int(i) < n_knowledge for i in step):
                raise ProgramValidationError(f"record {rid}: knowledge id out of range", [rid])
    return tokens, numbers, program, answer


def load_diagram(path, channels: int = 1) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def ingest(path, vocab: ProgramVocabulary | None = None, kb: KnowledgeBase | None = None,
           labels: dict | None = None, channels: int = 1, skip_invalid: bool = False):
    """Read a split document into validated GeometryProblems.

    Invalid records raise ProgramValidationError listing every bad id; with
    ``skip_invalid`` they are logged and left out instead.
    """
    vocab = vocab or default_vocabulary()
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    records = doc["records"] if isinstance(doc, dict) else doc
    problems, bad = [], []
    for rec in records:
        rec = dict(rec)
        if labels is not None and rec.get("id") in labels:
            rec["knowledge"] = labels[rec["id"]]
        try:
            tokens, numbers, program, answer = validate_record(rec, vocab, len(kb) if kb else None)
        except ProgramValidationError as exc:
            bad.append((rec.get("id", "?"), str(exc)))
            log.warning("invalid record: %s", exc)
            continue
        diagram = load_diagram(path.parent / rec["image"], channels)
        problems.append(GeometryProblem(
            id=str(rec["id"]), text=rec["text"], tokens=tokens, numbers=numbers, diagram=diagram,
            choices=tuple(float(c) for c in rec["choices"]), program=program,
            step_labels=[sorted(int(i) for i in s) for s in rec["knowledge"]],
            category=rec.get("category", "Other"), answer=answer,
        ))
    if bad and not skip_invalid:
        msgs = "; ".join(m for _, m in bad)
        raise ProgramValidationError(f"{len(bad)} invalid record(s): {msgs}", [i for i, _ in bad])
    return problems


def corpus_digest(directory) -> str:
    """sha256 over every file (relative path + bytes) under ``directory``."""
    root = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# diagrams

def resize_diagram(D: np.ndarray, size: int) -> np.ndarray:
    if D.shape[0] == size and D.shape[1] == size:
        return D
    im = Image.fromarray(D)
    return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.uint8)


def patchify(D: np.ndarray, gamma: int, image_size: int | None = None) -> np.ndarray:
    """Split a diagram into gamma*gamma non-overlapping square patches, row-major.

    The image is first resized to ``image_size`` (default: its own height, which
    must then be divisible by gamma). Returns (gamma*gamma, p, p[, C]).
    """
    size = image_size or D.shape[0]
    if size % gamma:
        raise ValueError(f"image size {size} is not divisible by gamma={gamma}")
    D = resize_diagram(D, size)
    p = size // gamma
    rest = D.shape[2:]
    grid = D.reshape(gamma, p, gamma, p, *rest).swapaxes(1, 2)
    return grid.reshape(gamma * gamma, p, p, *rest)


def unpatchify(patches: np.ndarray) -> np.ndarray:
    m, p = patches.shape[0], patches.shape[1]
    gamma = int(round(m ** 0.5))
    if gamma * gamma != m:
        raise ValueError(f"{m} patches do not form a square grid")
    rest = patches.shape[3:]
    grid = patches.reshape(gamma, gamma, p, p, *rest).swapaxes(1, 2)
    return grid.reshape(gamma * p, gamma * p, *rest)


# ---------------------------------------------------------------------------
# batching

@dataclass
class ProblemTensors:
    text_ids: torch.Tensor      # (n,)
    patches: torch.Tensor       # (m, p*p*C)
    target: torch.Tensor        # (T,) program ids incl. SEP/EOS
    legal: torch.Tensor         # (T, V)
    boundary: torch.Tensor      # (T,)
    step_index: torch.Tensor    # (T,)
    labels: torch.Tensor        # (S, N)
    n_numbers: int


def prepare(problem: GeometryProblem, vocab: ProgramVocabulary, text_vocab: TextVocabulary,
            n_knowledge: int, image_size: int = 224, gamma: int = 14, max_text_len: int = 128,
            structural: bool = True, max_len: int = 32, max_steps: int = 8) -> ProblemTensors:
    if len(problem.tokens) > max_text_len:
        raise SequenceTooLong(f"problem {problem.id}: {len(problem.tokens)} tokens > {max_text_len}")
    patches = patchify(problem.diagram, gamma, image_size)
    target = vocab.encode(problem.program.tokens)
    legal, boundary, step_index = sequence_masks(
        vocab, target, len(problem.numbers), max_len, max_steps, structural)
    labels = np.zeros((len(problem.step_labels), n_knowledge), dtype=np.float32)
    for s, ids in enumerate(problem.step_labels):
        labels[s, ids] = 1.0
    return ProblemTensors(
        text_ids=torch.tensor(text_vocab.encode(problem.tokens), dtype=torch.long),
        patches=torch.from_numpy(patches.reshape(patches.shape[0], -1).astype(np.float32) / 255.0),
        target=torch.tensor(target, dtype=torch.long),
        legal=torch.from_numpy(legal),
        boundary=torch.from_numpy(boundary),
        step_index=torch.from_numpy(step_index),
        labels=torch.from_numpy(labels),
        n_numbers=len(problem.numbers),
    )


@dataclass
class Batch:
    text: torch.Tensor          # (B, n) padded with 0
    text_mask: torch.Tensor     # (B, n) True on real tokens
    patches: torch.Tensor       # (B, m, P)
    target: torch.Tensor        # (B, T) padded with PAD
    target_mask: torch.Tensor   # (B, T)
    legal: torch.Tensor         # (B, T, V)
    boundary: torch.Tensor      # (B, T)
    step_index: torch.Tensor    # (B, T)
    labels: torch.Tensor        # (B, S, N)
    step_mask: torch.Tensor     # (B, S)
    n_numbers: torch.Tensor     # (B,)

    def __len__(self):
        return self.text.shape[0]

    def to(self, dtype=None, device=None) -> "Batch":
        out = {}
        for f in fields(self):
            t = getattr(self, f.name)
            if t.is_floating_point() and dtype is not None:
                t = t.to(dtype)
            if device is not None:
                t = t.to(device)
            out[f.name] = t
        return Batch(**out)


def collate(items: Sequence[ProblemTensors], pad_id: int = 0) -> Batch:
    B = len(items)
    n = max(len(it.text_ids) for it in items)
    T = max(len(it.target) for it in items)
    S = max(it.labels.shape[0] for it in items)
    V = items[0].legal.shape[1]
    N = items[0].labels.shape[1]

    text = torch.zeros(B, n, dtype=torch.long)
    text_mask = torch.zeros(B, n, dtype=torch.bool)
    target = torch.full((B, T), pad_id, dtype=torch.long)
    target_mask = torch.zeros(B, T, dtype=torch.bool)
    legal = torch.zeros(B, T, V, dtype=torch.bool)
    legal[:, :, pad_id] = True
    boundary = torch.zeros(B, T, dtype=torch.bool)
    step_index = torch.zeros(B, T, dtype=torch.long)
    labels = torch.zeros(B, S, N)
    step_mask = torch.zeros(B, S, dtype=torch.bool)
    for b, it in enumerate(items):
        L, t, s = len(it.text_ids), len(it.target), it.labels.shape[0]
        text[b, :L] = it.text_ids
        text_mask[b, :L] = True
        target[b, :t] = it.target
        target_mask[b, :t] = True
        legal[b, :t] = it.legal
        boundary[b, :t] = it.boundary
        step_index[b, :t] = it.step_index
        labels[b, :s] = it.labels
        step_mask[b, :s] = True
    return Batch(
        text=text, text_mask=text_mask, patches=torch.stack([it.patches for it in items]),
        target=target, target_mask=target_mask, legal=legal, boundary=boundary,
        step_index=step_index, labels=labels, step_mask=step_mask,
        n_numbers=torch.tensor([it.n_numbers for it in items]),
    )


def unpad(batch: Batch) -> list[tuple[list[int], list[int]]]:
    """Recover each problem's (text ids, program ids) from a padded batch."""
    out = []
    for b in range(len(batch)):
        out.append((batch.text[b][batch.text_mask[b]].tolist(),
                    batch.target[b][batch.target_mask[b]].tolist()))
    return out


def batches(items: Sequence[ProblemTensors], batch_size: int, generator: torch.Generator | None = None):
    """Yield (batch_id, Batch); shuffled when a generator is given."""
    order = torch.randperm(len(items), generator=generator).tolist() if generator is not None \
        else list(range(len(items)))
    for k, start in enumerate(range(0, len(order), batch_size)):
        yield k, collate([items[i] for i in order[start:start + batch_size]])
