"""Accuracy metrics, ablation runs and threshold sweeps."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .config import ABLATION_SWITCHES, ModelConfig, TrainConfig
from .dataset import CATEGORIES, batches
from .reasoner import answer, beam_decode, forward_teacher_forced


@dataclass
class ProblemOutcome:
    id: str
    category: str
    gold: int
    predicted: int | None       # None is "No Result"
    rank: int | None
    program: str | None
    exact_match: bool           # top hypothesis equals the gold program
    steps: int = 0
    op_correct: int = 0
    abs_correct: int = 0

    @property
    def correct(self) -> bool:
        return self.predicted is not None and self.predicted == self.gold


@dataclass
class EvalReport:
    total: float
    per_category: dict
    category_counts: dict
    no_result: float
    op_accuracy: float | None
    absolute_accuracy: float | None
    exact_match: float
    outcomes: list = field(default_factory=list)

    @classmethod
    def from_outcomes(cls, outcomes, with_steps=True) -> "EvalReport":
        n = len(outcomes)
        counts = Counter(o.category for o in outcomes)
        right = Counter(o.category for o in outcomes if o.correct)
        per_cat = {c: right[c] / counts[c] for c in counts}
        steps = sum(o.steps for o in outcomes)
        return cls(
            total=sum(o.correct for o in outcomes) / n if n else 0.0,
            per_category=per_cat,
            category_counts=dict(counts),
            no_result=sum(o.predicted is None for o in outcomes) / n if n else 0.0,
            op_accuracy=sum(o.op_correct for o in outcomes) / steps if with_steps and steps else None,
            absolute_accuracy=sum(o.abs_correct for o in outcomes) / steps if with_steps and steps else None,
            exact_match=sum(o.exact_match for o in outcomes) / n if n else 0.0,
            outcomes=list(outcomes),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcomes"] = [dict(asdict(o), correct=o.correct) for o in self.outcomes]
        return d

    def to_table(self) -> str:
        def pct(x):
            return "-" if x is None else f"{100 * x:.1f}"
        cats = [c for c in CATEGORIES if c in self.per_category] + \
               sorted(c for c in self.per_category if c not in CATEGORIES)
        head = ["Total"] + cats + ["No Result", "OP", "Absolute", "Exact"]
        vals = [pct(self.total)] + [pct(self.per_category[c]) for c in cats] + \
               [pct(self.no_result), pct(self.op_accuracy), pct(self.absolute_accuracy), pct(self.exact_match)]
        width = [max(len(h), len(v)) for h, v in zip(head, vals)]
        fmt = "  ".join("{:>%d}" % w for w in width)
        return fmt.format(*head) + "\n" + fmt.format(*vals)


def step_accuracy(log_probs, batch, vocab):
    """Per-problem (steps, operator-correct, fully-correct) under gold prefixes.

    A step counts as fully correct when its operator and every argument are the
    argmax predictions; the SEP/EOS terminator is not part of the step.
    """
    pred = log_probs.argmax(-1)
    out = []
    for b in range(len(batch)):
        n = int(batch.target_mask[b].sum())
        tgt, pr = batch.target[b, :n].tolist(), pred[b, :n].tolist()
        steps = op_ok = abs_ok = 0
        t = 0
        while t < n:
            arity = vocab.arity_by_id.get(tgt[t])
            if arity is None:
                t += 1
                continue
            steps += 1
            op_ok += pr[t] == tgt[t]
            abs_ok += pr[t: t + 1 + arity] == tgt[t: t + 1 + arity]
            t += 1 + arity
        out.append((steps, op_ok, abs_ok))
    return out


@torch.no_grad()
def evaluate(model, problems, theta=None, beam_size=10, with_steps=True, items=None) -> EvalReport:
    from .training import prepare_all

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    items = items if items is not None else prepare_all(problems, model)
    cache = {}
    outcomes = []
    try:
        for prob, item in zip(problems, items):
            ranked = beam_decode(model, item, beam_size, theta, cache)
            res = answer(ranked, prob.numbers, prob.choices, model.vocab)
            top = ranked[0].tokens if ranked else ()
            outcomes.append(ProblemOutcome(
                id=prob.id, category=prob.category, gold=prob.answer, predicted=res.choice, rank=res.rank,
                program=res.program.render() if res.program is not None else None,
                exact_match=tuple(top) == tuple(prob.program.tokens)))
        if with_steps:
            k = 0
            for _, batch in batches(items, 32):
                batch = batch.to(dtype=dtype)
                out = forward_teacher_forced(model, batch, knowledge="predicted", theta=theta)
                for steps, op_ok, abs_ok in step_accuracy(out.log_probs, batch, model.vocab):
                    outcomes[k] = replace(outcomes[k], steps=steps, op_correct=op_ok, abs_correct=abs_ok)
                    k += 1
    finally:
        model.train(was_training)
    return EvalReport.from_outcomes(outcomes, with_steps)


def ablate(train_problems, eval_problems, model_cfg: ModelConfig, train_cfg: TrainConfig, kb, vocab,
           switches=ABLATION_SWITCHES, seeds=None, include_full=True, theta=None, beam_size=None,
           stop_when_factory=None) -> dict:
    """Train and evaluate the full model and one variant per switch under identical seeds.

    Returns {variant name: [EvalReport per seed]}.
    """
    from .training import build_text_vocabulary, fit

    seeds = [train_cfg.seed] if seeds is None else list(seeds)
    variants = ([model_cfg] if include_full else []) + [model_cfg.without(s) for s in switches]
    text_vocab = build_text_vocabulary(train_problems, kb)
    table = {}
    for cfg in variants:
        reports = []
        for seed in seeds:
            tcfg = replace(train_cfg, seed=seed)
            stop = stop_when_factory(cfg, seed) if stop_when_factory else None
            model, _ = fit(train_problems, cfg, tcfg, kb, vocab, text_vocab, stop_when=stop)
            reports.append(evaluate(model, eval_problems, theta, beam_size or tcfg.beam_size))
        table[cfg.variant_name] = reports
    return table


def threshold_sweep(model, problems, thetas, beam_size=10, out_path=None) -> list[tuple[float, float]]:
    """Total accuracy at each threshold, without retraining; optionally written as two-column text."""
    from .training import prepare_all

    items = prepare_all(problems, model)
    curve = []
    for theta in thetas:
        if not 0 < theta < 1:
            raise ValueError(f"threshold {theta} outside (0, 1)")
        report = evaluate(model, problems, theta, beam_size, with_steps=False, items=items)
        curve.append((float(theta), report.total))
    if out_path is not None:
        lines = ["# theta\ttotal_accuracy"] + [f"{t:g}\t{a:.6f}" for t, a in curve]
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return curve


def paired_comparison(a: EvalReport, b: EvalReport) -> dict:
    """Per-problem comparison of two reports over the same problems.

    Gives the discordant counts and an exact two-sided sign test on them.
    """
    right_b = {o.id: o.correct for o in b.outcomes}
    if set(right_b) != {o.id for o in a.outcomes}:
        raise ValueError("reports cover different problems")
    a_only = sum(o.correct and not right_b[o.id] for o in a.outcomes)
    b_only = sum(not o.correct and right_b[o.id] for o in a.outcomes)
    n = a_only + b_only
    tail = sum(math.comb(n, k) for k in range(min(a_only, b_only) + 1)) / 2 ** n if n else 1.0
    return {"n": len(a.outcomes), "a_only": a_only, "b_only": b_only,
            "diff": a.total - b.total, "p_value": min(1.0, 2 * tail)}


def write_report(report: EvalReport, path, run=None) -> None:
    doc = report.to_dict()
    if run is not None:
        doc["run"] = run
    Path(path).write_text(json.dumps(doc, indent=1, default=str) + "\n", encoding="utf-8")
