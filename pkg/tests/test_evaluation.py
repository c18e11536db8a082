import math

import pytest
import torch

from conftest import MICRO, make_micro
from dualgeo.config import ModelConfig, TrainConfig
from dualgeo.dataset import collate
from dualgeo.evaluation import (
    EvalReport, ProblemOutcome, ablate, evaluate, paired_comparison, step_accuracy, threshold_sweep,
)
from dualgeo.reasoner import beam_decode


def _o(i, cat, gold, pred, **kw):
    return ProblemOutcome(id=str(i), category=cat, gold=gold, predicted=pred, rank=0 if pred is not None else None,
                          program=None, exact_match=kw.pop("exact", False), **kw)


def test_report_counting_example():
    outs = [_o(0, "Angle", 1, 1, exact=True), _o(1, "Angle", 2, 0), _o(2, "Length", 3, 3),
            _o(3, "Length", 0, None), _o(4, "Other", 2, 2)]
    r = EvalReport.from_outcomes(outs, with_steps=False)
    assert r.total == 3 / 5 and r.no_result == 1 / 5 and r.exact_match == 1 / 5
    assert r.per_category == {"Angle": 0.5, "Length": 0.5, "Other": 1.0}
    assert r.category_counts == {"Angle": 2, "Length": 2, "Other": 1}
    assert r.op_accuracy is None
    table = r.to_table().splitlines()
    assert table[0].split() == ["Total", "Angle", "Length", "Other", "No", "Result", "OP", "Absolute", "Exact"]
    assert table[1].split()[:2] == ["60.0", "50.0"]


def test_op_versus_absolute_example(micro, micro_items, vocab, problems):
    idx = next(i for i, p in enumerate(problems) if p.n_steps == 2 and len(p.program.steps[0].args) == 2)
    batch = collate([micro_items[idx]])
    tgt = batch.target[0].clone()
    pred = tgt.clone()
    pred[2] = vocab.token_to_id["C_5"] if tgt[2] != vocab.token_to_id["C_5"] else vocab.token_to_id["C_4"]
    logp = torch.full((1, len(tgt), len(vocab)), -10.0)
    logp[0, torch.arange(len(tgt)), pred] = 0.0
    # step 0: operator right, second argument wrong; step 1: all right
    assert step_accuracy(logp, batch, vocab) == [(2, 2, 1)]
    pred[0] = vocab.token_to_id["Sqrt"] if tgt[0] != vocab.token_to_id["Sqrt"] else vocab.token_to_id["Half"]
    logp[0] = -10.0
    logp[0, torch.arange(len(tgt)), pred] = 0.0
    assert step_accuracy(logp, batch, vocab) == [(2, 1, 1)]


def test_evaluate_recount(micro, problems):
    r = evaluate(micro, problems[:8], beam_size=3)
    assert len(r.outcomes) == 8
    assert r.total == sum(o.correct for o in r.outcomes) / 8
    assert r.no_result == sum(o.predicted is None for o in r.outcomes) / 8
    assert r.op_accuracy >= r.absolute_accuracy
    assert sum(o.steps for o in r.outcomes) == sum(p.n_steps for p in problems[:8])
    for cat, acc in r.per_category.items():
        sub = [o for o in r.outcomes if o.category == cat]
        assert acc == sum(o.correct for o in sub) / len(sub)
    for o, p in zip(r.outcomes, problems):
        assert o.gold == p.answer
        if o.predicted is None:
            assert o.rank is None


def test_sweep_matches_standalone_runs(micro, problems, tmp_path):
    thetas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    curve = threshold_sweep(micro, problems[:4], thetas, beam_size=2, out_path=tmp_path / "s.tsv")
    lines = (tmp_path / "s.tsv").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 10
    for (t, acc), line in zip(curve, lines[1:]):
        col_t, col_a = line.split("\t")
        assert float(col_t) == t and math.isclose(float(col_a), acc, abs_tol=1e-6)
        assert evaluate(micro, problems[:4], theta=t, beam_size=2, with_steps=False).total == acc
    with pytest.raises(ValueError):
        threshold_sweep(micro, problems[:1], [1.0])


def test_high_threshold_falls_back_to_single_entry(micro, micro_items):
    for item in micro_items[:3]:
        for hyp in beam_decode(micro, item, beam_size=3, theta=0.999):
            for step in hyp.state.steps:
                if float(step.scores.max()) <= 0.999:
                    assert step.selected == (int(step.scores.argmax()),)


def test_paired_comparison():
    a = EvalReport.from_outcomes([_o(i, "Angle", 0, 0 if i < 6 else 1) for i in range(10)], False)
    b = EvalReport.from_outcomes([_o(i, "Angle", 0, 0 if i < 2 else 1) for i in range(10)], False)
    res = paired_comparison(a, b)
    assert (res["a_only"], res["b_only"]) == (4, 0)
    assert math.isclose(res["diff"], 0.4)
    assert math.isclose(res["p_value"], 2 / 16)
    with pytest.raises(ValueError):
        paired_comparison(a, EvalReport.from_outcomes([_o(99, "Angle", 0, 0)], False))


def test_ablated_variants_drop_their_parameters(vocab, text_vocab, kb):
    full = make_micro(vocab, text_vocab, kb)
    n_full = sum(p.numel() for p in full.parameters())
    names = {n for n, _ in full.named_parameters()}
    for switch, prefix in [("ksm", "knowledge.ksm"), ("ggm", "inference.ggm"), ("kim", "knowledge.zeta")]:
        m = make_micro(vocab, text_vocab, kb, **{f"use_{switch}": False})
        mnames = {n for n, _ in m.named_parameters()}
        assert sum(p.numel() for p in m.parameters()) < n_full
        assert any(n.startswith(prefix) for n in names) and not any(n.startswith(prefix) for n in mnames)
    no_vsm = make_micro(vocab, text_vocab, kb, use_vsm=False)
    assert no_vsm.knowledge.zeta.input_size < full.knowledge.zeta.input_size


def test_ablate_runs_every_variant(vocab, kb, problems):
    cfg = ModelConfig(**MICRO)
    table = ablate(problems[:6], problems[6:9], cfg, TrainConfig(epochs=1, batch_size=6), kb, vocab,
                   switches=("vsm", "ggm"), seeds=[0, 1], beam_size=2)
    assert list(table) == ["full", "w/o VSM", "w/o GGM"]
    assert all(len(v) == 2 and all(len(r.outcomes) == 3 for r in v) for v in table.values())
