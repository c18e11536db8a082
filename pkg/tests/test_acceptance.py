"""End-to-end acceptance checks, one test per criterion.

Each test records (passed, detail) in RESULTS; conftest prints them as a block
at the end of the run.
"""

import json
import math
import random
import time

import pytest
import torch

from conftest import make_micro
from dualgeo.config import ModelConfig, TrainConfig
from dualgeo.dataset import collate, corpus_digest, prepare
from dualgeo.errors import ExecutionError
from dualgeo.evaluation import ablate, evaluate
from dualgeo.geoprog import NumberMap, Program, execute, match_choice
from dualgeo.layers import dot_attention
from dualgeo.reasoner import SolverDecoder, beam_decode, beam_search, greedy_decode, greedy_search
from dualgeo.synth import synthesize
from dualgeo.training import GROUPS, compute_loss, fit, group_of, prepare_all
from oracles import OracleFailure, close, enumerate_sequences, random_program, tree_eval

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    assert ok, detail


# -- 1 ------------------------------------------------------------------------

def test_c01_executor_matches_tree_oracle():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    agree = failures = 0
    for _ in range(1000):
        numbers = [round(rng.uniform(0.5, 200), 3) for _ in range(rng.randint(1, 6))]
        tokens = random_program(rng, len(numbers), max_steps=5)
        try:
            want = tree_eval(tokens, numbers)
        except OracleFailure:
            try:
                execute(Program.from_tokens(tokens), numbers)
            except ExecutionError:
                agree += 1
                failures += 1
            continue
        got = execute(Program.from_tokens(tokens), numbers).variables
        agree += len(got) == len(want) and all(close(a, b) for a, b in zip(got, want))
    dt = time.perf_counter() - t0
    record(1, agree == 1000 and dt < 10,
           f"{agree}/1000 agree ({failures} rejected by both), {dt:.2f}s")


# -- 2 ------------------------------------------------------------------------

def test_c02_figure_one_fixture(vocab):
    program = Program.from_tokens(["Minus", "C_3", "N_0", "[SEP]", "Half", "V_0", "[EOS]"], vocab)
    res = execute(program, NumberMap((40.0,)), vocab)
    choice = match_choice(res.final, (35, 70, 110, 140))
    record(2, res.variables == (140.0, 70.0) and res.final == 70.0 and choice == 1,
           f"V={res.variables}, final={res.final}, choice={choice}")


# -- 3 ------------------------------------------------------------------------

def test_c03_gradients_match_finite_differences(vocab, text_vocab, kb, problems):
    t0 = time.perf_counter()
    model = make_micro(vocab, text_vocab, kb)
    model.eval()
    prob = next(p for p in problems if p.n_steps >= 2)
    batch = collate(prepare_all([prob], model)).to(torch.float64)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    loss = compute_loss(model, batch).L
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    gen = torch.Generator().manual_seed(0)
    # fourth-order central stencil: tiny directional derivatives (~1e-6) drown in
    # roundoff with a plain two-point difference at small h
    h, floor = 1e-3, 1e-6
    worst, worst_name = 0.0, None
    groups = set()

    def shifted(p, v, t):
        p.add_(t * v)
        out = float(compute_loss(model, batch).L)
        p.sub_(t * v)
        return out

    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            g = torch.zeros_like(p) if g is None else g
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            fd = (8 * (shifted(p, v, h) - shifted(p, v, -h)) - (shifted(p, v, 2 * h) - shifted(p, v, -2 * h))) / (12 * h)
            an = float((g * v).sum())
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            if err > worst:
                worst, worst_name = err, name
            groups.add(group_of(name))
    dt = time.perf_counter() - t0
    record(3, worst <= 1e-4 and dt < 120 and groups == set(GROUPS),
           f"{len(named)} tensors in optimizer groups {sorted(groups)}; worst rel err {worst:.2e} ({worst_name}), {dt:.1f}s")


# -- 4 ------------------------------------------------------------------------

def test_c04_attention_distributions_normalized(vocab, text_vocab, kb):
    from dualgeo.legality import LegalityTracker

    models = {flag: make_micro(vocab, text_vocab, kb, legality_mask=flag).eval() for flag in (True, False)}
    rng = random.Random(7)
    worst, cases = 0.0, 0
    with torch.no_grad():
        for case in range(500):
            m = models[case % 2 == 0]
            d = m.cfg.d
            g = torch.Generator().manual_seed(case)
            scale = 10 ** rng.uniform(-3, 3)
            B, n, mm, k = rng.randint(1, 4), rng.randint(1, 12), m.cfg.num_patches, rng.randint(1, 5)

            def rnd(*shape):
                return torch.randn(*shape, generator=g, dtype=torch.float64) * scale

            text_mask = torch.ones(B, n, dtype=torch.bool)
            for b in range(B):
                text_mask[b, rng.randint(1, n):] = False
            H_P = rnd(B, n, d)
            H_D = rnd(B, mm, d)
            F_D, H_M, mask_M, h_M, reduce_w = m.fusion(H_P, text_mask, H_D)
            q = rnd(B, d)
            _, vis_w = m.knowledge.vsm_attend(q, H_D)
            K_mask = torch.ones(B, k, dtype=torch.bool)
            for b in range(B):
                K_mask[b, rng.randint(1, k):] = False
            _, _, know_w = m.knowledge.guide(rnd(B, k, d), K_mask, rnd(B, d), rnd(B, d), rnd(B, d), rnd(B, d))
            _, ctx_w = dot_attention(q, H_M, mask_M)
            trackers = []
            for b in range(B):
                tr = LegalityTracker(vocab, rng.randint(0, 4), structural=m.cfg.legality_mask)
                for _ in range(rng.randint(0, 6)):
                    legal = [i for i, ok in enumerate(tr.legal_mask()) if ok]
                    if tr.done:
                        break
                    tr.advance(rng.choice(legal))
                trackers.append(tr)
            legal = torch.tensor([t.legal_mask().tolist() for t in trackers])
            _, _, logp, tpm_w = m.inference.tpm_step(H_M, mask_M, rnd(B, m.knowledge.guide_dim), rnd(B, d),
                                                     rnd(B, d), rnd(B, d), legal)
            for w in (reduce_w, vis_w, know_w, ctx_w, tpm_w, logp.exp()):
                worst = max(worst, float((w.sum(-1) - 1).abs().max()))
                assert (w >= 0).all()
            cases += 1
    record(4, cases == 500 and worst <= 1e-6,
           f"{cases} fuzzed cases, 6 distributions each, max |sum-1| = {worst:.1e}")


# -- 5 ------------------------------------------------------------------------

def test_c05_guides_constant_within_steps(vocab, text_vocab, kb, problems):
    counts, broken = {}, 0
    for flag in (True, False):
        model = make_micro(vocab, text_vocab, kb, legality_mask=flag)
        items = prepare_all(problems[:10], model)
        n = 0
        for item in items:
            for hyp in beam_decode(model, item, beam_size=10):
                st = hyp.state
                starts = [r.start for r in st.steps] + [len(st.tokens)]
                for j in range(len(st.steps)):
                    seg = st.guides_used[starts[j]:starts[j + 1]]
                    ref = seg[0]
                    broken += sum(not torch.equal(x, ref) for x in seg)
                    broken += not torch.equal(ref, st.steps[j].guide)
                n += 1
        counts[flag] = n
    ok = broken == 0 and all(n >= 100 for n in counts.values())
    record(5, ok, f"traces: {counts[True]} with legality mask, {counts[False]} without; {broken} violations")


# -- 6 ------------------------------------------------------------------------

def test_c06_loss_closed_forms(vocab, text_vocab, kb, problems):
    model = make_micro(vocab, text_vocab, kb, legality_mask=False)
    model.eval()
    with torch.no_grad():
        model.inference.out.weight.zero_()
        model.inference.out.bias.zero_()
        model.knowledge.ksm.weight.zero_()
        model.knowledge.ksm.bias.zero_()
        sub = problems[:6]
        batch = collate(prepare_all(sub, model)).to(torch.float64)
        batch.legal = torch.ones_like(batch.legal)      # every token of the vocabulary allowed
        losses = compute_loss(model, batch)
    want_g = math.log(len(vocab))
    want_c = sum(p.n_steps for p in sub) / len(sub) * len(kb) * math.log(2)
    eg, ec = abs(float(losses.L_g) - want_g), abs(float(losses.L_c) - want_c)
    record(6, eg <= 1e-6 and ec <= 1e-6,
           f"L_g={float(losses.L_g):.9f} vs ln{len(vocab)}; L_c={float(losses.L_c):.9f} vs mean(S)*N*ln2 "
           f"(errs {eg:.1e}, {ec:.1e})")


# -- 7 and 8 ---------------------------------------------------------------------

TOY = ModelConfig(image_size=112, gamma=7)       # d=64, theta=0.5 are the defaults
TOY_TRAIN = TrainConfig(epochs=300)              # B=10 beam, batch 32


@pytest.fixture(scope="module")
def corpus(kb):
    return synthesize(0, 64, kb=kb), synthesize(0, 64, skip=64, kb=kb)


@pytest.fixture(scope="module")
def overfit(corpus, kb, vocab):
    train_set, _ = corpus
    t0 = time.perf_counter()
    model, result = fit(train_set, TOY, TOY_TRAIN, kb, vocab)
    train_report = evaluate(model, train_set, beam_size=10)
    return model, result, train_report, time.perf_counter() - t0


@pytest.mark.slow
def test_c07_overfit_training_split(overfit):
    model, result, rep, dt = overfit
    ok = rep.exact_match >= 0.95 and rep.total >= 0.90 and dt < 15 * 60
    record(7, ok, f"{result.epochs_run} epochs, exact {100 * rep.exact_match:.1f}%, total {100 * rep.total:.1f}%, "
                  f"{dt / 60:.1f} min")


@pytest.mark.slow
def test_c08_generalization_and_ablations(overfit, corpus, kb, vocab):
    model, _, _, _ = overfit
    train_set, eval_set = corpus
    rep = evaluate(model, eval_set, beam_size=10)
    full = {0: rep.total}
    more = ablate(train_set, eval_set, TOY, TOY_TRAIN, kb, vocab, switches=(), seeds=[1, 2])
    full.update({s: r.total for s, r in zip([1, 2], more["full"])})
    variants = ablate(train_set, eval_set, TOY, TOY_TRAIN, kb, vocab, seeds=[0, 1, 2], include_full=False)
    mean_full = sum(full.values()) / 3
    wins, parts = 0, []
    for name, reps in variants.items():
        mean = sum(r.total for r in reps) / len(reps)
        wins += mean_full >= mean
        parts.append(f"{name} {100 * mean:.1f}")
    ok = rep.total >= 0.60 and rep.no_result <= 0.25 and wins >= 3
    record(8, ok, f"seed-0 eval total {100 * rep.total:.1f}%, no result {100 * rep.no_result:.1f}%; "
                  f"mean total over seeds 0-2: full {100 * mean_full:.1f} vs " + ", ".join(parts) +
                  f"; full >= ablation in {wins}/4")


# -- 9 ------------------------------------------------------------------------

def test_c09_beam_matches_exhaustive_search(vocab, text_vocab, kb, problems):
    details, ok = [], True
    prob = next(p for p in problems if len(p.numbers) == 1)
    for flag, max_len in ((True, 4), (False, 3)):
        model = make_micro(vocab, text_vocab, kb, legality_mask=flag, max_decode_len=max_len).eval()
        item = prepare(prob, vocab, text_vocab, len(kb), model.cfg.image_size, model.cfg.gamma,
                       structural=flag, max_len=max_len)
        with torch.no_grad():
            every = enumerate_sequences(SolverDecoder(model, item), max_len)
            beam = beam_search(SolverDecoder(model, item), len(every), max_len)
            g = greedy_search(SolverDecoder(model, item), max_len)
            (b1,) = beam_search(SolverDecoder(model, item), 1, max_len)
        same_rank = [h.tokens for h in beam] == [s for s, _ in every]
        score_err = max(abs(h.score - sc) for h, (_, sc) in zip(beam, every))
        greedy_same = b1.tokens == g.tokens and b1.score == g.score
        ok &= same_rank and score_err <= 1e-12 and greedy_same
        details.append(f"mask={'on' if flag else 'off'}: {len(every)} paths, ranking equal={same_rank}, "
                       f"max score diff {score_err:.0e}, B=1 is greedy={greedy_same}")
    model = make_micro(vocab, text_vocab, kb)
    for item in prepare_all(problems[:5], model):
        (b1,) = beam_decode(model, item, beam_size=1)
        g = greedy_decode(model, item)
        ok &= b1.tokens == g.tokens and b1.score == g.score
    record(9, ok, "; ".join(details))


# -- 10 -----------------------------------------------------------------------

def test_c10_runs_are_deterministic(tmp_path):
    from dualgeo.cli import main

    runs = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        assert main(["synth", "--count", "64", "--seed", "5", "--out", str(root / "train")]) == 0
        assert main(["synth", "--count", "16", "--seed", "5", "--skip", "64", "--split", "eval",
                     "--out", str(root / "eval")]) == 0
        digests = (corpus_digest(root / "train"), corpus_digest(root / "eval"))
        sets = ["train.epochs=1", f"data.train={root / 'train' / 'train.json'}"]
        argv = ["train", "--out", str(root / "model"), "--seed", "3"]
        for s in sets:
            argv += ["--set", s]
        assert main(argv) == 0
        first = json.loads((root / "model" / "metrics.jsonl").read_text().splitlines()[0])
        losses = {k: first[k] for k in ("L_g", "L_c", "L")}
        assert main(["eval", "--checkpoint", str(root / "model" / "model.pt"), "--data",
                     str(root / "eval" / "eval.json"), "--out", str(root / "report")]) == 0
        report = json.loads((root / "report" / "report.json").read_text())
        assert report.pop("run")["seed"] == 3      # provenance names this run's own paths
        runs.append((digests, losses, report))
    a, b = runs
    ok = a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    record(10, ok, f"digests equal={a[0] == b[0]}, epoch-1 losses equal={a[1] == b[1]} ({a[1]['L']:.6f}), "
                   f"eval reports equal={a[2] == b[2]}")
