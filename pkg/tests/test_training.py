import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_micro
from dualgeo.config import TrainConfig
from dualgeo.dataset import collate
from dualgeo.errors import NonFiniteLoss
from dualgeo.training import (
    BCE_EPS, GROUPS, compute_loss, group_of, knowledge_bce, load_checkpoint, loss_generation, loss_knowledge,
    parameter_groups, prepare_all, save_checkpoint, train,
)


def test_generation_loss_uniform_closed_form():
    logp = torch.full((3, 5, 20), -math.log(20), dtype=torch.float64)
    tgt = torch.randint(0, 20, (3, 5))
    mask = torch.ones(3, 5, dtype=torch.bool)
    mask[1, 2:] = False
    assert math.isclose(float(loss_generation(logp, tgt, mask)), math.log(20), rel_tol=1e-12)


def test_knowledge_loss_half_closed_form():
    scores = torch.full((1, 1, 2), 0.5, dtype=torch.float64)
    labels = torch.tensor([[[1.0, 0.0]]], dtype=torch.float64)
    assert math.isclose(float(loss_knowledge(scores, labels)), 2 * math.log(2), rel_tol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.data())
def test_bce_matches_scalar_oracle(ps, data):
    ys = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(ps), max_size=len(ps)))
    got = knowledge_bce(torch.tensor(ps, dtype=torch.float64), torch.tensor(ys, dtype=torch.float64))
    for g, p, y in zip(got.tolist(), ps, ys):
        q = min(max(p, BCE_EPS), 1 - BCE_EPS)
        want = -(y * math.log(q) + (1 - y) * math.log(1 - q))
        assert math.isclose(g, want, rel_tol=1e-9, abs_tol=1e-12)
        assert g <= -math.log(BCE_EPS) + 1e-9


def test_generation_loss_scalar_oracle():
    g = torch.Generator().manual_seed(0)
    logp = torch.log_softmax(torch.randn(2, 4, 6, generator=g, dtype=torch.float64), -1)
    tgt = torch.randint(0, 6, (2, 4), generator=g)
    mask = torch.tensor([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=torch.bool)
    want = 0.0
    for b in range(2):
        n = int(mask[b].sum())
        want += -sum(float(logp[b, t, tgt[b, t]]) for t in range(n)) / n
    assert math.isclose(float(loss_generation(logp, tgt, mask)), want / 2, rel_tol=1e-9)


def test_knowledge_loss_ignores_padded_steps():
    scores = torch.rand(2, 3, 4, dtype=torch.float64)
    labels = (torch.rand(2, 3, 4) > 0.5).double()
    mask = torch.tensor([[1, 1, 1], [1, 0, 0]], dtype=torch.bool)
    total, per_step = loss_knowledge(scores, labels, mask, per_step=True)
    assert torch.all(per_step[1, 1:] == 0)
    want = (knowledge_bce(scores[0], labels[0]).sum() + knowledge_bce(scores[1, :1], labels[1, :1]).sum()) / 2
    assert math.isclose(float(total), float(want), rel_tol=1e-12)


def test_parameter_groups_partition(micro):
    groups = parameter_groups(micro, TrainConfig())
    lrs = {g["name"]: g["lr"] for g in groups}
    assert lrs == {"text_context": 2e-5, "fusion_ggm": 1e-5, "other": 1e-3}
    ids = [id(p) for g in groups for p in g["params"]]
    assert len(ids) == len(set(ids)) == sum(1 for _ in micro.parameters())
    for name, _ in micro.named_parameters():
        assert group_of(name) in GROUPS
    assert group_of("inference.ggm.blocks.0.cross.in_proj_weight") == "fusion_ggm"
    assert group_of("text_encoder.lstm.weight_hh_l0") == "other"


def test_frozen_and_ablated_parameters_leave_the_optimizer(vocab, text_vocab, kb):
    model = make_micro(vocab, text_vocab, kb, use_ksm=False, freeze_diagram_encoder=True)
    in_opt = {id(p) for g in parameter_groups(model, TrainConfig()) for p in g["params"]}
    names = [n for n, p in model.named_parameters() if id(p) in in_opt]
    assert not any(n.startswith("knowledge.ksm") or n.endswith("null_knowledge") for n in names)
    assert not any(n.startswith("diagram_encoder") for n in names)


def test_without_ksm_has_zero_knowledge_loss(vocab, text_vocab, kb, problems):
    model = make_micro(vocab, text_vocab, kb, use_ksm=False)
    batch = collate(prepare_all(problems[:4], model)).to(torch.float64)
    out = compute_loss(model, batch)
    assert float(out.L_c) == 0.0 and torch.equal(out.L, out.L_g)


def test_loss_gradient_matches_finite_differences(micro, micro_items):
    micro.eval()
    batch = collate(micro_items[:3]).to(torch.float64)
    params = [p for p in micro.parameters() if p.requires_grad]
    loss = compute_loss(micro, batch).L
    # the null knowledge vector only enters for empty selections, which gold labels never have
    grads = [torch.zeros_like(p) if g is None else g
             for p, g in zip(params, torch.autograd.grad(loss, params, allow_unused=True))]
    g = torch.Generator().manual_seed(0)
    h = 1e-5
    with torch.no_grad():
        for p, gr in list(zip(params, grads))[::7]:
            v = torch.randn(p.shape, generator=g, dtype=p.dtype)
            p.add_(h * v)
            up = float(compute_loss(micro, batch).L)
            p.sub_(2 * h * v)
            down = float(compute_loss(micro, batch).L)
            p.add_(h * v)
            fd = (up - down) / (2 * h)
            an = float((gr * v).sum())
            assert abs(fd - an) <= 1e-4 * max(abs(an), abs(fd), 1e-3)


def _small_cfg(**kw):
    return TrainConfig(**{"epochs": 2, "batch_size": 8, "double": True, "seed": 3, **kw})


def test_one_epoch_reduces_loss(vocab, text_vocab, kb, problems):
    model = make_micro(vocab, text_vocab, kb)
    batch = collate(prepare_all(problems, model)).to(torch.float64)
    model.eval()
    with torch.no_grad():
        before = float(compute_loss(model, batch).L)
    train(model, problems, _small_cfg(epochs=3, lr_other=3e-3))
    model.eval()
    with torch.no_grad():
        assert float(compute_loss(model, batch).L) < before


def test_training_is_deterministic(vocab, text_vocab, kb, problems, tmp_path):
    runs = []
    for k in range(2):
        model = make_micro(vocab, text_vocab, kb)
        train(model, problems[:16], _small_cfg(), metrics_path=tmp_path / f"m{k}.jsonl")
        runs.append((model.state_dict(), (tmp_path / f"m{k}.jsonl").read_text()))
    strip = lambda s: [{k: v for k, v in json.loads(l).items() if k != "seconds"} for l in s.splitlines()]
    assert strip(runs[0][1]) == strip(runs[1][1])
    assert all(torch.equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_resume_reproduces_uninterrupted_run(vocab, text_vocab, kb, problems, tmp_path):
    straight = make_micro(vocab, text_vocab, kb)
    train(straight, problems[:16], _small_cfg(epochs=4))
    resumed = make_micro(vocab, text_vocab, kb)
    ck = tmp_path / "last.pt"
    train(resumed, problems[:16], _small_cfg(epochs=2), checkpoint_path=ck)
    fresh = make_micro(vocab, text_vocab, kb, seed=99)
    res = train(fresh, problems[:16], _small_cfg(epochs=4), checkpoint_path=ck, resume=True)
    assert [h["epoch"] for h in res.history] == [1, 2, 3, 4]
    sd = straight.state_dict()
    assert all(torch.allclose(sd[k], v, atol=1e-12) for k, v in fresh.state_dict().items())


def test_checkpoint_round_trip(micro, micro_items, tmp_path):
    micro.eval()
    save_checkpoint(tmp_path / "m.pt", micro, TrainConfig(seed=5))
    loaded, ckpt = load_checkpoint(tmp_path / "m.pt")
    loaded.eval()
    assert ckpt["seed"] == 5 and loaded.cfg == micro.cfg
    batch = collate(micro_items[:3]).to(torch.float64)
    assert torch.equal(compute_loss(micro, batch).L, compute_loss(loaded, batch).L)
    assert not (tmp_path / "m.pt.tmp").exists()


def test_non_finite_loss_names_the_batch(vocab, text_vocab, kb, problems):
    model = make_micro(vocab, text_vocab, kb)
    with torch.no_grad():
        model.inference.out.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as info:
        train(model, problems[:8], _small_cfg(epochs=1))
    assert info.value.epoch == 1 and info.value.batch_id == 0
