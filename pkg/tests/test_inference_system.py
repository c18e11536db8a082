import numpy as np
import pytest
import torch

from dualgeo.inference_system import InferenceSystem
from dualgeo.legality import LegalityTracker, sequence_masks

D, V = 8, 47


@pytest.fixture
def inf():
    torch.manual_seed(0)
    return InferenceSystem(D, V, guide_dim=D, pad_id=0).double()


def _state(B=2, L=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    H_M = torch.randn(B, L, D, generator=g, dtype=torch.float64)
    mask = torch.ones(B, L, dtype=torch.bool)
    mask[-1, -2:] = False
    vecs = [torch.randn(B, D, generator=g, dtype=torch.float64) for _ in range(4)]
    return H_M, mask, vecs


def test_tpm_distribution_and_mask(inf, vocab):
    H_M, mask, (guide, e, s, c) = _state()
    legal_np = LegalityTracker(vocab, 2).legal_mask()
    legal = torch.from_numpy(np.stack([legal_np, legal_np]))
    s2, c2, logp, ctx_w = inf.tpm_step(H_M, mask, guide, e, s, c, legal)
    P = logp.exp()
    assert torch.allclose(P.sum(-1), torch.ones(2, dtype=torch.float64), atol=1e-12)
    assert (P[legal] > 0).all() and (P[~legal] == 0).all()
    # operator slot: only operators are legal
    assert set(np.flatnonzero(legal_np)) == set(vocab.operator_ids)
    assert torch.allclose(ctx_w.sum(-1), torch.ones(2, dtype=torch.float64)) and torch.all(ctx_w[1, -2:] == 0)
    assert s2.shape == (2, D)


def test_tpm_gradient_wrt_guide(inf):
    H_M, mask, (guide, e, s, c) = _state(B=1)
    guide = guide.clone().requires_grad_(True)

    def f(r):
        return inf.tpm_step(H_M, mask, r, e, s, c)[2][:, 5]

    assert torch.autograd.gradcheck(f, (guide,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_ggm_first_goal_uses_only_known_conditions(inf):
    H_M, mask, (s0, *_) = _state()
    g = inf.ggm_next_goal(H_M, mask, s0[:, None])
    assert g.shape == (2, D)
    # same conditions give the same goal; changing the problem changes it
    assert torch.equal(g, inf.ggm_next_goal(H_M, mask, s0[:, None]))
    assert not torch.allclose(g, inf.ggm_next_goal(H_M + 1, mask, s0[:, None]))


def test_ggm_is_causal(inf):
    H_M, mask, _ = _state()
    hist = torch.randn(2, 7, D, dtype=torch.float64)
    full = inf.ggm(hist, H_M, mask)
    for k in range(7):
        prefix = inf.ggm(hist[:, : k + 1], H_M, mask)
        assert torch.allclose(prefix[:, k], full[:, k], atol=1e-12)
        assert torch.allclose(inf.ggm_next_goal(H_M, mask, hist[:, : k + 1]), full[:, k], atol=1e-12)


def test_embedding_contract(inf):
    W = inf.token_embed.weight
    assert torch.all(inf.embed_token(torch.tensor([0])) == 0)
    assert len({tuple(r.tolist()) for r in W[1:]}) == V - 1
    ids = torch.randint(0, V, (5, 3))
    assert torch.equal(inf.embed_token(ids), W[ids])
    with pytest.raises(IndexError):
        inf.embed_token(torch.tensor([V]))


def test_without_ggm_has_no_decoder_blocks():
    inf = InferenceSystem(D, V, guide_dim=D, use_ggm=False)
    assert not any(n.startswith("ggm") for n, _ in inf.named_parameters())


def test_legality_figure_one_walk(vocab):
    target = vocab.encode(["Minus", "C_3", "N_0", "[SEP]", "Half", "V_0", "[EOS]"])
    masks, boundary, steps = sequence_masks(vocab, target, n_numbers=1)
    assert boundary.tolist() == [True, False, False, False, True, False, False]
    for t, tok in enumerate(target):
        assert masks[t, tok]
    # V_0 is not legal inside step 0, but is in step 1
    v0 = vocab.token_to_id["V_0"]
    assert not masks[1, v0] and masks[5, v0]
    # N_1 does not exist in a one-number problem
    assert not masks[2, vocab.token_to_id["N_1"]]
    # EOS is forced once only one slot remains
    tr = LegalityTracker(vocab, 1, max_len=3)
    tr.advance(vocab.token_to_id["Half"])
    tr.advance(vocab.token_to_id["C_3"])
    assert np.flatnonzero(tr.legal_mask()).tolist() == [vocab.eos_id]


def test_legality_never_dead_ends(vocab):
    rng = np.random.default_rng(0)
    for _ in range(300):
        tr = LegalityTracker(vocab, int(rng.integers(0, 5)), max_len=int(rng.integers(2, 33)))
        while not tr.done:
            legal = np.flatnonzero(tr.legal_mask())
            assert len(legal) > 0
            tr.advance(int(rng.choice(legal)))
        assert tr.length <= tr.max_len
