"""The alternating knowledge/inference loop: teacher-forced scoring and beam search.

The guiding vector is refreshed only at step boundaries (start of sequence or
right after SEP) and reused unchanged for every token of that step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import ProblemTensors, collate
from .errors import GeoError, LabelMismatch, NoMatch
from .geoprog import EOS, SEP, NumberMap, Program, execute, match_choice
from .legality import LegalityTracker


@dataclass
class TeacherForcedOutput:
    log_probs: torch.Tensor                 # (B, T, V)
    knowledge_scores: torch.Tensor | None   # (B, S, N)
    guides: torch.Tensor | None = None      # (B, T, guide_dim) when recorded
    goal_calls: torch.Tensor | None = None  # (B,) number of goal computations
    selections: list | None = None          # [(b, step, ids)] used to build H^K


def _gold_sets(labels, step_mask):
    out = {}
    for b in range(labels.shape[0]):
        for s in range(int(step_mask[b].sum())):
            out[(b, s)] = tuple(int(i) for i in torch.nonzero(labels[b, s] > 0.5).flatten())
    return out


def forward_teacher_forced(model, batch, knowledge="gold", theta=None, sched_sample=0.0, generator=None,
                           record=False) -> TeacherForcedOutput:
    """Score the gold programs of a batch position by position.

    ``knowledge`` picks what builds H^K at each boundary: "gold" labels or
    thresholded "predicted" scores. With ``sched_sample`` > 0 each gold step is
    swapped for the predicted selection with that probability.
    """
    if knowledge not in ("gold", "predicted"):
        raise ValueError(f"knowledge must be 'gold' or 'predicted', got {knowledge!r}")
    cfg, ks, inf = model.cfg, model.knowledge, model.inference
    theta = cfg.theta if theta is None else theta
    n_bound = (batch.boundary & batch.target_mask).sum(1)
    n_steps = batch.step_mask.sum(1)
    if not torch.equal(n_bound, n_steps):
        bad = torch.nonzero(n_bound != n_steps).flatten().tolist()
        raise LabelMismatch(f"label step count differs from program step count in batch rows {bad}")

    enc = model.encode(batch.text, batch.text_mask, batch.patches)
    B, T = batch.target.shape
    s, c = inf.initial(enc.h_M)
    r, rc = ks.initial(enc.h_M)
    e_prev = inf.embed_token(torch.full((B,), model.vocab.bos_id, dtype=torch.long, device=s.device))
    history = [s]

    gold = _gold_sets(batch.labels, batch.step_mask) if cfg.use_ksm else {}
    gold_cache = {}
    if cfg.use_ksm and knowledge == "gold" and sched_sample <= 0:
        uniq = sorted(set(gold.values()))
        feats, kmask = model.encode_knowledge(uniq)
        gold_cache = {u: (feats[i], kmask[i]) for i, u in enumerate(uniq)}

    logps, guides, score_rows, score_idx, selections = [], [], [], [], []
    goal_calls = torch.zeros(B, dtype=torch.long)
    for t in range(T):
        rows = torch.nonzero(batch.boundary[:, t]).flatten()
        if len(rows):
            goal_calls[rows] += 1
            if cfg.use_ggm:
                g = inf.ggm_next_goal(enc.H_M[rows], enc.mask_M[rows], torch.stack(history, 1)[rows])
            else:
                g = s[rows]
            H_K = K_mask = None
            if cfg.use_ksm:
                p = ks.knowledge_scores(g)
                steps = batch.step_index[rows, t]
                score_rows.append(p)
                score_idx.append(torch.stack([rows, steps], 1))
                chosen = [gold[(int(b), int(st))] for b, st in zip(rows, steps)]
                if knowledge == "predicted" or sched_sample > 0:
                    pred = ks.select(p, theta)
                    if knowledge == "predicted":
                        chosen = pred
                    else:
                        flip = torch.rand(len(rows), generator=generator) < sched_sample
                        chosen = [pr if f else gd for pr, gd, f in zip(pred, chosen, flip.tolist())]
                selections.extend((int(b), int(st), sel) for b, st, sel in zip(rows, steps, chosen))
                if gold_cache:
                    H_K = torch.nn.utils.rnn.pad_sequence([gold_cache[k][0] for k in chosen], batch_first=True)
                    K_mask = torch.nn.utils.rnn.pad_sequence([gold_cache[k][1] for k in chosen], batch_first=True)
                else:
                    H_K, K_mask = model.encode_knowledge(chosen)
            h_vis = ks.vsm_attend(g, enc.H_D[rows])[0] if cfg.use_vsm else None
            new_r, new_rc, _ = ks.guide(H_K, K_mask, h_vis, s[rows], r[rows], rc[rows] if rc is not None else None)
            r = r.index_put((rows,), new_r)
            if rc is not None:
                rc = rc.index_put((rows,), new_rc)
        s, c, logp, _ = inf.tpm_step(enc.H_M, enc.mask_M, r, e_prev, s, c, batch.legal[:, t])
        logps.append(logp)
        if record:
            guides.append(r)
        history.append(s)
        e_prev = inf.embed_token(batch.target[:, t])

    scores = None
    if cfg.use_ksm:
        S = batch.labels.shape[1]
        scores = torch.zeros(B, S, model.n_knowledge, dtype=s.dtype, device=s.device)
        idx = torch.cat(score_idx)
        scores = scores.index_put((idx[:, 0], idx[:, 1]), torch.cat(score_rows))
    return TeacherForcedOutput(
        log_probs=torch.stack(logps, 1), knowledge_scores=scores,
        guides=torch.stack(guides, 1) if record else None, goal_calls=goal_calls,
        selections=selections,
    )


# ---------------------------------------------------------------------------
# generic beam search

@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float
    state: object = field(repr=False, default=None)


def beam_search(decoder, beam_size: int, max_len: int) -> list[BeamHypothesis]:
    """Standard beam search over any decoder exposing ``initial``, ``expand``, ``extend``.

    ``expand(states)`` returns (log-probs (k, V), per-hypothesis post states);
    ``extend(post, token, logp)`` returns the successor state. Hypotheses end at
    ``decoder.eos_id``; results are ranked by summed log-probability, no length
    normalization.
    """
    if beam_size < 1:
        raise ValueError("beam size must be positive")
    alive = [BeamHypothesis((), 0.0, decoder.initial())]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len):
        if not alive:
            break
        logp, posts = decoder.expand([h.state for h in alive])
        logp = logp.detach().double()
        V = logp.shape[1]
        total = torch.tensor([h.score for h in alive], dtype=torch.float64)[:, None] + logp
        flat = total.flatten()
        order = torch.argsort(flat, descending=True, stable=True).tolist()
        nxt = []
        for j in order:
            val = float(flat[j])
            if val == float("-inf"):
                break
            i, tok = divmod(j, V)
            hyp = BeamHypothesis(alive[i].tokens + (tok,), val,
                                 decoder.extend(posts[i], tok, float(logp[i, tok])))
            if tok == decoder.eos_id:
                finished.append(hyp)
            else:
                nxt.append(hyp)
                if len(nxt) == beam_size:
                    break
        alive = nxt
        finished.sort(key=lambda h: -h.score)
        if len(finished) >= beam_size and (not alive or alive[0].score <= finished[beam_size - 1].score):
            break
    finished.sort(key=lambda h: -h.score)
    return finished[:beam_size]


def greedy_search(decoder, max_len: int) -> BeamHypothesis:
    state, tokens, score = decoder.initial(), (), 0.0
    for _ in range(max_len):
        logp, posts = decoder.expand([state])
        logp = logp.detach().double()[0]
        tok = int(torch.argmax(logp))
        score += float(logp[tok])
        tokens += (tok,)
        state = decoder.extend(posts[0], tok, float(logp[tok]))
        if tok == decoder.eos_id:
            break
    return BeamHypothesis(tokens, score, state)


# ---------------------------------------------------------------------------
# solver decoder

@dataclass
class StepRecord:
    start: int                      # token position where the step begins
    goal: torch.Tensor
    guide: torch.Tensor
    scores: torch.Tensor | None
    selected: tuple[int, ...]
    visual_weights: torch.Tensor | None
    knowledge_weights: torch.Tensor | None


@dataclass
class DecodeState:
    tokens: tuple[int, ...]
    s: torch.Tensor
    c: torch.Tensor
    guide: torch.Tensor
    rc: torch.Tensor | None
    history: torch.Tensor            # (L, d): s_0 .. s_t
    tracker: LegalityTracker
    steps: tuple[StepRecord, ...] = ()
    logps: tuple[float, ...] = ()
    guides_used: tuple[torch.Tensor, ...] = ()


@dataclass
class _Post:
    parent: DecodeState
    s: torch.Tensor
    c: torch.Tensor
    guide: torch.Tensor
    rc: torch.Tensor | None
    step: StepRecord | None


class SolverDecoder:
    """Adapts a DualGeoSolver to the beam-search interface for one problem."""

    def __init__(self, model, item: ProblemTensors, theta=None, cache=None):
        self.model = model
        self.theta = model.cfg.theta if theta is None else theta
        self.cache = {} if cache is None else cache
        self.eos_id = model.vocab.eos_id
        self.n_numbers = item.n_numbers
        batch = collate([item]).to(dtype=next(model.parameters()).dtype)
        self.enc = model.encode(batch.text, batch.text_mask, batch.patches)

    def initial(self) -> DecodeState:
        m, cfg = self.model, self.model.cfg
        s, c = m.inference.initial(self.enc.h_M)
        r, rc = m.knowledge.initial(self.enc.h_M)
        tracker = LegalityTracker(m.vocab, self.n_numbers, cfg.max_decode_len, cfg.max_steps, cfg.legality_mask)
        return DecodeState((), s[0], c[0], r[0], rc[0] if rc is not None else None, s, tracker)

    def expand(self, states):
        m, cfg, enc = self.model, self.model.cfg, self.enc
        ks, inf = m.knowledge, m.inference
        k = len(states)
        S = torch.stack([st.s for st in states])
        C = torch.stack([st.c for st in states])
        G = torch.stack([st.guide for st in states])
        RC = torch.stack([st.rc for st in states]) if cfg.use_kim else None
        last = [st.tokens[-1] if st.tokens else m.vocab.bos_id for st in states]
        e_prev = inf.embed_token(torch.tensor(last, dtype=torch.long))
        H_M = enc.H_M.expand(k, -1, -1)
        mask_M = enc.mask_M.expand(k, -1)

        records = [None] * k
        rows = [i for i, st in enumerate(states) if st.tracker.at_boundary]
        if rows:
            idx = torch.tensor(rows)
            if cfg.use_ggm:
                hist = torch.stack([states[i].history for i in rows])
                g = inf.ggm_next_goal(H_M[idx], mask_M[idx], hist)
            else:
                g = S[idx]
            p, chosen, H_K, K_mask = None, [()] * len(rows), None, None
            if cfg.use_ksm:
                p = ks.knowledge_scores(g)
                chosen = ks.select(p, self.theta)
                H_K, K_mask = m.encode_knowledge(chosen, self.cache)
            vis_w = None
            h_vis = None
            if cfg.use_vsm:
                h_vis, vis_w = ks.vsm_attend(g, enc.H_D.expand(len(rows), -1, -1))
            new_r, new_rc, know_w = ks.guide(H_K, K_mask, h_vis, S[idx], G[idx], RC[idx] if RC is not None else None)
            G = G.index_put((idx,), new_r)
            if RC is not None:
                RC = RC.index_put((idx,), new_rc)
            for j, i in enumerate(rows):
                records[i] = StepRecord(
                    start=len(states[i].tokens), goal=g[j], guide=G[i],
                    scores=p[j] if p is not None else None, selected=tuple(chosen[j]),
                    visual_weights=vis_w[j] if vis_w is not None else None,
                    knowledge_weights=know_w[j] if know_w is not None else None)

        legal = torch.from_numpy(np.stack([st.tracker.legal_mask() for st in states]))
        s_new, c_new, logp, _ = inf.tpm_step(H_M, mask_M, G, e_prev, S, C, legal)
        posts = [_Post(states[i], s_new[i], c_new[i], G[i], RC[i] if RC is not None else None, records[i])
                 for i in range(k)]
        return logp, posts

    def extend(self, post: _Post, token: int, logp: float) -> DecodeState:
        st = post.parent
        tracker = st.tracker.copy()
        tracker.advance(token)
        steps = st.steps + (post.step,) if post.step is not None else st.steps
        return DecodeState(
            tokens=st.tokens + (token,), s=post.s, c=post.c, guide=post.guide, rc=post.rc,
            history=torch.cat([st.history, post.s[None]]), tracker=tracker, steps=steps,
            logps=st.logps + (logp,), guides_used=st.guides_used + (post.guide,))


@dataclass
class RankedProgram:
    tokens: tuple[str, ...]
    score: float
    state: DecodeState = field(repr=False)


@torch.no_grad()
def beam_decode(model, item: ProblemTensors, beam_size=10, theta=None, cache=None) -> list[RankedProgram]:
    was_training = model.training
    model.eval()
    try:
        dec = SolverDecoder(model, item, theta, cache)
        hyps = beam_search(dec, beam_size, model.cfg.max_decode_len)
    finally:
        model.train(was_training)
    return [RankedProgram(tuple(model.vocab.decode(h.tokens)), h.score, h.state) for h in hyps]


@torch.no_grad()
def greedy_decode(model, item: ProblemTensors, theta=None, cache=None) -> RankedProgram:
    was_training = model.training
    model.eval()
    try:
        h = greedy_search(SolverDecoder(model, item, theta, cache), model.cfg.max_decode_len)
    finally:
        model.train(was_training)
    return RankedProgram(tuple(model.vocab.decode(h.tokens)), h.score, h.state)


@dataclass
class AnswerOutcome:
    choice: int | None       # None is "No Result"
    rank: int | None
    program: Program | None
    value: float | None


def answer(ranked, numbers: NumberMap, choices, vocab=None) -> AnswerOutcome:
    """First hypothesis (in the given order) that executes and matches a choice."""
    for rank, hyp in enumerate(ranked):
        tokens = hyp.tokens if hasattr(hyp, "tokens") else hyp
        try:
            program = Program.from_tokens(tokens, vocab)
            value = execute(program, numbers, vocab).final
            idx = match_choice(value, choices)
        except (GeoError, ValueError):
            continue
        return AnswerOutcome(idx, rank, program, value)
    return AnswerOutcome(None, None, None, None)


def build_trace(state: DecodeState, vocab, problem=None, include_goals=False, top_k=3) -> dict:
    """Structured per-problem record of one decoded hypothesis."""
    tokens = list(vocab.decode(state.tokens))
    bounds = [st.start for st in state.steps] + [len(tokens)]
    steps = []
    for j, st in enumerate(state.steps):
        lo, hi = bounds[j], bounds[j + 1]
        entry = {
            "tokens": tokens[lo:hi],
            "log_probs": list(state.logps[lo:hi]),
            "selected": list(st.selected),
        }
        if st.scores is not None:
            entry["knowledge_scores"] = [round(float(x), 6) for x in st.scores]
        if st.visual_weights is not None:
            w = st.visual_weights
            top = torch.topk(w, min(top_k, len(w)))
            entry["visual_top_patches"] = [[int(i), round(float(v), 6)] for v, i in zip(top.values, top.indices)]
        if include_goals:
            entry["goal"] = [float(x) for x in st.goal]
        steps.append(entry)
    out = {"tokens": tokens, "score": float(sum(state.logps)), "steps": steps}
    if problem is not None:
        out["id"] = problem.id
        try:
            program = Program.from_tokens(tokens, vocab)
            value = execute(program, problem.numbers, vocab).final
            out["program"] = program.render()
            out["value"] = value
            out["choice"] = match_choice(value, problem.choices)
        except NoMatch:
            out["choice"] = None
        except (GeoError, ValueError) as exc:
            out["error"] = str(exc)
            out["choice"] = None
    return out


def step_token_groups(tokens) -> list[list[str]]:
    """Split an emitted sequence into its steps (each keeps its SEP/EOS terminator)."""
    groups, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok in (SEP, EOS):
            groups.append(cur)
            cur = []
    if cur:
        groups.append(cur)
    return groups
