"""Joint objective (program NLL + per-step knowledge BCE), optimizer groups and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .config import ModelConfig, TrainConfig, model_config_from, to_flat
from .dataset import batches, prepare
from .errors import NonFiniteLoss
from .geoprog import ProgramVocabulary
from .knowledge import KnowledgeBase
from .model import DualGeoSolver
from .perception import pretrain_diagram_encoder
from .reasoner import forward_teacher_forced
from .text import TextVocabulary, tokenize

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass
class LossBreakdown:
    L_g: torch.Tensor
    L_c: torch.Tensor
    L: torch.Tensor
    per_step: torch.Tensor | None = None    # (B, S) summed BCE per step


def loss_generation(log_probs, targets, mask=None):
    """Mean negative log-likelihood over each program's positions, averaged over the batch."""
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    nll = nll.masked_fill(~mask, 0.0)
    return (nll.sum(1) / mask.sum(1)).mean()


def knowledge_bce(scores, labels, eps=BCE_EPS):
    p = scores.clamp(eps, 1 - eps)
    return -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p))


def loss_knowledge(scores, labels, step_mask=None, eps=BCE_EPS, per_step=False):
    """Summed BCE over steps and knowledge entries per problem, averaged over the batch."""
    bce = knowledge_bce(scores, labels, eps).sum(-1)
    if step_mask is not None:
        bce = bce.masked_fill(~step_mask, 0.0)
    total = bce.sum(1).mean()
    return (total, bce) if per_step else total


def compute_loss(model, batch, sched_sample=0.0, generator=None) -> LossBreakdown:
    out = forward_teacher_forced(model, batch, sched_sample=sched_sample, generator=generator)
    L_g = loss_generation(out.log_probs, batch.target, batch.target_mask)
    if out.knowledge_scores is None:
        L_c, per_step = torch.zeros((), dtype=L_g.dtype), None
    else:
        L_c, per_step = loss_knowledge(out.knowledge_scores, batch.labels, batch.step_mask, per_step=True)
    return LossBreakdown(L_g, L_c, L_g + L_c, per_step)


# ---------------------------------------------------------------------------
# optimizer

GROUPS = ("text_context", "fusion_ggm", "other")


def group_of(name: str) -> str:
    if name.startswith("text_encoder.context."):
        return "text_context"
    if name.startswith("fusion.") or name.startswith("inference.ggm."):
        return "fusion_ggm"
    return "other"


def parameter_groups(model, cfg: TrainConfig):
    """Split trainable parameters into the three learning-rate groups.

    Every trainable parameter lands in exactly one group; frozen ones in none.
    """
    lrs = {"text_context": cfg.lr_text_context, "fusion_ggm": cfg.lr_fusion_ggm, "other": cfg.lr_other}
    named = {g: [] for g in GROUPS}
    for name, p in model.named_parameters():
        if p.requires_grad:
            named[group_of(name)].append((name, p))
    seen = [id(p) for g in GROUPS for _, p in named[g]]
    trainable = [id(p) for p in model.parameters() if p.requires_grad]
    assert len(seen) == len(set(seen)) and set(seen) == set(trainable), "parameter groups are not a partition"
    return [{"name": g, "params": [p for _, p in named[g]], "lr": lrs[g]} for g in GROUPS if named[g]]


# ---------------------------------------------------------------------------
# model construction and checkpoints

def build_text_vocabulary(problems, kb: KnowledgeBase) -> TextVocabulary:
    words = set()
    for p in problems:
        words.update(p.tokens)
    for entry in kb:
        words.update(tokenize(entry.explanation))
    return TextVocabulary(words)


def build_model(cfg: ModelConfig, vocab, text_vocab, kb, seed=0, double=False) -> DualGeoSolver:
    torch.manual_seed(seed)
    model = DualGeoSolver(cfg, vocab, text_vocab, kb)
    return model.double() if double else model


def prepare_all(problems, model):
    cfg = model.cfg
    return [prepare(p, model.vocab, model.text_vocab, model.n_knowledge, cfg.image_size, cfg.gamma,
                    cfg.max_text_len, cfg.legality_mask, cfg.max_decode_len, cfg.max_steps) for p in problems]


def save_checkpoint(path, model, train_cfg: TrainConfig | None = None, optimizer=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "model_state": model.state_dict(),
        "vocab": model.vocab.to_dict(),
        "text_vocab": model.text_vocab.to_list(),
        "knowledge_base": model.kb.to_dict(),
        "config": to_flat(model.cfg, train_cfg),
        "seed": train_cfg.seed if train_cfg else None,
        "dtype": str(next(model.parameters()).dtype),
    }
    if optimizer is not None:
        state["optimizer_state"] = optimizer.state_dict()
    state.update(extra or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (model, raw checkpoint dict)."""
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    flat = ckpt["config"]
    cfg = model_config_from(flat)
    vocab = ProgramVocabulary.from_dict(ckpt["vocab"])
    text_vocab = TextVocabulary.from_list(ckpt["text_vocab"])
    kb = KnowledgeBase.from_dict(ckpt["knowledge_base"])
    model = DualGeoSolver(cfg, vocab, text_vocab, kb)
    if ckpt.get("dtype") == "torch.float64":
        model = model.double()
    model.load_state_dict(ckpt["model_state"])
    return model, ckpt


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_metric: float | None = None
    best_epoch: int | None = None
    epochs_run: int = 0
    seconds: float = 0.0


def _finite(x) -> bool:
    return math.isfinite(float(x.detach()) if torch.is_tensor(x) else float(x))


def train(model, problems, cfg: TrainConfig, val_problems=None, metrics_path=None, checkpoint_path=None,
          resume=False, stop_when=None) -> TrainResult:
    """Train in place; keeps the best weights by validation Total accuracy.

    ``stop_when(model, epoch)`` may end training early. Metrics go to
    ``metrics_path`` as one JSON record per epoch.
    """
    from .evaluation import evaluate

    dtype = torch.float64 if cfg.double else torch.float32
    if cfg.double:
        model.double()
    items = prepare_all(problems, model)
    optimizer = torch.optim.Adam(parameter_groups(model, cfg))
    gen = torch.Generator().manual_seed(cfg.seed)
    sample_gen = torch.Generator().manual_seed(cfg.seed + 1)
    result = TrainResult()
    best_state = None
    start_epoch = 1

    if resume and checkpoint_path and Path(checkpoint_path).exists():
        ckpt = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
        model.load_state_dict(ckpt["model_state"])
        optimizer.load_state_dict(ckpt["optimizer_state"])
        gen.set_state(ckpt["shuffle_rng"])
        sample_gen.set_state(ckpt["sample_rng"])
        result.history = ckpt["history"]
        result.best_metric, result.best_epoch = ckpt["best_metric"], ckpt["best_epoch"]
        best_state = ckpt.get("best_state")
        start_epoch = ckpt["epoch"] + 1
        log.info("resumed from epoch %d", ckpt["epoch"])

    metrics_file = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(metrics_path, "a" if resume else "w", encoding="utf-8")
    t0 = time.time()
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            model.train()
            sums = {"L_g": 0.0, "L_c": 0.0, "L": 0.0}
            n = 0
            for batch_id, batch in batches(items, cfg.batch_size, gen):
                batch = batch.to(dtype=dtype)
                losses = compute_loss(model, batch, cfg.sched_sample, sample_gen)
                if not _finite(losses.L):
                    raise NonFiniteLoss(f"non-finite loss {float(losses.L.detach())} at epoch {epoch}, batch {batch_id}",
                                        batch_id=batch_id, epoch=epoch)
                optimizer.zero_grad()
                losses.L.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                for k in sums:
                    sums[k] += float(getattr(losses, k).detach()) * len(batch)
                n += len(batch)
            record = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}

            if val_problems is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
                report = evaluate(model, val_problems, beam_size=cfg.beam_size, with_steps=False)
                record["val_total"] = report.total
                record["val_no_result"] = report.no_result
                record["val_exact"] = report.exact_match
                # later epochs win ties
                if result.best_metric is None or report.total >= result.best_metric:
                    result.best_metric, result.best_epoch = report.total, epoch
                    best_state = copy.deepcopy(model.state_dict())
            record["seconds"] = round(time.time() - t0, 3)
            result.history.append(record)
            result.epochs_run = epoch
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, model, cfg, optimizer, extra={
                    "epoch": epoch, "history": result.history, "best_metric": result.best_metric,
                    "best_epoch": result.best_epoch, "best_state": best_state,
                    "shuffle_rng": gen.get_state(), "sample_rng": sample_gen.get_state(),
                })

            done = cfg.target_accuracy is not None and record.get("val_total", -1) >= cfg.target_accuracy
            if stop_when is not None and stop_when(model, epoch):
                done = True
            if done:
                break
    finally:
        if metrics_file:
            metrics_file.close()
    if best_state is not None and result.best_epoch != result.epochs_run:
        model.load_state_dict(best_state)
    result.seconds = time.time() - t0
    return result


def fit(train_problems, model_cfg: ModelConfig, train_cfg: TrainConfig, kb, vocab, text_vocab=None,
        val_problems=None, **kwargs):
    """Build a fresh seeded model and train it; returns (model, TrainResult)."""
    text_vocab = text_vocab or build_text_vocabulary(train_problems, kb)
    model = build_model(model_cfg, vocab, text_vocab, kb, train_cfg.seed, train_cfg.double)
    if train_cfg.diagram_pretrain_epochs:
        pretrain_diagrams(model, train_problems, train_cfg)
    result = train(model, train_problems, train_cfg, val_problems, **kwargs)
    return model, result


def pretrain_diagrams(model, problems, cfg: TrainConfig):
    """Masked-patch pretraining of the diagram encoder; freezing applies afterwards."""
    items = prepare_all(problems, model)
    patches = torch.stack([it.patches for it in items]).to(next(model.parameters()).dtype)
    enc = model.diagram_encoder
    frozen = not next(enc.parameters()).requires_grad
    enc.requires_grad_(True)
    history = pretrain_diagram_encoder(enc, patches, cfg.diagram_pretrain_epochs, seed=cfg.seed)
    enc.requires_grad_(not frozen)
    return history


def history_to_dict(result: TrainResult) -> dict:
    return asdict(result)
