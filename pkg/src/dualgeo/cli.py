"""Command-line entry point: synth, train, eval, ablate, sweep, exec, trace."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import ABLATION_SWITCHES, model_config_from, resolve_run_config, train_config_from
from .dataset import corpus_digest, ingest
from .errors import GeoError, NonFiniteLoss, UsageError, ValidationError
from .geoprog import NumberMap, ProgramVocabulary, default_vocabulary, execute, match_choice, segment
from .knowledge import KnowledgeBase, sample_knowledge_base

log = logging.getLogger("dualgeo")

EXIT_USAGE, EXIT_VALIDATION, EXIT_NONFINITE = 2, 3, 4


def _out_dir(args, name) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("GEO_HOME", "runs")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _knowledge_base(path, corpus_path=None) -> KnowledgeBase:
    if path:
        return KnowledgeBase.load(path)
    if corpus_path is not None:
        beside = Path(corpus_path).parent / "knowledge_base.json"
        if beside.exists():
            return KnowledgeBase.load(beside)
    return sample_knowledge_base()


def _run_config(args) -> dict:
    cfg = resolve_run_config(args.config, args.set or (), args.preset)
    if args.seed is not None:
        cfg["train.seed"] = args.seed
    if getattr(args, "sched_sample", None) is not None:
        cfg["train.sched_sample"] = args.sched_sample
    return cfg


def _provenance(args, ckpt=None) -> dict:
    """Arguments of this invocation plus the config and seed a checkpoint was trained with."""
    run = {"command": args.command, "args": {k: v for k, v in vars(args).items() if k not in ("func", "command")}}
    if ckpt is not None:
        run["config"] = ckpt["config"]
        run["seed"] = ckpt.get("seed")
    return run


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    from .synth import write_corpus

    if args.count < 1:
        raise UsageError("--count must be positive")
    out = _out_dir(args, "corpus")
    path = write_corpus(out, args.split, args.seed, args.count, args.skip)
    print(f"wrote {args.count} problems to {path}")
    print(f"digest {corpus_digest(out)}")
    return 0


def _vocabulary(cfg) -> ProgramVocabulary:
    path = cfg["data.vocabulary"]
    return ProgramVocabulary.load(path) if path else default_vocabulary()


def _load_split(cfg, key, kb):
    path = cfg[key]
    if not path:
        raise UsageError(f"{key} is not set (use --set {key}=path/to/split.json)")
    return ingest(path, _vocabulary(cfg), kb)


def cmd_train(args):
    from .training import build_text_vocabulary, fit, save_checkpoint

    cfg = _run_config(args)
    out = _out_dir(args, "train")
    kb = _knowledge_base(cfg["data.knowledge_base"], cfg["data.train"])
    train_problems = _load_split(cfg, "data.train", kb)
    val = _load_split(cfg, "data.eval", kb) if cfg["data.eval"] else None
    mcfg, tcfg = model_config_from(cfg), train_config_from(cfg)
    if val is not None and not tcfg.eval_every:
        tcfg = replace(tcfg, eval_every=1)
    _dump(cfg, out / "config.json")
    model, result = fit(train_problems, mcfg, tcfg, kb, _vocabulary(cfg),
                        build_text_vocabulary(train_problems, kb), val,
                        metrics_path=out / "metrics.jsonl", checkpoint_path=out / "last.pt", resume=args.resume)
    save_checkpoint(out / "model.pt", model, tcfg, extra={"run_config": cfg, "best_epoch": result.best_epoch})
    print(f"trained {result.epochs_run} epochs in {result.seconds:.1f}s; checkpoint {out / 'model.pt'}")
    return 0


def _load_model(args):
    from .training import load_checkpoint

    model, ckpt = load_checkpoint(args.checkpoint)
    problems = ingest(args.data, model.vocab, model.kb)
    return model, ckpt, problems


def cmd_eval(args):
    from .evaluation import evaluate, write_report

    model, ckpt, problems = _load_model(args)
    out = _out_dir(args, "eval")
    report = evaluate(model, problems, args.theta, args.beam_size)
    write_report(report, out / "report.json", run=_provenance(args, ckpt))
    print(report.to_table())
    return 0


def cmd_ablate(args):
    from .evaluation import ablate

    cfg = _run_config(args)
    out = _out_dir(args, "ablate")
    kb = _knowledge_base(cfg["data.knowledge_base"], cfg["data.train"])
    train_problems = _load_split(cfg, "data.train", kb)
    eval_problems = _load_split(cfg, "data.eval", kb)
    switches = args.switches.split(",") if args.switches else ABLATION_SWITCHES
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    _dump(cfg, out / "config.json")
    _dump(_provenance(args), out / "run.json")
    table = ablate(train_problems, eval_problems, model_config_from(cfg), train_config_from(cfg), kb,
                   _vocabulary(cfg), switches, seeds, theta=cfg["eval.theta"], beam_size=cfg["eval.beam_size"])
    rows = {}
    for name, reports in table.items():
        rows[name] = [r.to_dict() for r in reports]
        mean = sum(r.total for r in reports) / len(reports)
        print(f"{name:>10}  total {100 * mean:.1f}  " + " ".join(f"{100 * r.total:.1f}" for r in reports))
    _dump(rows, out / "ablation.json")
    return 0


def cmd_sweep(args):
    from .evaluation import threshold_sweep

    model, ckpt, problems = _load_model(args)
    out = _out_dir(args, "sweep")
    _dump(_provenance(args, ckpt), out / "run.json")
    thetas = [float(t) for t in args.thetas.split(",")]
    curve = threshold_sweep(model, problems, thetas, args.beam_size, out / "curve.tsv")
    for theta, acc in curve:
        print(f"{theta:g}\t{acc:.4f}")
    return 0


def cmd_exec(args):
    raw = Path(args.program).read_text(encoding="utf-8").strip() if args.program else args.text
    if not raw:
        raise UsageError("give --program FILE or --text PROGRAM")
    vocab = default_vocabulary()
    program = segment(raw, vocab)
    result = execute(program, NumberMap(tuple(args.numbers)), vocab)
    for j, v in enumerate(result.variables):
        print(f"V_{j} = {v:g}")
    print(f"final {result.final:g}")
    if args.choices:
        print(f"choice {match_choice(result.final, args.choices)}")
    return 0


def cmd_trace(args):
    from .reasoner import beam_decode, build_trace
    from .training import prepare_all

    model, ckpt, problems = _load_model(args)
    if args.ids:
        wanted = set(args.ids.split(","))
        problems = [p for p in problems if p.id in wanted]
        if not problems:
            raise UsageError("none of the requested ids are in the split")
    out = _out_dir(args, "trace")
    run = _provenance(args, ckpt)
    docs = []
    for prob, item in zip(problems, prepare_all(problems, model)):
        ranked = beam_decode(model, item, args.beam_size, args.theta)
        doc = build_trace(ranked[0].state, model.vocab, prob, include_goals=args.goals)
        for entry in doc["steps"]:
            entry["selected_concepts"] = [model.kb[i].concept for i in entry["selected"]]
        doc["run"] = run
        docs.append(doc)
        _dump(doc, out / f"{prob.id}.json")
    print(f"wrote {len(docs)} trace(s) to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualgeo", description="Dual-system geometry problem solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p, config=False):
        p.add_argument("--out", help="output directory (default: $GEO_HOME/<command>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1, help="torch threads; 1 keeps runs bit-reproducible")
        if config:
            p.add_argument("--config", help="flat JSON config file")
            p.add_argument("--preset", default="toy", choices=("toy", "full"))
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("synth", help="write a synthetic corpus split")
    common(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--skip", type=int, default=0, help="start this many problems into the seed's stream")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("train", help="train a model")
    common(p, config=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--sched-sample", type=float, default=None,
                   help="probability of conditioning a step on predicted instead of gold knowledge")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("sweep", cmd_sweep, "accuracy across knowledge thresholds"),
                              ("trace", cmd_trace, "dump per-step decoding traces")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="split JSON")
        p.add_argument("--beam-size", type=int, default=10)
        if name != "sweep":
            p.add_argument("--theta", type=float, default=None)
        p.set_defaults(func=func)
        if name == "sweep":
            p.add_argument("--thetas", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
        if name == "trace":
            p.add_argument("--ids", help="comma-separated problem ids (default: all)")
            p.add_argument("--goals", action="store_true", help="include goal vectors")

    p = sub.add_parser("ablate", help="train and evaluate single-switch ablations")
    common(p, config=True)
    p.add_argument("--switches", help=f"comma-separated subset of {','.join(ABLATION_SWITCHES)}")
    p.add_argument("--seeds", help="comma-separated seeds (default: train.seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("exec", help="execute a program")
    p.add_argument("--program", help="file holding the program text")
    p.add_argument("--text", help="program given inline")
    p.add_argument("--numbers", type=float, nargs="*", default=[])
    p.add_argument("--choices", type=float, nargs="*")
    p.set_defaults(func=cmd_exec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(max(1, getattr(args, "workers", 1)))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ValidationError as exc:
        print(f"validation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GeoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
