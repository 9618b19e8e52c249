"""Command-line surface for every pipeline stage.

Every run writes a manifest next to its outputs listing the exact arguments,
seeds, inputs, and produced artifacts, so reruns are reproducible byte for
byte (manifest timestamps aside).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as X
from . import model as M
from . import pipeline as P
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SynthProfile, fewshot_split, load_corpus_jsonl, load_gazetteer,
                   save_corpus_jsonl, synth_corpus, EntityChain, detokenize)
from .decoding import GEN_PRESETS, GenConfig, generate_two_stage, predict_chain
from .errors import PromptSumError
from .training import TrainConfig, pretrain, tune_entity_prompt, tune_summary_prompt


def data_dir() -> Path:
    return Path(os.environ.get("PROMPTSUM_DATA_DIR", "."))


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    artifacts: dict[str, str]) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "artifacts": artifacts,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _resolve_gen(args) -> GenConfig:
    if getattr(args, "gen_preset", None):
        gen = GEN_PRESETS[args.gen_preset]
    elif getattr(args, "gen_config", None):
        with open(args.gen_config) as f:
            gen = GenConfig.from_dict(json.load(f))
    else:
        gen = GenConfig()
    overrides = {}
    if getattr(args, "beam_width", None):
        overrides["beam_width"] = args.beam_width
    if getattr(args, "max_len", None):
        overrides["max_len"] = args.max_len
    if overrides:
        gen = GenConfig(**{**gen.to_dict(), **overrides})
    return gen.validate()


def _load_profile(args) -> SynthProfile:
    if getattr(args, "profile_json", None):
        return SynthProfile.from_json(args.profile_json)
    name = getattr(args, "profile", "copy")
    if name == "copy":
        return SynthProfile.copy_profile()
    if name == "distractor":
        return SynthProfile.distractor_profile()
    raise PromptSumError(f"unknown profile {name!r}")


def _load_train_config(args, stage: str) -> TrainConfig:
    if getattr(args, "train_config", None):
        with open(args.train_config) as f:
            raw = json.load(f)
        raw["stage"] = stage
        return TrainConfig.from_dict(raw)
    return TrainConfig(stage=stage, epochs=args.epochs, lr=args.lr,
                       effective_batch=args.batch, seed=args.seed).validate()


def _write_loss_log(path: Path, reports) -> None:
    with open(path, "w") as f:
        for rep in reports:
            f.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    profile = _load_profile(args)
    examples = synth_corpus(args.seed, args.size, profile)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus_jsonl(examples, out)
    _write_manifest(out.parent, "synth", args, {"corpus": str(out)})
    print(f"wrote {len(examples)} examples to {out}")
    return 0


def _load_settings(args) -> P.RunSettings:
    if getattr(args, "settings", None):
        with open(args.settings) as f:
            return P.RunSettings(**json.load(f))
    return P.RunSettings()


def cmd_pretrain(args) -> int:
    examples = load_corpus_jsonl(args.corpus)
    docs = [ex.source for ex in examples]
    settings = _load_settings(args)
    bundle = P.CorpusBundle(profile=SynthProfile.copy_profile(),
                            pretrain_examples=examples, pool=examples, test=[])
    base = P.build_initial_checkpoint(bundle, settings)
    cfg = _load_train_config(args, M.STAGE_PRETRAIN)
    ckpt, reports = pretrain(docs, base, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    log = out.with_suffix(".losses.jsonl")
    _write_loss_log(log, reports)
    _write_manifest(out.parent, "pretrain", args,
                    {"checkpoint": str(out), "loss_log": str(log)})
    print(f"pretrained checkpoint at {out} ({len(reports)} reports)")
    return 0


def _split_for(args, examples):
    splits = fewshot_split(examples, args.shots, [args.seed])
    return splits[0]


def cmd_tune_entity(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    train, val = _split_for(args, examples)
    cfg = _load_train_config(args, M.STAGE_TUNE_ENTITY)
    out_ckpt, reports = tune_entity_prompt(train, val, ckpt, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_ckpt, out)
    log = out.with_suffix(".losses.jsonl")
    _write_loss_log(log, reports)
    _write_manifest(out.parent, "tune-entity", args,
                    {"checkpoint": str(out), "loss_log": str(log)})
    print(f"entity prompt tuned; checkpoint at {out}")
    return 0


def cmd_tune_summary(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    train, val = _split_for(args, examples)
    cfg = _load_train_config(args, M.STAGE_TUNE_SUMMARY)
    out_ckpt, reports = tune_summary_prompt(train, val, ckpt, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_ckpt, out)
    log = out.with_suffix(".losses.jsonl")
    _write_loss_log(log, reports)
    _write_manifest(out.parent, "tune-summary", args,
                    {"checkpoint": str(out), "loss_log": str(log)})
    print(f"summary prompt tuned; checkpoint at {out}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    gen = _resolve_gen(args)
    if args.source:
        from .data import Document
        docs = [Document(id="cli-0", text=args.source)]
    else:
        docs = [ex.source for ex in load_corpus_jsonl(args.corpus)]
    override = None
    if args.entities is not None:
        override = EntityChain([e.strip() for e in args.entities.split("|") if e.strip()])
    outputs = []
    for doc in docs[: args.limit]:
        res = generate_two_stage(ckpt, doc, gen, chain_override=override)
        outputs.append({"id": doc.id, "chain": res.chain.entities,
                        "summary": detokenize(res.summary_tokens),
                        "chain_source": res.chain_source})
    text = json.dumps(outputs, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        _write_manifest(Path(args.out).parent, "infer", args, {"outputs": args.out})
    print(text)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    gen = _resolve_gen(args)
    report, _ = P.evaluate_checkpoint(ckpt, examples[: args.limit], gen, label=args.label)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_manifest(out.parent, "eval", args, {"report": str(out)})
    print(X.render_table(report))
    return 0


def cmd_ablate(args) -> int:
    profile = _load_profile(args)
    settings = _load_settings(args)
    if args.fast:
        settings = P.RunSettings(pretrain_docs=30, pool_size=2 * args.shots + 10,
                                 test_size=10, fewshot_n=args.shots,
                                 pretrain_epochs=2, tune_epochs=2)
    bundle = P.make_corpus_bundle(profile, settings, seed_base=args.seed_base)
    reports = P.run_ablation(args.variant, bundle, settings, seeds=args.seeds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    out.write_text(payload + "\n")
    _write_manifest(out.parent, "ablate", args, {"report": str(out)})
    for report in reports:
        print(X.render_table(report))
    return 0


def cmd_controllability(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    gen = _resolve_gen(args)
    rates = P.controllability_experiment(ckpt, examples, ks=args.k, n_docs=args.n_docs,
                                         seed=args.seed, gen=gen)
    report = X.MetricReport(label="controllability", success_rate=rates)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_manifest(out.parent, "controllability", args, {"report": str(out)})
    print(X.render_table(report))
    return 0


def cmd_hallucination(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    gen = _resolve_gen(args)
    outcome = P.hallucination_experiment(ckpt, examples[: args.limit], gen)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out.parent, "hallucination", args, {"report": str(out)})
    print(json.dumps(outcome.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_diversity(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    examples = load_corpus_jsonl(args.corpus, cap=ckpt.config.entity_chain_cap)
    gen = _resolve_gen(args)
    reports = P.diversity_experiment(ckpt, examples, n_docs=args.n_docs,
                                     n_candidates=args.candidates, seed=args.seed, gen=gen)
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_manifest(out.parent, "diversity", args, {"report": str(out)})
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .server import serve_api
    serve_api(args.checkpoint, host=args.host, port=args.port,
              workers=args.workers, max_source_chars=args.max_source_chars)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptsum",
        description="Entity-chain-planned summarization: training, evaluation, serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_gen_flags(p):
        p.add_argument("--gen-preset", choices=sorted(GEN_PRESETS))
        p.add_argument("--gen-config", help="JSON file with generation settings")
        p.add_argument("--beam-width", type=int)
        p.add_argument("--max-len", type=int)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--profile", default="copy", choices=["copy", "distractor"])
    p.add_argument("--profile-json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="joint two-task pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-config")
    p.add_argument("--settings", help="JSON file with model/run settings")
    p.set_defaults(func=cmd_pretrain)

    for name, fn in (("tune-entity", cmd_tune_entity), ("tune-summary", cmd_tune_summary)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} prompt tuning")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--shots", type=int, default=100)
        p.add_argument("--epochs", type=int, default=60)
        p.add_argument("--lr", type=float, default=0.02)
        p.add_argument("--batch", type=int, default=8)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--train-config")
        p.set_defaults(func=fn)

    p = sub.add_parser("infer", help="two-stage inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--source", help="inline source text")
    p.add_argument("--entities", help="chain override, | separated")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--out")
    add_gen_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric report on a labeled corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--label", default="eval")
    p.add_argument("--limit", type=int, default=1000)
    p.add_argument("--out", required=True)
    add_gen_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+eval one pipeline variant")
    p.add_argument("--variant", required=True, choices=P.ABLATION_VARIANTS)
    p.add_argument("--profile", default="copy", choices=["copy", "distractor"])
    p.add_argument("--profile-json")
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--seed-base", type=int, default=1000)
    p.add_argument("--shots", type=int, default=100)
    p.add_argument("--fast", action="store_true", help="tiny smoke-test sizes")
    p.add_argument("--settings", help="JSON file with model/run settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("controllability", help="forced-entity success rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 2, 5])
    p.add_argument("--n-docs", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    add_gen_flags(p)
    p.set_defaults(func=cmd_controllability)

    p = sub.add_parser("hallucination", help="hallucination split and control")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--out", required=True)
    add_gen_flags(p)
    p.set_defaults(func=cmd_hallucination)

    p = sub.add_parser("diversity", help="candidate-set diversity comparison")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-docs", type=int, default=50)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True)
    add_gen_flags(p)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("serve", help="HTTP inference API")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--max-source-chars", type=int, default=20000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PromptSumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
