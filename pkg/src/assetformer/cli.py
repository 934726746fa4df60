"""``assetformer`` command-line entry point.

Every subcommand accepts ``--config FILE`` (YAML or JSON mapping of option
names, using the underscore spelling, e.g. ``max_width: 6``); explicit flags
override file values. The effective configuration is written next to each
output as ``<output>.config.json``. ``ASSETFORMER_SEED`` supplies the seed
when neither the flag nor the config file sets one.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys
from pathlib import Path

import yaml

from . import asset_model as am
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .decoder import (
    SamplingParams,
    SlowFastParams,
    continue_from_prefix,
    generate,
    slowfast_generate,
)
from .eval import evaluate
from .model import NAMED_CONFIGS
from .pcg import PHRASE_VOCAB, PcgParams, build_dataset, read_dataset
from .tokenizer import (
    EOS_ID,
    OrderingMethod,
    TokenFileError,
    TokenScheduleError,
    detokenize,
    prepare,
    read_tokenized,
    reorder,
    tokenize,
    write_tokenized,
)
from .training import TrainConfig, TrainingError, train


class UsageError(Exception):
    pass


def _positive(name):
    def conv(v):
        iv = int(v)
        if iv < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1")
        return iv
    return conv


def _seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("ASSETFORMER_SEED")
    return int(env) if env is not None else 0


def _echo_config(args, out: str) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg["seed"] = _seed(args) if "seed" in cfg else None
    with open(f"{out}.config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=str)


def _parse_caption(text: str | None):
    if not text:
        return None
    phrases = [p.strip() for p in text.split(",")]
    bundle = am.PhraseBundle.from_phrases(phrases)
    unknown = [p for p in phrases if p not in PHRASE_VOCAB]
    if unknown:
        raise UsageError(f"phrases not in caption vocabulary: {unknown}")
    return bundle


def _sampling(args) -> SamplingParams:
    return SamplingParams(
        strategy=args.strategy,
        temperature=args.temperature,
        top_k=args.k,
        beam_width=args.beam_width,
        cfg_scale=None if args.cfg_scale < 0 else args.cfg_scale,
        max_tokens=args.max_tokens,
        seed=_seed(args),
    )


def _write_generation(args, result, caption) -> None:
    asset = am.Asset(detokenize(result.tokens).primitives, caption)
    # model output is kept verbatim; validity is reported rather than enforced
    am.write_asset(asset, args.out, allow_duplicates=True)
    stats = {
        "tokens": result.new_tokens,
        "seconds": result.seconds,
        "tokens_per_s": result.tokens_per_s,
        "truncated": result.truncated,
        "acceptance_rate": result.stats.get("acceptance_rate"),
        "valid": am.validate_asset(asset).ok,
    }
    stats.update({k: v for k, v in result.stats.items() if k != "acceptance_rate"})
    with open(args.stats or f"{args.out}.stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2)
    _echo_config(args, args.out)


# --- subcommands -------------------------------------------------------------


def cmd_pcg(args) -> None:
    params = PcgParams(
        max_width=args.max_width,
        max_length=args.max_length,
        max_floor_height=args.max_storeys,
        wall_height_per_storey=args.wall_height,
    )
    try:
        params.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    build_dataset(args.n, params, _seed(args), args.out)
    _echo_config(args, args.out)


def cmd_prepare(args) -> None:
    records = list(read_dataset(args.dataset))
    ds = prepare(records, args.order, _seed(args), args.max_seq_len)
    for rec, tr in zip(records, ds.records):
        if detokenize(tr.tokens).multiset() != rec.asset.multiset():
            raise RuntimeError("round-trip failure while preparing dataset")
    write_tokenized(ds, args.out)
    _echo_config(args, args.out)


def cmd_train(args) -> None:
    if not os.path.exists(args.data):
        raise FileNotFoundError(f"dataset not found: {args.data}")
    ds = read_tokenized(args.data)
    base = NAMED_CONFIGS[args.model]
    longest = max(len(r.tokens) for r in ds.records)
    max_len = args.max_seq_len or max(base.n_cond_slots + 6, longest + base.n_cond_slots)
    mcfg = dataclasses.replace(base, max_seq_len=max_len, cond_dropout=args.cond_dropout)
    tcfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        total_steps=args.steps,
        warmup_steps=args.warmup,
        seed=_seed(args),
    )
    result = train(ds, mcfg, tcfg, metrics_path=args.metrics or f"{args.out}.metrics.jsonl")
    save_checkpoint(result.checkpoint, args.out)
    _echo_config(args, args.out)


def cmd_generate(args) -> None:
    model = load_checkpoint(args.ckpt).model
    caption = _parse_caption(args.caption)
    result = generate(model, caption, _sampling(args))
    _write_generation(args, result, caption)


def cmd_slowfast(args) -> None:
    draft = load_checkpoint(args.draft).model
    target = load_checkpoint(args.target).model
    caption = _parse_caption(args.caption)
    result = slowfast_generate(draft, target, caption, _sampling(args), SlowFastParams(args.lookahead))
    _write_generation(args, result, caption)


def cmd_inpaint(args) -> None:
    model = load_checkpoint(args.ckpt).model
    source = am.read_asset(args.prefix)
    caption = _parse_caption(args.caption) or source.caption
    if args.drop_category:
        drop = {am.Category(c.capitalize()) for c in args.drop_category}
        source = am.Asset(tuple(p for p in source.primitives if p.category not in drop), source.caption)
    tau = reorder(source, args.order, _seed(args))
    prefix = tokenize(source, tau)[:-1]
    result = continue_from_prefix(model, caption, prefix, _sampling(args))
    _write_generation(args, result, caption)


def cmd_export(args) -> None:
    am.export_mesh(am.read_asset(args.asset), args.out)


_SIDECARS = (".stats.json", ".config.json")


def _load_assets(path: str) -> list[am.Asset]:
    p = Path(path)
    if p.is_dir():
        files = sorted(glob.glob(str(p / "*.json")))
        return [am.read_asset(f) for f in files if not f.endswith(_SIDECARS)]
    if p.suffix == ".jsonl":
        return [r.asset for r in read_dataset(p)]
    return [am.read_asset(p)]


def cmd_eval(args) -> None:
    generated = _load_assets(args.generated)
    reference = _load_assets(args.reference)
    if not generated or not reference:
        raise UsageError("no assets found")
    timing = {}
    stats_files = sorted(glob.glob(os.path.join(args.generated, "*.stats.json"))) if os.path.isdir(args.generated) else []
    if stats_files:
        stats = [json.load(open(f)) for f in stats_files]
        timing["tokens_per_second"] = sum(s["tokens"] for s in stats) / sum(s["seconds"] for s in stats)
        rates = [s["acceptance_rate"] for s in stats if s.get("acceptance_rate") is not None]
        if rates:
            timing["acceptance_rate"] = sum(rates) / len(rates)
    report = evaluate(generated, reference, timing)
    Path(args.out).write_text(report.to_json() + "\n")
    _echo_config(args, args.out)


def cmd_validate(args) -> None:
    report = am.validate_asset(am.read_asset(args.asset))
    print(json.dumps(report.to_dict(), indent=2))
    if args.strict and not report.ok:
        raise SystemExit(1)


# --- parser ------------------------------------------------------------------


def _add_sampling(p) -> None:
    p.add_argument("--caption", help="four comma-separated phrases")
    p.add_argument("--strategy", choices=["greedy", "beam", "topk"], default="topk")
    p.add_argument("--k", type=_positive("--k"), default=10)
    p.add_argument("--beam-width", type=_positive("--beam-width"), default=4)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--cfg-scale", type=float, default=2.0, help="negative disables guidance")
    p.add_argument("--max-tokens", type=int, default=5000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--stats")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assetformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML/JSON file with option defaults")
        p.set_defaults(func=func)
        return p

    p = add("pcg", cmd_pcg, "synthesize a line-delimited JSON dataset")
    p.add_argument("--n", type=_positive("--n"), required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-width", type=int, default=8)
    p.add_argument("--max-length", type=int, default=8)
    p.add_argument("--max-storeys", type=int, default=5)
    p.add_argument("--wall-height", type=int, default=2)
    p.add_argument("--out", required=True)

    p = add("prepare", cmd_prepare, "tokenize a dataset under an ordering policy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--order", choices=[m.value for m in OrderingMethod], default="dfs")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model on a tokenized dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=sorted(NAMED_CONFIGS), default="nano")
    p.add_argument("--steps", type=_positive("--steps"), default=1000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=_positive("--batch-size"), default=32)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics")
    p.add_argument("--out", required=True)

    p = add("generate", cmd_generate, "sample an asset from a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_sampling(p)

    p = add("slowfast", cmd_slowfast, "speculative decoding with a draft and a target")
    p.add_argument("--draft", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--lookahead", type=_positive("--lookahead"), default=5)
    _add_sampling(p)

    p = add("inpaint", cmd_inpaint, "continue an existing asset's token sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prefix", required=True, help="asset JSON used as the prefix")
    p.add_argument("--order", choices=[m.value for m in OrderingMethod], default="dfs")
    p.add_argument("--drop-category", action="append", choices=["roof", "wall", "component"])
    _add_sampling(p)

    p = add("export", cmd_export, "write an asset as Wavefront OBJ")
    p.add_argument("--asset", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "compare generated assets with a reference set")
    p.add_argument("--generated", required=True, help="directory of asset JSON files or a .jsonl dataset")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)

    p = add("validate", cmd_validate, "print a validation report for an asset")
    p.add_argument("--asset", required=True)
    p.add_argument("--strict", action="store_true", help="exit 1 when the asset has errors")
    return parser


def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)  # JSON is a subset of YAML
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _defer_required(parser: argparse.ArgumentParser) -> dict[str, list[argparse.Action]]:
    """Turn off argparse's required check so config files can supply those options."""
    deferred = {}
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        sub.__class__ = _JsonArgumentParser
        deferred[name] = [a for a in sub._actions if a.required]
        for a in deferred[name]:
            a.required = False
    parser.__class__ = _JsonArgumentParser
    return deferred


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    deferred = _defer_required(parser)
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        if args.config:
            known = {a.dest for a in sub._actions}
            cfg = _load_config(args.config)
            unknown = set(cfg) - known
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            sub.set_defaults(**cfg)
            args = parser.parse_args(argv)
        missing = [a.option_strings[0] for a in deferred[args.command] if getattr(args, a.dest) is None]
        if missing:
            raise UsageError(f"the following arguments are required: {', '.join(missing)}")
        args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (am.AssetFormatError, TokenFileError, TokenScheduleError, CheckpointError,
            TrainingError, FileNotFoundError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
