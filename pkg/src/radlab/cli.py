"""Command-line entry point: ``radlab <verb> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import corpus as C
from . import experiment as E
from . import report as R
from .checkpoint import Checkpoint, CheckpointFormatError

log = logging.getLogger("radlab")


def _config(args) -> E.ExperimentConfig:
    cfg = E.load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return cfg.replace(**changes)


def cmd_synth(args) -> int:
    lab = E.Lab(_config(args))
    cp = lab.corpora()
    for name in ("general", "clinical", "midtrain", "train", "val", "test"):
        print(f"{name:>9}: {len(getattr(cp, name))} reports")
    print(f"written to {lab.out / 'corpus'}")
    return 0


def cmd_tokenize(args) -> int:
    lab = E.Lab(_config(args))
    v = lab.vocab()
    cp = lab.corpora()
    stats = C.token_budget_report(cp.midtrain, v, budget_tokens=13_000_000)
    print(f"vocabulary: {v.vocab_size} ids, {len(v.merges)} merges, {v.num_sentinels} sentinels -> {lab.out / 'vocab.txt'}")
    print(f"midtrain corpus: {stats['tokens']} tokens ({stats['ratio']:.2e} of the published 13M-token budget)")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    lab = E.Lab(cfg)
    needed = sorted({E.CHAINS[s][0] for s in cfg.strategies})
    for name in needed:
        ckpt = lab.chain(name)
        print(f"{name}: provenance {list(ckpt.provenance)} -> {lab.out / 'checkpoints' / (name + '.ckpt')}")
    return 0


def cmd_midtrain(args) -> int:
    lab = E.Lab(_config(args))
    ckpt = lab.chain("midtrain")
    print(f"midtrain: provenance {list(ckpt.provenance)} -> {lab.out / 'checkpoints' / 'midtrain.ckpt'}")
    return 0


def _print_records(records) -> None:
    print(R.render_table(records), end="")


def cmd_finetune(args) -> int:
    cfg = _config(args)
    records = E.run_pipeline(cfg)
    _print_records(records)
    print(f"records -> {Path(cfg.out_dir) / 'records.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    records = E.sweep_fewshot(cfg, save_checkpoints=args.save_checkpoints)
    _print_records(records)
    print(f"records -> {Path(cfg.out_dir) / 'records.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    lab = E.Lab(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    label = args.label or Path(args.checkpoint).stem
    res = lab.evaluate(ckpt, label, "full", cfg.seed)
    path = lab.out / f"summaries_{label}.jsonl"
    E._write_jsonl(res.summaries, path)
    _print_records([res.record])
    print(f"summaries -> {path}")
    return 0


def _load_for_report(args):
    if args.fixture:
        records, names = R.load_published_strategies()
        return records, names
    path = Path(args.records) if args.records else Path(_config(args).out_dir) / "records.csv"
    if not path.is_file():
        raise E.ConfigError(f"no records file at {path}; run sweep or finetune first, or pass --fixture")
    return R.load_records(path), None


def cmd_render(args) -> int:
    records, names = _load_for_report(args)
    out = Path(args.out) if args.out else Path(_config(args).out_dir) / "report"
    overlay = [o for o in R.load_published_fewshot() if o["kind"] == "point"] if args.overlay else None
    for path in R.render(records, args.mode, out, names=names, overlay=overlay):
        print(path)
    if args.mode == "table":
        print(R.render_table(sorted(records, key=R.sort_key), names), end="")
    return 0


def cmd_compare(args) -> int:
    records, _ = _load_for_report(args)
    text = R.format_rankings(R.compare_strategies(records))
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "compare.txt").write_text(text, encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radlab", description="Staged adaptation experiments for report summarization.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI experiment config (default: bundled toy config)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)
        return p

    verb("synth", cmd_synth, "generate the synthetic corpora and splits")
    verb("tokenize", cmd_tokenize, "train the shared subword vocabulary")
    verb("pretrain", cmd_pretrain, "denoising pre-training from random init")
    verb("midtrain", cmd_midtrain, "denoising mid-training on radiology text")
    verb("finetune", cmd_finetune, "fine-tune every strategy on the full training split and score it")
    p = verb("sweep", cmd_sweep, "few-shot sweep over the configured k values and seeds")
    p.add_argument("--save-checkpoints", action="store_true", help="keep one checkpoint per sweep cell")
    p = verb("eval", cmd_eval, "decode the test split with a checkpoint and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", help="strategy label for the record (default: checkpoint file stem)")
    for name, func, text in (("render", cmd_render, "write a table or SVG curves"), ("compare", cmd_compare, "rank strategies")):
        p = verb(name, func, text)
        p.add_argument("--records", help="records CSV (default: <out_dir>/records.csv)")
        p.add_argument("--fixture", action="store_true", help="use the bundled published strategy-comparison values")
        if name == "render":
            p.add_argument("--mode", choices=("table", "curves"), default="table")
            p.add_argument("--overlay", action="store_true", help="overlay the published few-shot points on curves")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (E.ConfigError, R.ReportError, C.CorpusError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"radlab {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
