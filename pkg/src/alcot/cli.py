"""Command-line entry point: ``alcot <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from alcot import analysis, checkpoint, data
from alcot.config import load_train_config


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    from alcot.trainer import train

    result = train(cfg, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    last = result.metrics[-1]
    print(json.dumps(last.record()))
    return 0


def _cmd_eval(args) -> int:
    from alcot.trainer import evaluate

    c = checkpoint.load(args.ckpt)
    model = c.build_model()
    length = args.seq_len or (c.train_config.seq_len if c.train_config else 65)
    windows = data.load_corpus(args.corpus, length, model.cfg.vocab_size)
    print(json.dumps(evaluate(model, windows, c.loss_config, args.batch_size)))
    return 0


def _cmd_generate(args) -> int:
    from alcot.inference import generate, write_trace

    model = checkpoint.load_model(args.ckpt)
    gen = generate(model, args.prompt, args.max_new, temperature=args.temp, seed=args.seed)
    sys.stdout.write(args.prompt + gen.text + "\n")
    if args.trace:
        write_trace(args.trace, gen.traces)
    return 0


def _windows_for(c, args):
    length = args.seq_len or (c.train_config.seq_len if c.train_config else 65)
    windows = data.load_corpus(args.corpus, length, c.model_config.vocab_size)
    return windows[: args.max_windows] if args.max_windows else windows


def _cmd_probe(args) -> int:
    c = checkpoint.load(args.ckpt)
    model = c.build_model()
    res = analysis.probe_gain(model, _windows_for(c, args))
    analysis.write_table(args.out, res.rows)
    print(f"{len(res.rows)} rows -> {args.out}")
    return 0


def _cmd_curves(args) -> int:
    c = checkpoint.load(args.ckpt)
    model = c.build_model()
    reports = analysis.collect_reports(model, _windows_for(c, args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_len = analysis.length_vs_ptarget(reports)
    by_diff = analysis.difficulty_buckets(reports)
    analysis.write_table(out / "length_vs_ptarget.tsv", by_len)
    analysis.write_table(out / "difficulty_buckets.tsv", by_diff)
    print(json.dumps({
        "spearman_length_ptarget": analysis.trend(by_len, "latent_length", "mean_p_target"),
        "spearman_difficulty_length": analysis.trend(by_diff, "bucket", "mean_latent_length"),
    }))
    return 0


def _cmd_report(args) -> int:
    model = checkpoint.load_model(args.ckpt)
    text = Path(args.text_file).read_text()
    study = analysis.case_study_report(model, text, args.out)
    sys.stdout.write(study.ansi)
    return 0


def _cmd_corpus(args) -> int:
    if args.synthetic:
        n = data.write_synthetic_corpus(args.out, args.synthetic, args.seed)
    else:
        n = data.encode_text_file(args.text, args.out)
    print(f"{n} tokens -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alcot", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="pretrain from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.add_argument("--out-dir")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--seq-len", type=int)
    s.add_argument("--batch-size", type=int, default=16)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("generate", help="adaptive decoding from a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--max-new", type=int, default=64)
    s.add_argument("--temp", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace")
    s.set_defaults(func=_cmd_generate)

    for name, func, helptext in (("probe", _cmd_probe, "adaptive-gain probe table"),
                                 ("curves", _cmd_curves, "length/difficulty tables")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seq-len", type=int)
        s.add_argument("--max-windows", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="colored per-token latent-length report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text-file", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_report)

    s = sub.add_parser("corpus", help="build an ALCT corpus file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--text", help="UTF-8 text file to byte-encode")
    g.add_argument("--synthetic", type=int, metavar="N_CHARS", help="generate synthetic text")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
