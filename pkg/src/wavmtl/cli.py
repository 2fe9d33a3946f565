"""``wavmtl`` command-line tool.

Commands: ``pretrain``, ``finetune``, ``evaluate``, ``synth-data`` and
``show-config``. Exit codes: 0 success, 1 invalid config or arguments,
2 file or checkpoint I/O failure, 3 non-finite loss during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import pipeline
from .config import RunConfig, dump_config, load_config, parse_config
from .data import KWS, SV, WavFormatError, materialize, synth_dataset
from .evaluation import write_results
from .trainer import FROZEN_SRE, NORMAL, RANDOM_SRE, NumericalError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else parse_config(None)


def _progress(args, every):
    if args.quiet:
        return None

    def report(rec):
        if rec.iteration % every == 0:
            print(f"iter {rec.iteration} {rec.task} loss={rec.loss:.4f}", file=sys.stderr)
    return report


def cmd_pretrain(args):
    cfg = _config(args)
    corpus = pipeline.load_corpus(cfg)
    log = pipeline.MetricsLog(_progress(args, 100))
    sre, log = pipeline.run_pretrain(cfg, corpus, log)
    ckpt_io.save(args.out, pipeline.sre_checkpoint(cfg, sre))
    log.write(args.log or pipeline.default_paths(args.out))
    print(f"config_hash={cfg.hash}")
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _config(args)
    if args.random_init:
        ablation, sre_ckpt = RANDOM_SRE, None
    else:
        if not args.sre:
            raise ValueError("finetune needs --sre CHECKPOINT unless --random-init is given")
        ablation = FROZEN_SRE if args.freeze_sre else NORMAL
        sre_ckpt = ckpt_io.load(args.sre)
    corpus = pipeline.load_corpus(cfg)
    log = pipeline.MetricsLog(_progress(args, 100))
    sre, heads, n_classes, log = pipeline.run_finetune(cfg, corpus, sre_ckpt, ablation, log)
    ckpt_io.save(args.out, pipeline.model_checkpoint(cfg, sre, heads, n_classes))
    log.write(args.log or pipeline.default_paths(args.out))
    print(f"config_hash={cfg.hash}")
    print(f"checkpoint={args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    ckpt = ckpt_io.load(args.checkpoint)
    sre, heads = pipeline.restore_model(ckpt)
    if args.task not in heads:
        raise pipeline.CompatibilityError(
            f"checkpoint has no {args.task!r} head (heads: {', '.join(sorted(heads)) or 'none'})")
    corpus = pipeline.load_corpus(cfg)
    results = Path(args.results or f"{args.checkpoint}.{args.task}.txt")
    if args.task == KWS:
        metrics = {"kws_top1": pipeline.evaluate_kws(sre, heads, corpus)}
        trials = scores = None
    else:
        eer, trials = pipeline.evaluate_sv(sre, heads, corpus)
        metrics = {"sv_eer": eer}
        scores = Path(args.scores or f"{args.checkpoint}.sv_scores.txt")
    metrics["config_hash"] = ckpt.config.get("run_hash", "")
    write_results(results, metrics, trials, scores)
    for name, value in metrics.items():
        print(f"{name}={value}")
    return EXIT_OK


def cmd_synth_data(args):
    cfg = _config(args)
    out = materialize(synth_dataset(cfg.data.synthetic), args.out)
    print(f"wrote synthetic corpus to {out}")
    return EXIT_OK


def cmd_show_config(args):
    cfg = _config(args)
    sys.stdout.write(dump_config(cfg))
    print(f"# config_hash={cfg.hash}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="wavmtl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run config (defaults when omitted)")
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "self-supervised pretraining of the SRE")
    p.add_argument("--out", required=True, help="output SRE checkpoint")
    p.add_argument("--log", help="metrics log path (default: <out>.metrics.txt)")
    p.add_argument("--quiet", action="store_true")

    p = add("finetune", cmd_finetune, "single- or multi-task fine-tuning")
    p.add_argument("--sre", help="pretrained SRE checkpoint")
    init = p.add_mutually_exclusive_group()
    init.add_argument("--random-init", action="store_true", help="start from a random SRE")
    init.add_argument("--freeze-sre", action="store_true", help="never update the SRE")
    p.add_argument("--out", required=True, help="output model checkpoint (SRE + heads)")
    p.add_argument("--log", help="metrics log path (default: <out>.metrics.txt)")
    p.add_argument("--quiet", action="store_true")

    p = add("evaluate", cmd_evaluate, "Top-1 accuracy (kws) or trial EER (sv)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=[KWS, SV])
    p.add_argument("--results", help="metric file (default: <checkpoint>.<task>.txt)")
    p.add_argument("--scores", help="sv trial score dump (default: <checkpoint>.sv_scores.txt)")

    p = add("synth-data", cmd_synth_data, "write the synthetic corpus as WAV files")
    p.add_argument("--out", required=True, help="output directory")

    add("show-config", cmd_show_config, "print the resolved config and its hash")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ckpt_io.CheckpointError, WavFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
