"""Command-line entry point: ``cifnar {gen-data,train,eval,visualize,bench}``.

Exit codes: 0 success, 2 configuration/input error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..checkpoint import CheckpointError, load_checkpoint
from ..model import DECODER_MODES, ModelError
from ..synth import DatasetFormatError, generate_many, read_dataset, write_dataset
from .bench import bench_params
from .config import ConfigError, TrainConfig, apply_overrides, load_config
from .evaluate import EvalError, evaluate_params, read_curves
from .train import DivergenceError, train
from .visualize import plot_curves, visualize_params

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("cifnar")


def _base_config(args) -> TrainConfig:
    return load_config(args.config) if args.config else TrainConfig()


def _load_utterances(args, cfg: TrainConfig):
    if args.data:
        spec, utts = read_dataset(args.data)
        return spec, utts
    seed = cfg.dev_seed if args.seed is None else args.seed
    return cfg.task, generate_many(cfg.task, [(seed, i) for i in range(args.n)])


def _load_model(args, task):
    mcfg, params, _ = load_checkpoint(args.checkpoint)
    if task.vocab_size != mcfg.vocab_size or task.feature_dim != mcfg.feature_dim:
        raise EvalError("dataset task does not match the checkpoint's vocab_size/feature_dim")
    kw = {}
    if args.theta is not None:
        kw["theta"] = args.theta
    if args.residual_threshold is not None:
        kw["residual_threshold"] = args.residual_threshold
    return (replace(mcfg, **kw) if kw else mcfg), params


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    seed = 0 if args.seed is None else args.seed
    utts = generate_many(cfg.task, [(seed, i) for i in range(args.n)])
    write_dataset(utts, args.out, cfg.task)
    print(f"wrote {len(utts)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_overrides(
        _base_config(args), seed=args.seed, steps=args.steps, out=args.out, disable_ali=args.disable_ali,
        disable_ctx=args.disable_ctx, decoder_mode=args.decoder_mode, theta=args.theta,
        residual_threshold=args.residual_threshold,
    )
    res = train(cfg)
    plot_curves(res.metrics_log, res.out_dir / "curves.svg")
    print(json.dumps({"best_checkpoint": str(res.best_checkpoint), "best_dev_cer": res.best_cer,
                      "best_step": res.best_step, "steps": res.steps}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _base_config(args)
    task, utts = _load_utterances(args, cfg)
    mcfg, params = _load_model(args, task)
    curves = read_curves(args.metrics_log) if args.metrics_log else None
    rep = evaluate_params(params, mcfg, utts, latency=args.latency, curves=curves)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _base_config(args)
    task, utts = _load_utterances(args, cfg)
    if not 0 <= args.index < len(utts):
        raise EvalError(f"--index {args.index} out of range for {len(utts)} utterances")
    mcfg, params = _load_model(args, task)
    files = visualize_params(params, mcfg, utts[args.index], args.out, stem=f"utt{args.index}")
    print(json.dumps({k: str(v) for k, v in vars(files).items()}))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _base_config(args)
    task, utts = _load_utterances(args, cfg)
    mcfg, params = _load_model(args, task)
    rep = bench_params(params, mcfg, utts, per_bucket=args.per_bucket, repeats=args.repeats)
    print(rep.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cifnar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_flags=True):
        sp.add_argument("--config", help="JSON config with model/task/train sections")
        sp.add_argument("--seed", type=int)
        if model_flags:
            sp.add_argument("--theta", type=float, help="CTC spike threshold")
            sp.add_argument("--residual-threshold", type=float, help="fire a trailing residual at or above this")

    g = sub.add_parser("gen-data", help="write a synthetic dataset file")
    common(g, model_flags=False)
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--disable-ali", action="store_true", help="drop the CTC-spike alignment loss")
    t.add_argument("--disable-ctx", action="store_true", help="drop the contextual decoder")
    t.add_argument("--decoder-mode", choices=DECODER_MODES)
    t.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("visualize", cmd_visualize, "alpha/spike CSVs and an SVG for one utterance"),
                            ("bench", cmd_bench, "decoder latency per output-length bucket")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", help="dataset file (default: generate --n utterances from --seed)")
        sp.add_argument("--n", type=int, default=500)
        sp.set_defaults(func=func)
        if name == "eval":
            sp.add_argument("--latency", type=int, default=0, help="number of utterances to time")
            sp.add_argument("--metrics-log", help="attach training curves from this JSONL log")
            sp.add_argument("--out", help="write the report JSON here")
        elif name == "visualize":
            sp.add_argument("--index", type=int, default=0)
            sp.add_argument("--out", required=True, help="output directory")
        else:
            sp.add_argument("--per-bucket", type=int, default=20)
            sp.add_argument("--repeats", type=int, default=3)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ModelError, CheckpointError, DatasetFormatError, EvalError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
