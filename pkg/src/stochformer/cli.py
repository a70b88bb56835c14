"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
Resolved configuration goes to stderr; results go to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as cfgtext
from .data import SyntheticSpec, generate_synthetic, load_corpus, load_features
from .dsp import FeatureConfig, extract_mfcc, read_wav, write_mfcc
from .errors import ConfigError, DataLoadError, InputError, NumericError, StochformerError
from .gradcheck import run_gradcheck
from .model import ModelConfig, StochasticTransformer, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate_split, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochformer", description="Stochastic transformer severity regression.")
    p.add_argument("--seed", type=int, default=None, help="seed for every random stream")
    p.add_argument("--threads", type=int, default=1, help="feature-extraction workers")
    # repeated on each subcommand; SUPPRESS keeps a value given before the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("extract", parents=[common], help="WAV -> MFCC text file")
    s.add_argument("wav")
    s.add_argument("out")
    s.add_argument("--config", help="key=value file with feature settings")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float, default=None, help="seconds per recording")

    s = sub.add_parser("train", parents=[common], help="train on a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config", help="key=value file (model, training and feature keys)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--lr", type=float)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")

    s = sub.add_parser("eval", parents=[common], help="RMSE and CCC of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")

    s = sub.add_parser("predict", parents=[common], help="score one recording")
    s.add_argument("--ckpt", required=True)
    s.add_argument("wav")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    s.add_argument("--trials", type=int, default=100)
    return p


def _emit_config(lines, seed, err):
    print(f"# seed={seed}", file=err)
    for line in lines:
        print(f"# {line}", file=err)


def resolve_run_config(values: dict, seed: int | None):
    """Split a flat key=value mapping into model, training and feature configs.

    Keys may be qualified (``model.d_model``) or bare; a bare ``seed`` sets both
    the model and training seeds.
    """
    groups = {"model": {}, "train": {}, "feature": {}}
    classes = {"model": ModelConfig, "train": TrainConfig, "feature": FeatureConfig}
    fields = {g: {f.name for f in dataclasses.fields(c)} for g, c in classes.items()}
    for key, value in values.items():
        group, dot, name = key.partition(".")
        if dot and group in groups:
            groups[group][name] = value
            continue
        owners = [g for g in groups if key in fields[g]]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        for g in owners:
            groups[g][key] = value
    if seed is not None:
        groups["model"]["seed"] = str(seed)
        groups["train"]["seed"] = str(seed)
    return tuple(cfgtext.from_mapping(classes[g], groups[g]) for g in ("model", "train", "feature"))


def cmd_extract(args, out, err):
    values = cfgtext.read_file(args.config) if args.config else {}
    values = {k.removeprefix("feature."): v for k, v in values.items()}
    features = cfgtext.from_mapping(FeatureConfig, values)
    _emit_config(cfgtext.to_lines(features, "feature."), args.seed, err)
    m = extract_mfcc(read_wav(args.wav), features)
    write_mfcc(args.out, m)
    print(f"wrote {args.out}: {m.frames} frames x {m.coeffs} coefficients", file=out)


def cmd_synth(args, out, err):
    kwargs = {"n_participants": args.n, "seed": 42 if args.seed is None else args.seed}
    if args.duration is not None:
        kwargs["duration_s"] = args.duration
    spec = SyntheticSpec(**kwargs)
    _emit_config(cfgtext.to_lines(spec, "synth."), spec.seed, err)
    index = generate_synthetic(spec, args.out)
    print(f"wrote {len(index)} recordings to {args.out}", file=out)


def cmd_train(args, out, err):
    values = cfgtext.read_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in ("epochs", "batch_size", "lr"):
        if getattr(args, key) is not None:
            values[f"train.{key}"] = str(getattr(args, key))
    mcfg, tcfg, features = resolve_run_config(values, args.seed)
    _emit_config(sorted(cfgtext.to_lines(mcfg, "model.") + cfgtext.to_lines(tcfg, "train.")
                        + cfgtext.to_lines(features, "feature.")), tcfg.seed, err)
    corpus = load_features(load_corpus(args.corpus), features, args.threads)
    model = StochasticTransformer(mcfg)
    ckpt = Path(args.out)
    report = train(model, corpus, tcfg, features, checkpoint_dir=ckpt.parent)
    save_checkpoint(ckpt, model, features)
    Path(f"{ckpt}.report.tsv").write_text(report.to_text(), encoding="utf-8")
    Path(f"{ckpt}.timing.tsv").write_text(report.timing_text(), encoding="utf-8")
    print(f"epochs={len(report.epochs)}", file=out)
    print(f"best_epoch={report.best_epoch}", file=out)
    print(f"best_val_rmse={report.best_val_rmse!r}", file=out)
    print(f"best_val_ccc={report.best_val_ccc!r}", file=out)


def cmd_eval(args, out, err):
    model, features, _ = load_checkpoint(args.ckpt)
    _emit_config(sorted(cfgtext.to_lines(model.cfg, "model.") + cfgtext.to_lines(features, "feature.")),
                 model.cfg.seed, err)
    corpus = load_features(load_corpus(args.corpus), features, args.threads)
    print(evaluate_split(model, corpus, args.split).to_text(), end="", file=out)


def cmd_predict(args, out, err):
    model, features, _ = load_checkpoint(args.ckpt)
    _emit_config(sorted(cfgtext.to_lines(features, "feature.")), model.cfg.seed, err)
    m = extract_mfcc(read_wav(args.wav), features)
    print(repr(float(model.predict([m.values])[0])), file=out)


def cmd_gradcheck(args, out, err):
    seed = 0 if args.seed is None else args.seed
    _emit_config([f"trials={args.trials}"], seed, err)
    results = run_gradcheck(args.trials, seed, progress=lambda r: print(r.line(), file=out, flush=True))
    if not all(r.passed for r in results):
        raise NumericError("gradcheck failed")
    print("gradcheck passed", file=out)


COMMANDS = {"extract": cmd_extract, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand")
        COMMANDS[args.command](args, out, err)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=err)
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    except (DataLoadError, InputError, OSError, StochformerError) as exc:
        print(f"data error: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
