"""Command-line front end: ``dehubert <command> [options]``.

Every command accepts ``--seed``, ``--config`` and ``--out``; outputs land
at fixed paths under ``--out``. Exit status is 0 on success, 1 on a usage
error and 2 when the command itself fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import audio, evaluation, features, training, units
from .audio import load_corpus, read_noise_manifest
from .correlation import write_grad_report
from .model import ModelConfig, ModelError
from .training import TrainConfig

SYNOPSIS = """\
usage: dehubert <command> [--seed N] [--config FILE] [--out DIR] [options]

commands:
  mix                write noisy twin pairs for every utterance
  units              MFCC features + K-means codebook (or a layer-tap refresh)
  pretrain           train the encoder, writing checkpoints and metrics.jsonl
  eval               noise probe on pooled bottleneck features
  grad-check         finite-difference check of the training objective
  export-embeddings  pooled bottleneck features as CSV
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dehubert", add_help=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("mix", add_help=False)
    _common(p)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--noise-bank", type=Path)

    p = sub.add_parser("units", add_help=False)
    _common(p)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--layer", type=int, default=None, help="refresh from this transformer layer")
    p.add_argument("--checkpoint", type=Path, default=None)

    p = sub.add_parser("pretrain", add_help=False)
    _common(p)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--noise-bank", type=Path)
    p.add_argument("--codebook", type=Path)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--resume", type=Path, default=None)

    for name in ("eval", "export-embeddings"):
        p = sub.add_parser(name, add_help=False)
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--corpus", type=Path)
        p.add_argument("--noise-bank", type=Path)
        p.add_argument("--snr", type=float, default=0.0)
        p.add_argument("--limit", type=int, default=None, help="use the first N utterances")
        if name == "eval":
            p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("grad-check", add_help=False)
    _common(p)
    p.add_argument("--trials", type=int, default=32)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--loss", choices=("cc", "sc", "total", "all"), default="all")
    return parser


# ---------------------------------------------------------------------------


def _configs(args):
    if args.config is not None:
        model_cfg, train_cfg, data = training.load_config(args.config)
    else:
        model_cfg, train_cfg, data = ModelConfig(), TrainConfig(), {}
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    return model_cfg, train_cfg, data


def _path(args, data, flag, key):
    value = getattr(args, flag, None)
    if value is None and key in data:
        value = Path(data[key])
    if value is None:
        raise UsageError(f"--{flag.replace('_', '-')} is required (or data.{key} in the config)")
    return value


def cmd_mix(args):
    model_cfg, tcfg, data = _configs(args)
    utts = load_corpus(_path(args, data, "corpus", "corpus"))
    bank = read_noise_manifest(_path(args, data, "noise_bank", "noise_bank"))
    out = args.out / "mix"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for uid, w in utts:
        pair = audio.make_augmented_pair(w, bank, tcfg.snr_range,
                                         audio.utterance_rng(tcfg.seed, uid, training.STREAM_AUGMENT))
        audio.save_wav(out / f"{uid}_a.wav", pair.noisy_a)
        audio.save_wav(out / f"{uid}_b.wav", pair.noisy_b)
        rows.append(f"{uid}\t{pair.noise_a_id}\t{pair.snr_a_db!r}\t{pair.noise_b_id}\t{pair.snr_b_db!r}\n")
    (out / "pairs.tsv").write_text("".join(rows), encoding="utf-8")
    return 0


def cmd_units(args):
    model_cfg, tcfg, data = _configs(args)
    utts = load_corpus(_path(args, data, "corpus", "corpus"))
    K = args.k if args.k is not None else model_cfg.K
    rng = np.random.default_rng([tcfg.seed, 11])
    out = args.out / "units"
    if args.layer is not None:
        if args.checkpoint is None:
            raise UsageError("--layer needs --checkpoint")
        state = training.load_checkpoint(args.checkpoint)
        cb = units.refresh_units(state.params, state.model_cfg, args.layer, [w for _, w in utts], K, rng,
                                 max_iters=args.max_iters)
    else:
        fc = training.feature_config_for(model_cfg)
        feats = [features.mfcc(w, fc) for _, w in utts]
        (out / "features").mkdir(parents=True, exist_ok=True)
        for (uid, _), f in zip(utts, feats):
            features.save_features(out / "features" / f"{uid}.dhft", f)
        cb = units.fit_kmeans(feats, K, rng, max_iters=args.max_iters)
    out.mkdir(parents=True, exist_ok=True)
    units.save_codebook(out / "codebook.dhcb", cb)
    (out / "inertia.json").write_text(json.dumps(list(cb.inertia)) + "\n", encoding="utf-8")
    return 0


def cmd_pretrain(args):
    model_cfg, tcfg, data = _configs(args)
    overrides = {k: getattr(args, k) for k in ("steps", "lr", "alpha", "beta") if getattr(args, k) is not None}
    tcfg = dataclasses.replace(tcfg, **overrides)
    utts = load_corpus(_path(args, data, "corpus", "corpus"))
    bank = read_noise_manifest(_path(args, data, "noise_bank", "noise_bank"))
    cb = units.load_codebook(_path(args, data, "codebook", "codebook"))
    examples = training.make_examples(utts, cb, training.feature_config_for(model_cfg))
    resume = None
    if args.resume is not None:
        resume = training.load_checkpoint(args.resume)
        resume.train_cfg = dataclasses.replace(resume.train_cfg, steps=tcfg.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(training.dump_config(model_cfg, tcfg, data), encoding="utf-8")
    training.pretrain(model_cfg, tcfg, examples, bank, args.out, resume=resume)
    return 0


def _embeddings(args):
    _, tcfg, data = _configs(args)
    state = training.load_checkpoint(args.checkpoint)
    utts = load_corpus(_path(args, data, "corpus", "corpus"))
    if args.limit is not None:
        utts = utts[: args.limit]
    bank = read_noise_manifest(_path(args, data, "noise_bank", "noise_bank"))
    return evaluation.embed_noisy(state.params, state.model_cfg, utts, bank, args.snr, tcfg.seed)


def cmd_eval(args):
    embs = _embeddings(args)
    out = args.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_probe_report(out / "probe.json", evaluation.probe_report(embs, args.k))
    return 0


def cmd_export(args):
    embs = _embeddings(args)
    args.out.mkdir(parents=True, exist_ok=True)
    evaluation.export_embeddings(embs, args.out / "embeddings.csv")
    return 0


def cmd_grad_check(args):
    from .experiment import GRAD_CHECK_MODEL, objective_grad_check

    model_cfg = training.load_config(args.config)[0] if args.config is not None else GRAD_CHECK_MODEL
    seed = args.seed if args.seed is not None else 0
    losses = ("cc", "sc", "total") if args.loss == "all" else (args.loss,)
    report = []
    for loss in losses:
        report += objective_grad_check(loss, args.trials, args.step, model_cfg, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_grad_report(args.out / "grad_check.jsonl", report)
    worst = max(p.rel_err for p in report)
    print(f"{len(report)} probes, max relative error {worst:.3e} (tol {args.tol:g})")
    return 0 if worst < args.tol else 2


COMMANDS = {"mix": cmd_mix, "units": cmd_units, "pretrain": cmd_pretrain, "eval": cmd_eval,
            "export-embeddings": cmd_export, "grad-check": cmd_grad_check}

RUNTIME_ERRORS = (audio.AudioError, features.FeatureError, units.UnitsError, training.TrainingError,
                  evaluation.EvaluationError, ModelError, OSError, ValueError)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        return COMMANDS[args.command](args)
    except (UsageError, training.ConfigError) as exc:
        print(f"dehubert: {exc}\n\n{SYNOPSIS}", file=sys.stderr, end="")
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"dehubert: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
