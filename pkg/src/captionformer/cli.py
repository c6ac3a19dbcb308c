"""
Command-line entry point.

Results go to stdout, progress logs to stderr.  Exit codes: 0 success,
1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, decoding, metrics, text, training
from . import tensor as tc
from .errors import CaptionError
from .transformer import ModelConfig, encode, init_params

log = logging.getLogger("captionformer")

GRADCHECK_TOL = 1e-6

DEFAULT_MODEL = {"d_model": 128, "n_heads": 8, "n_enc_layers": 2, "n_dec_layers": 2,
                 "d_ff": 512, "dropout_p": 0.1, "max_len": 64, "embed_dropout": True}
GRADCHECK_MODEL = {"vocab_size": 10, "feature_dim": 8, "d_model": 16, "n_heads": 8,
                   "n_enc_layers": 1, "n_dec_layers": 1, "d_ff": 32, "dropout_p": 0.1, "max_len": 16}


class InputError(CaptionError):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict) or not set(cfg) <= {"model", "train"}:
        raise InputError(f"config {path} must be an object with 'model' and/or 'train' sections")
    return cfg


def resolve_run_config(args, vocab_size: int, feature_dim: int) -> tuple:
    """Merge defaults < config file < command-line flags."""
    cfg = _read_config(args.config)
    model = dict(DEFAULT_MODEL, **cfg.get("model", {}))
    model.update(vocab_size=vocab_size)
    model.setdefault("feature_dim", feature_dim)
    train = dict(training.TrainConfig().to_dict(), **cfg.get("train", {}))
    for flag, key in (("max_steps", "max_steps"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("lr_base", "lr_base"), ("checkpoint_every", "checkpoint_every")):
        val = getattr(args, flag, None)
        if val is not None:
            train[key] = val
    try:
        return ModelConfig.from_dict(model), training.TrainConfig.from_dict(train)
    except TypeError as exc:
        raise InputError(f"unknown config field: {exc}") from None


def _corpus_tokens(captions):
    return [text.normalize_and_tokenize(c) for c in captions]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    man = data.synth_dataset(args.out_dir, n_images=args.n, S=args.grid, feature_dim=args.feature_dim,
                             vocab_size_tokens=args.vocab_tokens, seed=args.seed)
    print(json.dumps({"manifest": str(Path(args.out_dir) / "manifest.jsonl"), "images": len(man)}))
    return 0


def cmd_build_vocab(args) -> int:
    man = data.load_manifest(args.manifest)
    vocab = text.build_vocab(_corpus_tokens(c for r in man for c in r.captions), args.min_freq)
    vocab.save(args.out)
    print(len(vocab))
    return 0


def cmd_train(args) -> int:
    man = data.load_manifest(args.manifest)
    vocab = text.Vocab.load(args.vocab)
    if not len(man):
        raise InputError("manifest is empty")
    first = man.feature_file(man.records[0])
    if not first.exists():
        raise InputError(f"missing feature file {first}")
    feature_dim = data.read_feature_file(first).shape[1]
    model_cfg, train_cfg = resolve_run_config(args, len(vocab), feature_dim)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
            "paths": {"manifest": str(args.manifest), "vocab": str(args.vocab), "out_dir": str(out)}}
    (out / "config.lock.json").write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n")

    def report(step, loss):
        log.info("step %d loss %.6f", step, loss)

    ckpt, curve = training.train(man, vocab, model_cfg, train_cfg, out_dir=out, on_step=report)
    print(json.dumps({"checkpoint": str(out / "last.capc"), "steps": ckpt.step,
                      "final_loss": curve[-1][1] if curve else None}))
    return 0


def _load_model(path):
    ckpt = training.load_checkpoint(path)
    return ckpt.model_config, ckpt.param_tensors()


def _caption_ids(feats, params, cfg, beam, max_len, alpha):
    with tc.no_grad():
        memory = encode(feats, params, cfg, "eval")
    if beam is None or beam <= 1:
        return decoding.greedy_decode(memory, params, cfg, max_len)
    return decoding.beam_search(memory, params, cfg, beam, max_len, alpha)


def cmd_caption(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    vocab = text.Vocab.load(args.vocab)
    feats = data.read_feature_file(args.features)
    ids = _caption_ids(feats, params, cfg, args.beam, args.max_len, args.alpha)
    print(text.decode(ids, vocab))
    return 0


def _pairs_corpus(path):
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cand, refs = obj["candidate"], obj["references"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad pair record ({exc})") from None
            corpus.append((text.normalize_and_tokenize(cand), _corpus_tokens(refs)))
    return corpus


def cmd_evaluate(args) -> int:
    if args.pairs:
        corpus = _pairs_corpus(args.pairs)
    elif args.checkpoint and args.manifest and args.vocab:
        cfg, params = _load_model(args.checkpoint)
        vocab = text.Vocab.load(args.vocab)
        man = data.load_manifest(args.manifest)
        corpus = []
        for rec in man:
            feats = data.read_feature_file(man.feature_file(rec))
            ids = _caption_ids(feats, params, cfg, args.beam, args.max_len, args.alpha)
            cand = text.normalize_and_tokenize(text.decode(ids, vocab))
            corpus.append((cand, _corpus_tokens(rec.captions)))
    else:
        raise InputError("evaluate needs --pairs, or --checkpoint with --manifest and --vocab")
    report = metrics.evaluate(corpus)
    if args.out_dir:
        report.write(args.out_dir)
    print(report.to_json())
    return 0


def gradcheck_setup(model_overrides: dict, seed: int):
    """Tiny model plus a fixed random batch; returns ``(loss_fn, params)``."""
    cfg = ModelConfig.from_dict(dict(GRADCHECK_MODEL, **model_overrides))
    rng = tc.rng_for(seed, 7)
    params = init_params(cfg, rng)
    feats = rng.standard_normal((2, 4, cfg.feature_dim))
    T = min(6, cfg.max_len)
    inputs = rng.integers(text.N_RESERVED, cfg.vocab_size, size=(2, T))
    inputs[:, 0] = text.BOS
    targets = np.concatenate([inputs[:, 1:], np.full((2, 1), text.EOS)], axis=1)
    batch = (feats, inputs, targets)
    return (lambda: training.batch_loss(params, cfg, batch, "eval")), list(params.values())


def cmd_gradcheck(args) -> int:
    overrides = _read_config(args.config).get("model", {})
    loss_fn, params = gradcheck_setup(overrides, args.seed)
    if args.corrupt_backward:
        with tc.corrupted_backward():
            err = tc.grad_check(loss_fn, params, h=args.h)
    else:
        err = tc.grad_check(loss_fn, params, h=args.h)
    print(f"gradcheck max_rel_err={err!r}")
    return 0 if err < GRADCHECK_TOL else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="captionformer", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic captioning dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=4, help="feature rows per image")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--vocab-tokens", type=int, default=12)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from manifest captions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-base", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("caption", cmd_caption, "caption one CAPF feature file"),
                                 ("evaluate", cmd_evaluate, "score captions")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=name == "caption")
        p.add_argument("--vocab", required=name == "caption")
        p.add_argument("--beam", type=int, default=1)
        p.add_argument("--max-len", type=int)
        p.add_argument("--alpha", type=float, default=0.7)
        p.set_defaults(func=func)
        if name == "caption":
            p.add_argument("--features", required=True)
        else:
            p.add_argument("--pairs")
            p.add_argument("--manifest")
            p.add_argument("--out-dir")

    p = sub.add_parser("gradcheck", help="compare autodiff with finite differences")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CaptionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
