"""Command line entry point: ``ttts corpus|train|synth|eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import generate_toy_corpus, load_manifest, save_manifest
from .errors import CheckpointError, ConfigurationError, InputError, RegistryError, UnsupportedOperationError
from .synth import SYSTEMS, evaluate_checkpoint, synthesize_cli
from .trainer import Trainer, load_config


def _corpus_generate(args) -> int:
    manifest = generate_toy_corpus(args.utts_per_speaker, seed=args.seed, n_mels=args.n_mels)
    path = save_manifest(manifest, args.out)
    print(f"wrote {len(manifest.utterances)} utterances to {path}")
    return 0


def _train(args) -> int:
    config = load_config(args.config, stage=args.stage, max_steps=args.max_steps, seed=args.seed)
    manifest = load_manifest(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"stage{config.stage}.ckpt"
    log_path = out / f"stage{config.stage}.jsonl"
    trainer = Trainer(config, manifest, init=args.init, resume=args.resume)
    result = trainer.run(log_path=log_path, checkpoint_path=ckpt_path,
                         measure_triplet_start=config.stage == 2)
    summary = {"stage": config.stage, "steps": trainer.step_count, "stop_reason": result.stop_reason,
               "checkpoint": str(ckpt_path), "log": str(log_path)}
    if result.triplet_start is not None:
        summary["triplet_start"] = result.triplet_start
    print(json.dumps(summary, sort_keys=True))
    return 0


def _synth(args) -> int:
    result = synthesize_cli(args.text, args.speaker, args.system, args.checkpoint, args.out, args.language)
    print(json.dumps(result.metadata(), sort_keys=True))
    return 0


def _eval(args) -> int:
    manifest = load_manifest(args.corpus)
    report = evaluate_checkpoint(args.checkpoint, manifest, args.test_set, args.seed, args.system)
    print(report.to_table())
    if args.records:
        with open(args.records, "w") as fh:
            for rec in report.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="toy corpus tools")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    gen = corpus_sub.add_parser("generate", help="write a seeded toy corpus")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--utts-per-speaker", type=int, default=200)
    gen.add_argument("--n-mels", type=int, default=80)
    gen.set_defaults(func=_corpus_generate)

    train = sub.add_parser("train", help="run one training stage")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--config", required=True, help="flat TOML file with TrainConfig keys")
    train.add_argument("--corpus", required=True, help="corpus directory or corpus.jsonl")
    train.add_argument("--init", help="stage-I checkpoint to start stage II from")
    train.add_argument("--resume", help="checkpoint of an interrupted run of the same stage")
    train.add_argument("--out", default="runs", help="directory for the checkpoint and loss log")
    train.add_argument("--max-steps", type=int)
    train.add_argument("--seed", type=int)
    train.set_defaults(func=_train)

    synth = sub.add_parser("synth", help="synthesize one utterance")
    synth.add_argument("--checkpoint", required=True)
    synth.add_argument("--text", required=True, help="space-separated phoneme symbols")
    synth.add_argument("--speaker", required=True)
    synth.add_argument("--system", choices=SYSTEMS, default="base")
    synth.add_argument("--language")
    synth.add_argument("--out", required=True, help="output stem; writes .mel and .json")
    synth.set_defaults(func=_synth)

    ev = sub.add_parser("eval", help="score held-out synthesis")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--test-set", choices=("inter_lan", "intra_lan"), default="inter_lan")
    ev.add_argument("--system", choices=SYSTEMS, default="base")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--records", help="write per-utterance JSON lines here")
    ev.set_defaults(func=_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError, InputError, RegistryError, UnsupportedOperationError,
            FileNotFoundError) as exc:
        print(f"ttts: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
