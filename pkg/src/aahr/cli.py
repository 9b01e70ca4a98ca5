"""Command-line front end: synth / train / embed / evaluate.

Exit codes: 0 success, 2 bad configuration or flags, 3 missing or malformed
input files, 4 numeric failure during training.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import metrics, tensorio, trainer
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    NumericError,
    ProtocolError,
    TrainingError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aahr",
        description="Multi-granularity image-text matching over precomputed "
        "or synthetic features: training, embedding, and retrieval evaluation.",
        epilog="exit codes: 0 ok, 2 bad config, 3 missing files, 4 numeric failure",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True,
                         help="path to a SynthSpec JSON file, or 'default'")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--split", default="train",
                         help="split name; same seed + different split shares concepts")
    p_synth.add_argument("--pairs-per-concept", type=int, default=None,
                         help="override the spec's pairs_per_concept")
    p_synth.add_argument("--seed", type=int, default=None, help="override the spec's seed")

    p_train = sub.add_parser("train", help="train on a manifest")
    p_train.add_argument("--config", required=True,
                         help="TOML/JSON config file, or a profile name "
                         "(synthetic, flickr, coco)")
    p_train.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p_train.add_argument("--out", required=True, help="run directory (checkpoint + log)")
    p_train.add_argument("--epochs", type=int, default=None, help="override epochs")
    p_train.add_argument("--num-prototypes", type=int, default=None,
                         help="override prototype count")

    p_embed = sub.add_parser("embed", help="write base embeddings for a manifest")
    p_embed.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_embed.add_argument("--manifest", required=True)
    p_embed.add_argument("--out", required=True, help="embedding output directory")

    p_eval = sub.add_parser("evaluate", help="retrieval metrics from embeddings")
    p_eval.add_argument("--embeddings", required=True, help="directory written by embed")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", default=None,
                        help="report JSON path (default: <embeddings>/report.json)")
    return parser


def _load_spec(args) -> tensorio.SynthSpec:
    if args.spec == "default":
        spec = tensorio.SynthSpec()
    else:
        path = Path(args.spec)
        if not path.exists():
            raise DatasetError(f"spec file {path} does not exist")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        known = set(tensorio.SynthSpec.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        try:
            spec = tensorio.SynthSpec(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad spec value: {exc}") from exc
    if args.pairs_per_concept is not None:
        spec.pairs_per_concept = args.pairs_per_concept
    if args.seed is not None:
        spec.seed = args.seed
    try:
        spec.validate()
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def cmd_synth(args) -> int:
    spec = _load_spec(args)
    manifest = tensorio.generate_synthetic(spec, args.out, split=args.split)
    print(f"wrote {len(manifest.pairs)} pairs to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _load_train_config(args) -> trainer.TrainConfig:
    if args.config in trainer.PROFILES:
        config = trainer.config_from_dict({"profile": args.config})
    else:
        path = Path(args.config)
        if not path.exists():
            raise DatasetError(f"config file {path} does not exist")
        config = trainer.load_config(path)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "num_prototypes", None) is not None:
        overrides["num_prototypes"] = args.num_prototypes
    if overrides:
        config = trainer.config_from_dict({**asdict(config), **overrides})
    return config


def cmd_train(args) -> int:
    config = _load_train_config(args)
    manifest = tensorio.load_manifest(args.manifest)
    ckpt = trainer.train(config, manifest, args.out, log_stream=sys.stdout)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_embed(args) -> int:
    state = trainer.load_checkpoint(args.checkpoint)
    manifest = tensorio.load_manifest(args.manifest)
    index = trainer.embed(state, manifest, args.out)
    print(f"embeddings written to {index}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = tensorio.load_manifest(args.manifest)
    img, txt, image_ids, caption_ids = trainer.load_embeddings(args.embeddings)
    result = metrics.evaluate(img, txt, image_ids, caption_ids, manifest.image_to_captions)
    print(result.format_table())
    out = Path(args.out) if args.out else Path(args.embeddings) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    print(f"report written to {out}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 0 for --help, 2 for bad flags
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FormatError, FileNotFoundError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
