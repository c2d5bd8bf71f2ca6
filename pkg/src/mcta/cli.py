"""Command-line entry point: ``mcta <subcommand> ...``.

Settings are layered: built-in defaults (optionally a preset), then a flat
``key = value`` config file, then command-line flags and ``--set`` pairs.
Keys are dotted paths into the effective configuration, e.g.
``model.hidden_channels`` or ``train.epochs``; ``mcta params --dump`` lists
them all.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mcta import __version__
from mcta.augment import AugmentationError, AugmentSpec, write_augmented
from mcta.autograd.gradcheck import OP_CHECKS, run_op_checks
from mcta.config import apply_overrides, dump_config, flatten, format_value, read_config_file
from mcta.data import SynthSpec, import_dcase, import_esc, load_manifest, save_manifest, synth_dataset
from mcta.errors import MctaError
from mcta.features import FeatureConfig
from mcta.model import AttentionMode, ModelConfig, desk_config, load_checkpoint, model_gradcheck, param_table, toy_config
from mcta.train import (
    TrainConfig,
    ablation,
    attention_diversity,
    attention_dump,
    cross_validate,
    extract_features,
    load_feature_set,
    write_attention_csv,
    write_json,
)

log = logging.getLogger("mcta")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
CACHE_ENV = "MCTA_CACHE_DIR"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    synth: SynthSpec = field(default_factory=SynthSpec)


PRESETS = {
    "default": lambda: RunConfig(),
    "desk": lambda: RunConfig(model=desk_config(), train=TrainConfig(epochs=15, repeats=3)),
}


class UsageError(MctaError, ValueError):
    pass


def _parse_set(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def effective_config(args, flags: dict[str, object]) -> tuple[RunConfig, set[str]]:
    """Merge preset < config file < flags; returns the config and the keys set explicitly."""
    config = PRESETS[args.preset]()
    explicit: set[str] = set()
    if args.config:
        values = read_config_file(args.config)
        config = apply_overrides(config, values)
        explicit |= set(values)
    given = {k: v for k, v in flags.items() if v is not None}
    given.update(_parse_set(args.set))
    config = apply_overrides(config, given)
    explicit |= set(given)
    return config, explicit


def _folds(text: str | None):
    if text is None:
        return None
    try:
        return tuple(int(f) for f in text.split(",") if f.strip())
    except ValueError:
        raise UsageError(f"folds must be comma-separated integers, got {text!r}") from None


def _cache_dir(args, manifest_path) -> Path:
    if getattr(args, "cache_dir", None):
        return Path(args.cache_dir)
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path(manifest_path).parent / ".mcta-cache"


def _echo(config: RunConfig) -> dict[str, str]:
    return {k: format_value(v) for k, v in flatten(config).items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config, _ = effective_config(
        args,
        {
            "synth.seed": args.seed,
            "synth.num_classes": args.classes,
            "synth.clips_per_class": args.clips_per_class,
            "synth.clip_seconds": args.seconds,
            "synth.sample_rate": args.sample_rate,
        },
    )
    out = Path(args.out)
    if (out / "manifest.csv").exists() and not args.force:
        print(f"{out / 'manifest.csv'} already exists; use --force to regenerate")
        return EXIT_OK
    manifest = synth_dataset(config.synth, out)
    print(f"wrote {len(manifest)} clips to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    root = Path(args.root)
    if args.layout == "dcase":
        manifest, classes = import_dcase(root)
    else:
        manifest = import_esc(root, esc10=args.layout == "esc10")
        classes = None
    out = Path(args.out) if args.out else root / "manifest.csv"
    if out.resolve().parent != root.resolve():
        # keep paths valid relative to the new manifest location
        manifest = manifest.subset([dataclasses.replace(r, path=str((root / r.path).resolve())) for r in manifest])
    save_manifest(manifest, out)
    load_manifest(out, folds=manifest.folds)
    print(f"{len(manifest)} clips in folds {manifest.fold_ids()} -> {out}")
    if classes:
        print("classes: " + ", ".join(f"{i}={c}" for i, c in enumerate(classes)))
    return EXIT_OK


def cmd_features(args) -> int:
    config, _ = effective_config(args, {})
    manifest = load_manifest(args.manifest)
    cache = _cache_dir(args, args.manifest)
    feats, hits = extract_features(manifest, cache, config.features, args.jobs)
    shapes = sorted({f.data.shape for f in feats})
    print(f"{len(feats)} clips, {hits} cache hits, {len(feats) - hits} extracted into {cache}; shapes {shapes}")
    return EXIT_OK


def cmd_augment(args) -> int:
    config, _ = effective_config(args, {"augment.seed": args.seed, "augment.integer_pitch": True if args.integer_pitch else None})
    manifest = load_manifest(args.manifest)
    expanded = write_augmented(manifest, config.augment, args.out, _folds(args.folds), args.jobs)
    print(f"{len(manifest.originals())} originals -> {len(expanded)} rows; manifest at {Path(args.out) / 'augmented.csv'}")
    return EXIT_OK


def _train_flags(args) -> dict[str, object]:
    return {
        "train.epochs": args.epochs,
        "train.repeats": args.repeats,
        "train.batch_size": args.batch_size,
        "train.lr_init": args.lr,
        "train.seed": args.seed,
        "train.folds": _folds(args.folds),
    }


def _prepare(args, flags):
    config, explicit = effective_config(args, flags)
    manifest = load_manifest(args.manifest)
    data = load_feature_set(manifest, _cache_dir(args, args.manifest), config.features, args.jobs)
    if "model.num_classes" not in explicit:
        config = dataclasses.replace(config, model=apply_overrides(config.model, {"num_classes": max(2, int(data.labels.max()) + 1)}))
    return config, data


def cmd_train(args) -> int:
    flags = _train_flags(args)
    flags["model.attention_mode"] = args.mode
    config, data = _prepare(args, flags)
    report = cross_validate(data, config.model, config.train, args.jobs, args.checkpoint_dir)
    payload = {"effective_config": _echo(config), "report": report.to_dict()}
    write_json(payload, args.out)
    print(f"{report.mode}: {100 * report.mean_accuracy:.2f} +/- {100 * report.std_accuracy:.2f}% over {len(report.runs)} runs; report at {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    modes = [AttentionMode(m.strip()) for m in args.modes.split(",") if m.strip()]
    config, data = _prepare(args, _train_flags(args))
    result = ablation(data, config.model, config.train, modes, args.jobs, args.checkpoint_dir)
    payload = {"effective_config": _echo(config), **result.to_dict()}
    write_json(payload, args.out)
    for row in result.table():
        print(f"{row['mode']:>7}: {100 * row['mean_accuracy']:.2f} +/- {100 * row['std_accuracy']:.2f}%  params={row['param_count']}")
    return EXIT_OK


def cmd_attention_dump(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    config, _ = effective_config(args, {})
    manifest = load_manifest(args.manifest)
    if args.clips:
        wanted = [c.strip() for c in args.clips.split(",") if c.strip()]
        index = manifest.by_id()
        missing = [c for c in wanted if c not in index]
        if missing:
            raise UsageError(f"clip ids not in manifest: {', '.join(missing)}")
        rows = [index[c] for c in wanted]
    else:
        originals = manifest.originals()
        rng = np.random.default_rng(args.seed)
        rows = [originals[i] for i in sorted(rng.choice(len(originals), size=min(args.count, len(originals)), replace=False))]
    data = load_feature_set(manifest.subset(rows), _cache_dir(args, args.manifest), config.features)
    dump = attention_dump(model, data, args.channels, args.seed)
    write_attention_csv(dump, args.out)
    cos = attention_diversity(model, data, args.channels, args.seed)
    print(f"wrote {len(dump)} rows for {len(data)} clips to {args.out}; mean pairwise channel cosine {cos.mean():.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(OP_CHECKS) if args.ops in ("all", "") else [n.strip() for n in args.ops.split(",")]
    unknown = [n for n in names if n not in OP_CHECKS]
    if unknown:
        raise UsageError(f"unknown ops {unknown}; choose from {', '.join(OP_CHECKS)}")
    results = run_op_checks(names, args.points, args.seed)
    failed = False
    for name, err in results.items():
        ok = err < OP_TOLERANCE
        failed |= not ok
        print(f"{name:>24}  max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    if args.model:
        for mode in AttentionMode:
            err = max(model_gradcheck(toy_config(mode), points=args.points, seed=args.seed).values())
            ok = err < MODEL_TOLERANCE
            failed |= not ok
            print(f"{'model/' + mode.value:>24}  max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_params(args) -> int:
    config, _ = effective_config(args, {"model.attention_mode": args.mode, "model.num_classes": args.num_classes})
    if args.dump:
        sys.stdout.write(dump_config(config))
        return EXIT_OK
    table = param_table(config.model)
    total = sum(n for _, _, n in table)
    if args.json:
        print(json.dumps({"total": total, "layers": [{"name": n, "shape": list(s), "count": c} for n, s, c in table]}, indent=2))
        return EXIT_OK
    for name, shape, count in table:
        print(f"{name:<28} {'x'.join(map(str, shape)):>16} {count:>10}")
    print(f"{'total':<28} {'':>16} {total:>10}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="default", help="base defaults before the config file")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mcta", description="Multi-channel temporal attention sound classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--clips-per-class", type=int)
    p.add_argument("--seconds", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--force", action="store_true", help="regenerate even if the dataset exists")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", parents=[common], help="write a manifest for an ESC-50/ESC-10 or DCASE tree")
    p.add_argument("--layout", choices=["esc50", "esc10", "dcase"], required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--out", help="manifest path (default: <root>/manifest.csv)")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("features", parents=[common], help="extract and cache features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("augment", parents=[common], help="write time-shift, pitch-shift and noise variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", help="only expand originals in these folds (comma-separated)")
    p.add_argument("--integer-pitch", action="store_true", help="draw whole-semitone pitch shifts")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_augment)

    for name, func, help_text in (("train", cmd_train, "cross-validate one attention mode"), ("ablate", cmd_ablate, "cross-validate several attention modes")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="report JSON path")
        p.add_argument("--epochs", type=int)
        p.add_argument("--repeats", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", help="held-out folds to evaluate (comma-separated)")
        p.add_argument("--cache-dir")
        p.add_argument("--checkpoint-dir")
        p.add_argument("--jobs", type=int, default=1)
        if name == "train":
            p.add_argument("--mode", choices=[m.value for m in AttentionMode])
        else:
            p.add_argument("--modes", default="mcta,single,none")
        p.set_defaults(func=func)

    p = sub.add_parser("attention-dump", parents=[common], help="export attention vectors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--clips", help="comma-separated clip ids (default: --count random originals)")
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--channels", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attention_dump)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", default="all")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", action="store_true", help="also check the full toy model in every mode")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", parents=[common], help="parameter count and per-layer table")
    p.add_argument("--mode", choices=[m.value for m in AttentionMode])
    p.add_argument("--num-classes", type=int)
    p.add_argument("--json", action="store_true")
    p.add_argument("--dump", action="store_true", help="print the effective config instead")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AugmentationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # ParseError, InvalidInputError, DimensionError and bad enum values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, MctaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
