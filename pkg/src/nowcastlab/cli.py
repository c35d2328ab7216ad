"""Command-line entry point: ``nowcastlab <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 corrupt data or checkpoint,
4 training divergence.

Every subcommand also reads an optional INI config file (``--config``).
Keys live in a section named after the subcommand (or ``[common]``) and use
the long flag name with dashes or underscores; command-line flags win.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import Variable, denormalize_array
from .exceptions import CorruptDatasetError, NowcastError, TrainingDivergedError
from .models import REFERENCE_PARAMETER_COUNTS, VARIANT_NAMES, ModelConfig, ModelVariant, build_model, count_parameters

log = logging.getLogger("nowcastlab")

EXIT_OK, EXIT_USAGE, EXIT_CORRUPT, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise UsageError(f"{out} already exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _train_config(args, **overrides):
    from .training import TrainConfig

    kw = dict(
        lr_init=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed,
        plateau_patience=args.plateau_patience, early_stop_patience=args.early_stop_patience,
        target_val_mse=args.target_val_mse,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def _load_splits(data_dir, *names):
    from .pipeline import read_dataset, read_manifest

    manifest = read_manifest(_existing(data_dir, "dataset"))
    missing = [n for n in names if n not in manifest.counts]
    if missing:
        raise UsageError(f"dataset {data_dir} has no split(s) {missing}; run preprocess first")
    splits, manifest = read_dataset(data_dir, names)
    for n in names:
        if not splits[n]:
            raise UsageError(f"split {n!r} of {data_dir} is empty")
    return splits, manifest


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .pipeline import DatasetManifest, SyntheticConfig, make_samples, synth_generate, write_dataset

    cfg = SyntheticConfig(seed=args.seed, n_sequences=args.n_sequences, size=tuple(args.size),
                          frames_per_sequence=args.frames)
    out = _prepare_out(args.out, args.force)
    samples, skipped = make_samples(synth_generate(cfg))
    manifest = DatasetManifest(seed=args.seed, step_hours=cfg.step_hours, synthetic=cfg.to_dict())
    write_dataset({"all": samples}, manifest, out)
    print(f"wrote {len(samples)} samples from {cfg.n_sequences} sequences to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .pipeline import (
        FilterRule,
        apply_sample_filter,
        compute_stats,
        normalize_samples,
        split_train_test,
        split_validation,
        write_dataset,
    )

    splits, manifest = _load_splits(args.data, "all")
    samples = splits["all"]
    rule = FilterRule(args.pixel_threshold, args.min_fraction)
    kept, fstats = apply_sample_filter(samples, rule)
    if not kept:
        raise UsageError("the filter removed every sample")
    split_hour = args.split_hour
    if split_hour is None:
        # first sequence start after the train fraction of the timeline
        starts = sorted(manifest.sequence_start_hours.values())
        split_hour = starts[min(len(starts) - 1, int(math.ceil(len(starts) * args.train_fraction)))]
    train, test = split_train_test(kept, split_hour)
    train, val = split_validation(train, args.val_fraction)
    if not (train and val and test):
        raise UsageError(f"split at hour {split_hour} leaves an empty split "
                         f"(train {len(train)}, val {len(val)}, test {len(test)})")
    stats = compute_stats(train)
    out = _prepare_out(args.out, args.force)
    manifest.stats = stats
    manifest.filter_rule = rule
    manifest.filter_stats = {"total": fstats.total, "retained": fstats.retained, "fraction": fstats.fraction,
                             "split_hour": split_hour}
    manifest.normalized = True
    write_dataset({n: normalize_samples(s, stats) for n, s in (("train", train), ("val", val), ("test", test))},
                  manifest, out)
    print(f"retained {fstats.retained}/{fstats.total} samples ({fstats.fraction:.1%}); "
          f"train {len(train)}, val {len(val)}, test {len(test)}")
    return EXIT_OK


def _size_of(manifest):
    return tuple(manifest.size)


def cmd_train(args) -> int:
    from .training import fit

    splits, manifest = _load_splits(args.data, "train", "val")
    out = _prepare_out(args.out, args.force)
    variant = ModelVariant(args.model)
    if not variant.trainable:
        raise UsageError(f"{variant.value} has no parameters to train")
    if args.pretrained_evo:
        _existing(args.pretrained_evo, "evolution checkpoint")
    model = build_model(ModelConfig(variant, input_size=_size_of(manifest)), seed=args.seed)
    cfg = _train_config(args, pretrained_evo=args.pretrained_evo, freeze_evo=args.freeze_evo)
    _, history = fit(model, splits["train"], splits["val"], cfg, out)
    best = history.epochs[history.best_epoch - 1]
    print(f"{variant.value}: {len(history.epochs)} epochs, best val MSE {best.val_mse:.6g} at epoch {best.epoch}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_pretrain_evo(args) -> int:
    from .training import pretrain_evolution

    splits, manifest = _load_splits(args.data, "train", "val")
    out = _prepare_out(args.out, args.force)
    _, history = pretrain_evolution(splits["train"], splits["val"], _train_config(args),
                                    input_size=_size_of(manifest), out_dir=out)
    best = history.epochs[history.best_epoch - 1]
    print(f"evo_net: best val MSE {best.val_mse:.6g} at epoch {best.epoch}; checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def _resolve_model(args, manifest):
    from .training import load_checkpoint

    if args.checkpoint:
        return load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if args.model == ModelVariant.PERSISTENCE.value:
        return build_model(ModelConfig(ModelVariant.PERSISTENCE, input_size=_size_of(manifest)))
    raise UsageError("--checkpoint is required (only --model persistence runs without one)")


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model, write_metrics

    if args.checkpoint:
        _existing(args.checkpoint, "checkpoint")
    splits, manifest = _load_splits(args.data, args.split)
    model = _resolve_model(args, manifest)
    out = _prepare_out(args.out, args.force)
    report = evaluate_model(model, splits[args.split], manifest.stats, threshold=args.threshold,
                            batch_size=args.batch_size)
    write_metrics(report, out)
    print(f"{report.model}: MSE {report.mse_total:.6g}  CSI {report.csi:.4f}  MCC {report.mcc:.4f}  -> {out}")
    return EXIT_OK


def _save_png(path, frames, title, vmax):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    for i, ax in enumerate(np.atleast_1d(axes)):
        ax.imshow(frames[i], cmap="Blues", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_title(f"{title} t{i + 1}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def cmd_predict(args) -> int:
    from .datamodel import Sample
    from .models import forward
    from .pipeline import DatasetManifest, write_dataset

    if args.checkpoint:
        _existing(args.checkpoint, "checkpoint")
    splits, manifest = _load_splits(args.data, args.split)
    samples = splits[args.split]
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample must be in [0, {len(samples) - 1}]")
    model = _resolve_model(args, manifest)
    out = _prepare_out(args.out, args.force)
    s = samples[args.sample]
    pred = forward(model, s)
    predicted = Sample(s.rain_in, pred, s.aux_in, s.sequence_id, s.window_start, s.start_hour, s.step_hours)
    pm = DatasetManifest(stats=manifest.stats, normalized=manifest.normalized, step_hours=manifest.step_hours,
                         seed=manifest.seed)
    write_dataset({"prediction": [predicted]}, pm, out)
    rain_stats = manifest.stats.get(Variable.RAIN)
    to_mm = (lambda a: denormalize_array(a, rain_stats)) if manifest.normalized and rain_stats else (lambda a: a)
    inputs, truth, fc = to_mm(s.rain_in), to_mm(s.rain_target), to_mm(pred)
    vmax = float(max(inputs.max(), truth.max(), fc.max(), 1e-6))
    _save_png(out / "input.png", inputs, "input", vmax)
    _save_png(out / "target.png", truth, "target", vmax)
    _save_png(out / "prediction.png", np.clip(fc, 0, None), model.variant.value, vmax)
    print(f"prediction for sample {args.sample} (sequence {s.sequence_id}, window {s.window_start}) -> {out}")
    return EXIT_OK


def format_params_table(variant: ModelVariant, size=(64, 64)) -> str:
    model = build_model(ModelConfig(variant, input_size=tuple(size)))
    total, breakdown = count_parameters(model)
    rows = [(name, n) for name, n in breakdown.items()]
    width = max([len("submodule")] + [len(r[0]) for r in rows])
    lines = [f"{'submodule':<{width}}  {'parameters':>12}", "-" * (width + 14)]
    lines += [f"{name:<{width}}  {n:>12,}" for name, n in rows]
    lines.append("-" * (width + 14))
    lines.append(f"{'total':<{width}}  {total:>12,}")
    ref = REFERENCE_PARAMETER_COUNTS.get(variant.value)
    if ref:
        lines.append(f"{'reference':<{width}}  {ref:>12,}  ({(total - ref) / ref:+.2%})")
    return "\n".join(lines)


def cmd_params(args) -> int:
    variant = ModelVariant(args.model)
    print(f"model: {variant.value}")
    print(format_params_table(variant, args.size))
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import comparison_table, plot_mse_per_step, read_metrics

    reports = {}
    for i, path in enumerate(args.metrics):
        rep = read_metrics(_existing(path, "metrics file"))
        name = args.names[i] if args.names and i < len(args.names) else (rep.model or Path(path).stem)
        if name in reports:
            name = f"{name} ({i + 1})"
        reports[name] = rep
    table = comparison_table(reports)
    print(table, end="")
    if args.out:
        out = _prepare_out(args.out, args.force)
        (out / "report.md").write_text(table, encoding="utf-8")
        plot_mse_per_step(reports, out / "mse_per_step.svg")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p, epochs):
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoint/ and history.csv")
    p.add_argument("--epochs", type=int, default=epochs, help="maximum epochs (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=16, help="mini-batch size (default %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (default %(default)s)")
    p.add_argument("--plateau-patience", type=int, default=5, help="epochs without improvement before lr x0.1")
    p.add_argument("--early-stop-patience", type=int, default=15, help="epochs without improvement before stopping")
    p.add_argument("--target-val-mse", type=float, default=None,
                   help="stop once validation MSE is at or below this value")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file; flags override its values")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default %(default)s)")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")

    parser = argparse.ArgumentParser(prog="nowcastlab", description="Precipitation nowcasting lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic raw dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-sequences", type=int, default=16, help="number of timelines (default %(default)s)")
    p.add_argument("--frames", type=int, default=12, help="frames per timeline (default %(default)s)")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"), help="grid size")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common], help="filter, split and normalize a raw dataset")
    p.add_argument("--data", required=True, help="raw dataset directory (split 'all')")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--pixel-threshold", type=float, default=0.1, help="wet-pixel threshold in mm/h (strict >)")
    p.add_argument("--min-fraction", type=float, default=0.2, help="minimum wet fraction of the last target frame")
    p.add_argument("--split-hour", type=float, default=None, help="train/test boundary in hours")
    p.add_argument("--train-fraction", type=float, default=0.8,
                   help="timeline fraction before the test split when --split-hour is absent")
    p.add_argument("--val-fraction", type=float, default=0.1, help="share of train sequences held out")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a model variant")
    p.add_argument("--model", required=True, choices=VARIANT_NAMES, help="model variant")
    _add_train_flags(p, 100)
    p.add_argument("--pretrained-evo", default=None, help="evolution checkpoint to initialize from")
    p.add_argument("--freeze-evo", action="store_true", help="keep the evolution network fixed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain-evo", parents=[common], help="train the stand-alone evolution network")
    _add_train_flags(p, 100)
    p.set_defaults(func=cmd_pretrain_evo)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--model", default=None, choices=[ModelVariant.PERSISTENCE.value],
                   help="evaluate a parameter-free baseline instead of a checkpoint")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--split", default="test", help="split to score (default %(default)s)")
    p.add_argument("--threshold", type=float, default=0.5, help="rain threshold in mm/h (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=16, help="inference batch size")
    p.add_argument("--out", required=True, help="output directory for metrics")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="forecast one sample and render it")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--model", default=None, choices=[ModelVariant.PERSISTENCE.value],
                   help="use a parameter-free baseline instead of a checkpoint")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--split", default="test", help="split holding the sample (default %(default)s)")
    p.add_argument("--sample", type=int, default=0, help="sample index within the split")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", parents=[common], help="print parameter counts per submodule")
    p.add_argument("--model", required=True, choices=VARIANT_NAMES, help="model variant")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"), help="input grid size")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("report", parents=[common], help="compare several metrics.json files")
    p.add_argument("--metrics", nargs="+", required=True, help="metrics.json files or evaluation directories")
    p.add_argument("--names", nargs="+", default=None, help="row labels, in --metrics order")
    p.add_argument("--out", default=None, help="directory for report.md and a combined SVG plot")
    p.set_defaults(func=cmd_report)
    return parser


def _config_value(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        value = configparser.ConfigParser.BOOLEAN_STATES.get(raw.strip().lower())
        if value is None:
            raise UsageError(f"{action.dest}: {raw!r} is not a boolean")
        return value
    convert = action.type or str
    try:
        if action.nargs in ("+", "*") or isinstance(action.nargs, int):
            return [convert(x) for x in raw.split()]
        return convert(raw)
    except ValueError as exc:
        raise UsageError(f"{action.dest}: cannot parse {raw!r}") from exc


def apply_config(parser: argparse.ArgumentParser, argv: list[str], args) -> argparse.Namespace:
    """Fill values from ``args.config`` for options not given on the command line."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(args.config, encoding="utf-8"):
            raise UsageError(f"config file {args.config} does not exist")
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file: {exc}") from exc
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions if a.option_strings and a.dest not in ("help", "config")}
    given = {a.dest for a in actions.values() if any(o in argv or any(x.startswith(o + "=") for x in argv)
                                                    for o in a.option_strings)}
    for section in cp.sections():
        if section not in ("common", args.command):
            if section in parser._subparsers._group_actions[0].choices:
                continue
            raise UsageError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"unknown key {key!r} in config section [{section}]")
            if dest in given or (section == "common" and cp.has_option(args.command, key)):
                continue
            setattr(args, dest, _config_value(actions[dest], raw))
    return args


def _check_required(parser, args):
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    missing = [a.option_strings[0] for a in subparser._actions if a.required and getattr(args, a.dest, None) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # required flags may come from the config file, so defer that check
    required = []
    for choice in parser._subparsers._group_actions[0].choices.values():
        for a in choice._actions:
            if a.required:
                required.append(a)
                a.required = False
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    finally:
        for a in required:
            a.required = True

    threads = os.environ.get("NOWCASTLAB_THREADS")
    try:
        if threads:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        if args.config:
            args = apply_config(parser, argv, args)
        _check_required(parser, args)
        if getattr(args, "checkpoint", None) and getattr(args, "model", None) and args.command in ("evaluate", "predict"):
            raise UsageError("pass either --checkpoint or --model, not both")
    except (UsageError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"nowcastlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nowcastlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"nowcastlab {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CorruptDatasetError as exc:
        print(f"nowcastlab {args.command}: corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"nowcastlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NowcastError, ValueError) as exc:
        print(f"nowcastlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
