"""Command-line entry point: ``plnet <command> [flags]``.

Exit status is 0 on success, 1 for usage errors (bad or unknown flags,
invalid option values) and 2 for runtime failures. All randomness derives
from ``--seed``; environment variables are never read.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, ablation, dataio, gradcheck, partgen
from . import tensor as T
from .descriptor import extract, load_descriptors, save_descriptors
from .errors import ConfigurationError, PLNetError
from .evaluation import format_csv, format_table, retrieve, score
from .network import BackboneConfig, LayerSpec, forward_backbone, load_checkpoint, part_boxes
from .trainer import TrainConfig, read_config_file, train

GRADCHECK_TOLERANCE = 1e-4


class CommandLineError(Exception):
    """Bad invocation; reported with exit status 1."""

    def __init__(self, message: str, parser: argparse.ArgumentParser | None = None):
        super().__init__(message)
        self.parser = parser


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandLineError(f"{self.prog}: {message}", self)


# -- flag helpers ----------------------------------------------------------------

_PY_TYPES = {"int": int, "float": float, "str": str}


def _dataclass_flags(group, cls, skip=(), aliases=None) -> None:
    """One ``--field-name`` flag per dataclass field, defaulting to None (unset)."""
    aliases = aliases or {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.type not in _PY_TYPES:
            continue
        names = [f"--{f.name.replace('_', '-')}", *aliases.get(f.name, [])]
        group.add_argument(*names, dest=f.name, type=_PY_TYPES[f.type], default=None, metavar=f.type.upper(),
                           help=f"(default {f.default})")


def _set_values(args, cls, skip=()) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)
            if f.name not in skip and getattr(args, f.name, None) is not None}


def _train_config(args) -> TrainConfig:
    config = TrainConfig()
    try:
        if args.config:
            config = config.updated(read_config_file(args.config))
        config = config.updated(_set_values(args, TrainConfig, skip={"seed"}))
        config = dataclasses.replace(config, seed=args.seed)
        config.validate()
    except ConfigurationError as exc:
        raise CommandLineError(str(exc)) from None
    return config


def _backbone(args) -> BackboneConfig:
    base = BackboneConfig()
    try:
        layers = tuple(LayerSpec.decode(t) for t in args.layers.split(";")) if args.layers else base.layers
        height, width = args.image_size
        backbone = BackboneConfig((3, height, width), layers)
        backbone.validate()
    except (ValueError, TypeError) as exc:
        raise CommandLineError(f"bad backbone: {exc}") from None
    return backbone


def _image_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    return h, w


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--config", type=Path, help="flat key = value file; flags override it")
    g.add_argument("--layers", help="backbone layers as kernel:channels:stride:pad:pool;... ")
    g.add_argument("--image-size", type=_image_size, default=(64, 32), metavar="HxW", help="input size (default 64x32)")
    _dataclass_flags(g, TrainConfig, skip={"seed"}, aliases={"parts": ["--k", "-K"]})


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    values = _set_values(args, dataio.SyntheticSpec, skip={"seed"})
    spec = dataio.SyntheticSpec(**values, seed=args.seed)
    manifest = dataio.write_dataset(dataio.generate_synthetic(spec), args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    backbone = _backbone(args)
    data = dataio.load_dataset(args.data, backbone.input_shape[1:])
    images, records = data.select("train")
    if len(records) == 0:
        raise ConfigurationError(f"{args.data} has no training images")
    result = train(images, [r.identity for r in records], config, backbone, out_dir=args.out)
    print(f"final loss {result.log[-1]['total']:.6f}" if result.log else "no iterations run")
    print(Path(args.out) / "checkpoint")
    return 0


def _load(args):
    params = load_checkpoint(args.checkpoint)
    size = params.config.backbone.input_shape[1:]
    data = dataio.load_dataset(args.data, size)
    if args.split != "all":
        images, records = data.select(args.split)
    else:
        images, records = data.images, data.records
    return params, images, records


def cmd_parts(args) -> int:
    params, images, records = _load(args)
    cfg = params.config
    if cfg.parts == 0:
        raise ConfigurationError("checkpoint has K=0: there are no parts to show")
    if args.saliency_dir:
        Path(args.saliency_dir).mkdir(parents=True, exist_ok=True)
    for image, record in zip(images, records):
        x = forward_backbone(image.astype(params.global_head.kernel.dtype), params).value
        image_id = Path(record.path).name
        for box in part_boxes(x, cfg):
            print(f"{image_id} {box.index + 1} {box.top} {box.bottom} {box.left} {box.right}")
        if args.saliency_dir and cfg.part_mode == "generated":
            assignment = partgen.cluster_vertical(partgen.argmax_locations(x), cfg.parts)
            for k in range(cfg.parts):
                target = Path(args.saliency_dir) / f"{Path(image_id).stem}.part{k + 1}.pltn"
                T.save_pltn(target, partgen.cluster_saliency(x, assignment, k))
    return 0


def _select(features, kind: str) -> np.ndarray:
    if kind == "global":
        return features.global_
    if kind == "final":
        return features.final
    if kind.startswith("part-"):
        k = int(kind[5:])
        if not 1 <= k <= features.parts.shape[1]:
            raise ConfigurationError(f"no part {k}; the checkpoint has K={features.parts.shape[1]}")
        return features.part(k - 1)
    raise CommandLineError(f"unknown descriptor kind {kind!r}; use global, final or part-<k>")


def cmd_extract(args) -> int:
    params, images, records = _load(args)
    matrix = _select(extract(images, params), args.kind)
    if args.normalize:
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix = matrix / np.where(norms == 0, 1.0, norms)
    sidecar = save_descriptors(args.out, matrix.astype(np.float32), records)
    print(f"{args.out} ({matrix.shape[0]}×{matrix.shape[1]}), index {sidecar}")
    return 0


def _emit_report(rows, out: Path | None) -> None:
    table = format_table(rows)
    sys.stdout.write(table)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(format_csv(rows))
        out.with_suffix(".txt").write_text(table)


def cmd_eval(args) -> int:
    if args.checkpoint:
        if not args.data:
            raise CommandLineError("--checkpoint needs --data")
        params = load_checkpoint(args.checkpoint)
        data = dataio.load_dataset(args.data, params.config.backbone.input_shape[1:])
        scores = ablation.evaluate_params(params, data, args.metric)
        rows = [scores[k].row(k) for k in scores if k != "parts"]
    elif args.query and args.gallery:
        q, q_rows = load_descriptors(args.query)
        g, g_rows = load_descriptors(args.gallery)
        result = retrieve(
            q, g,
            [r[1] for r in q_rows], [r[1] for r in g_rows],
            [r[2] for r in q_rows], [r[2] for r in g_rows],
            metric=args.metric,
        )
        rows = [score(result).row(args.method or Path(args.query).stem)]
    else:
        raise CommandLineError("eval needs either --checkpoint and --data, or --query and --gallery")
    _emit_report(rows, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_suite(args.seed, args.instances)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name.ljust(width)}  {r.instances:4d} instances  max rel err {r.max_error:.3e}")
    worst = max(r.max_error for r in reports)
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRADCHECK_TOLERANCE else 2


def cmd_ablate(args) -> int:
    base = _train_config(args)
    backbone = _backbone(args)
    seeds = list(range(args.seed, args.seed + args.runs))
    if args.data:
        data = dataio.load_dataset(args.data, backbone.input_shape[1:])
    else:
        values = _set_values(args, dataio.SyntheticSpec, skip={"seed", "height", "width"})
        h, w = backbone.input_shape[1:]
        data = [dataio.generate_synthetic(dataio.SyntheticSpec(**values, height=h, width=w, seed=s)) for s in seeds]
    report = ablation.run_ablation(args.preset, data, base, seeds, backbone, args.metric, args.threads)
    _emit_report(report.rows(), args.out)
    first, *others = report.labels
    for other in others:
        print(f"{first} beats {other} on {report.kind} mAP in {report.win_rate(first, other):.0%} of {args.runs} runs")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="plnet", description="Part-loss networks for person re-identification.")
    parser.add_argument("--version", action="version", version=f"plnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic banded-person dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _dataclass_flags(p, dataio.SyntheticSpec, skip={"seed"}, aliases={"per_identity": ["--per-id"]})
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("train", help="train a model on the train split of a manifest")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--out", type=Path, required=True, help="run directory (loss.csv, checkpoint/)")
    _model_flags(p)
    p.set_defaults(run=cmd_train)

    for name, helptext in (("parts", "print part boxes per image"), ("extract", "write descriptors for a split")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True, help="dataset manifest")
        p.add_argument("--split", choices=[*dataio.SPLITS, "all"], default="query" if name == "extract" else "all")
        if name == "parts":
            p.add_argument("--saliency-dir", type=Path, help="also write each part's saliency map as PLTN")
            p.set_defaults(run=cmd_parts)
        else:
            p.add_argument("--out", type=Path, required=True, help="PLTN file; an index is written next to it")
            p.add_argument("--kind", default="final", help="global, final or part-<k> (default final)")
            p.add_argument("--normalize", action="store_true", help="L2-normalise each descriptor")
            p.set_defaults(run=cmd_extract)

    p = sub.add_parser("eval", help="score retrieval as mAP and CMC rank-1/5/10")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset manifest with query and gallery splits")
    p.add_argument("--query", type=Path, help="query descriptor file")
    p.add_argument("--gallery", type=Path, help="gallery descriptor file")
    p.add_argument("--method", help="row label when scoring descriptor files")
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--out", type=Path, help="report CSV; an aligned table goes next to it as .txt")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    _common(p)
    p.add_argument("--instances", type=int, default=100, help="random instances per operation (default 100)")
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired training runs for a comparison preset")
    _common(p)
    p.add_argument("--preset", choices=sorted(ablation.PRESETS), required=True)
    p.add_argument("--runs", type=int, default=5, help="number of seeds, starting at --seed (default 5)")
    p.add_argument("--data", type=Path, help="shared dataset manifest; omit to synthesise one per seed")
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--out", type=Path, help="report CSV; an aligned table goes next to it as .txt")
    _model_flags(p)
    _dataclass_flags(p.add_argument_group("synthetic data"), dataio.SyntheticSpec,
                     skip={"seed", "height", "width"}, aliases={"per_identity": ["--per-id"]})
    p.set_defaults(run=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CommandLineError("plnet: a command is required")
        if args.threads < 1:
            raise CommandLineError("--threads must be >= 1")
        if getattr(args, "runs", 1) < 1 or getattr(args, "instances", 1) < 1:
            raise CommandLineError("--runs and --instances must be >= 1")
    except CommandLineError as exc:
        (exc.parser or parser).print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.run(args)
    except CommandLineError as exc:
        print(f"plnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except (PLNetError, OSError, ValueError) as exc:
        print(f"plnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
