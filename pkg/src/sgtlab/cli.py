"""Command-line interface: ``sgtlab <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.
Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__

log = logging.getLogger("sgtlab")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

DEMO_DIR = Path(__file__).parent / "demo"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# helpers


def _read_graph(path, v):
    from .core import parse_graph

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    return parse_graph(text, v)


def _load(path, task):
    from .runtime import load_checkpoint

    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such checkpoint")
    return load_checkpoint(path, expect_task=task)


def _sge_model(path):
    from .sge import SGEModel

    return SGEModel.from_checkpoint(_load(path, "sge"))


def _g2l_model(path):
    from .g2l import G2LModel

    return G2LModel.from_checkpoint(_load(path, "g2l"))


def _dataset(path):
    from .data import load_dataset

    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such dataset")
    return load_dataset(path)


def _config(args, task):
    from .runtime import TrainConfig, load_config

    overrides = {"task": task}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.config:
        return load_config(args.config, **overrides)
    return TrainConfig.from_dict({}, **overrides)


def _check_vocab(model_vocab, data_vocab, what):
    if model_vocab != data_vocab:
        raise ValueError(f"{what}: vocabulary does not match the checkpoint")


def _load_image(path, size):
    from .render import load_pgm, resize_image

    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such image")
    return resize_image(load_pgm(path), size)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .core import load_vocabulary
    from .data import GeneratorConfig, default_vocabulary, generate_dataset, save_dataset

    v = load_vocabulary(args.vocab) if args.vocab else default_vocabulary()
    cfg = GeneratorConfig(
        num_scenes=args.num,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        categories=list(v.object_labels),
        raster_size=args.raster_size,
        crop_fraction=args.crop_fraction,
        seed=args.seed,
    )
    ds = generate_dataset(cfg, v)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} scenes to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .core import load_vocabulary
    from .data import ingest_coco_annotations, save_dataset, scenes_to_dataset

    v = load_vocabulary(args.vocab)
    scenes = ingest_coco_annotations(args.coco, v, args.seed, args.min_objects, args.max_objects)
    ds = scenes_to_dataset(scenes, v, {"source": {"coco": Path(args.coco).name, "seed": args.seed}})
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} scenes to {args.out}")
    return EXIT_OK


def _train(args, task) -> int:
    from .runtime import MetricsLog, save_checkpoint

    cfg = _config(args, task)
    ds = _dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(out / "metrics.jsonl")
    if task == "sge":
        from .sge import train_sge

        result = train_sge(cfg, ds, metrics)
    else:
        from .g2l import train_g2l

        result = train_g2l(cfg, ds, metrics)
    metrics.flush()
    save_checkpoint(result.checkpoint, out / f"{task}.ckpt")
    last = metrics.records[-1] if metrics.records else {}
    print(json.dumps(last, sort_keys=True))
    print(f"checkpoint: {out / f'{task}.ckpt'}")
    return EXIT_OK


def cmd_eval_sge(args) -> int:
    from .metrics import format_rank_table
    from .sge import EVAL_SEED, evaluate_sge, prepare_graphs

    model = _sge_model(args.ckpt)
    ds = _dataset(args.data)
    _check_vocab(model.vocab, ds.vocabulary, args.data)
    reports = evaluate_sge(model, prepare_graphs(ds), args.strategy or model.cfg.strategy, model.cfg.mask_rate, args.seed if args.seed is not None else EVAL_SEED)
    reports = {k: r for k, r in reports.items() if r is not None}
    if args.json:
        print(json.dumps({k: r.to_dict() for k, r in reports.items()}, sort_keys=True))
    else:
        print(format_rank_table(reports))
    return EXIT_OK


def cmd_eval_g2l(args) -> int:
    from .g2l import evaluate_g2l, g2l_samples
    from .metrics import format_miou

    model = _g2l_model(args.ckpt)
    ds = _dataset(args.data)
    _check_vocab(model.vocab, ds.vocabulary, args.data)
    rep = evaluate_g2l(model, g2l_samples(ds, model.cfg), zero_image=args.zero_image)
    print(json.dumps(rep.to_dict(), sort_keys=True) if args.json else format_miou(rep))
    return EXIT_OK


def cmd_expand(args) -> int:
    from .core import serialize_graph, validate_scene_graph
    from .runtime import atomic_write_text
    from .sge import expand_graph

    model = _sge_model(args.ckpt)
    g, _ = _read_graph(args.graph, model.vocab)
    diags = validate_scene_graph(g, model.vocab)
    if diags:
        raise ValueError(f"{args.graph}: {diags[0]}")
    out = expand_graph(model, g, args.new_objects)
    atomic_write_text(args.out, serialize_graph(out, None, model.vocab) + "\n")
    print(f"expanded {len(g)} -> {len(out)} nodes: {args.out}")
    return EXIT_OK


def _layout_for(model, g, partial, image):
    from .core import MASKED_BOX, Layout
    from .g2l import predict_layout

    if partial is None:
        raise ValueError("graph document has no boxes; a partial layout is required")
    if len(partial) < len(g):
        # nodes appended after the partial layout was drawn are novel
        pad = np.tile(np.asarray(MASKED_BOX), (len(g) - len(partial), 1))
        partial = Layout(np.vstack([partial.boxes, pad]))
    return predict_layout(model, g, partial, image)


def cmd_layout(args) -> int:
    from .core import serialize_graph
    from .runtime import atomic_write_text

    model = _g2l_model(args.ckpt)
    g, embedded = _read_graph(args.graph, model.vocab)
    partial = embedded
    if args.partial_layout:
        _, partial = _read_graph(args.partial_layout, model.vocab)
    image = _load_image(args.image, model.cfg.raster_size)
    layout = _layout_for(model, g, partial, image)
    atomic_write_text(args.out, serialize_graph(g, layout, model.vocab) + "\n")
    print(f"layout for {len(g)} objects: {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .core import load_vocabulary
    from .data import default_vocabulary
    from .render import rasterize_layout, save_pgm, save_svg

    v = load_vocabulary(args.vocab) if args.vocab else default_vocabulary()
    g, embedded = _read_graph(args.graph, v)
    layout = embedded
    if args.layout:
        _, layout = _read_graph(args.layout, v)
    if layout is None:
        raise ValueError("no layout: pass --layout or a graph document with boxes")
    save_svg(args.svg, g, layout, v)
    if args.pgm:
        save_pgm(args.pgm, rasterize_layout(g, layout, v, args.raster_size))
    print(f"rendered {len(g)} objects: {args.svg}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .core import serialize_graph, validate_scene_graph
    from .render import render_layout_svg
    from .runtime import atomic_write_text
    from .sge import expand_graph

    torch.manual_seed(args.seed)
    sge_model = _sge_model(args.sge_ckpt)
    g2l_model = _g2l_model(args.g2l_ckpt)
    if sge_model.vocab != g2l_model.vocab:
        raise ValueError("SGE and G2L checkpoints use different vocabularies")
    v = sge_model.vocab
    graph_path = args.graph or DEMO_DIR / "graph.json"
    image_path = args.image or DEMO_DIR / "image.pgm"
    g, partial = _read_graph(graph_path, v)
    diags = validate_scene_graph(g, v)
    if diags:
        raise ValueError(f"{graph_path}: {diags[0]}")
    expanded = expand_graph(sge_model, g, args.new_objects)
    image = _load_image(image_path, g2l_model.cfg.raster_size)
    layout = _layout_for(g2l_model, expanded, partial, image)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "expanded.json", serialize_graph(expanded, None, v) + "\n")
    atomic_write_text(out / "layout.json", serialize_graph(expanded, layout, v) + "\n")
    atomic_write_text(out / "render.svg", render_layout_svg(expanded, layout, v))
    print(f"pipeline: {len(g)} -> {len(expanded)} nodes; outputs in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.task == "sge":
        from .sge import gradient_suite
    else:
        from .g2l import gradient_suite
    reports = gradient_suite(args.seed, args.tolerance)
    ok = True
    for name, rep in reports.items():
        print(f"{name}: {rep}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .data import MAX_OBJECTS, MIN_OBJECTS

    p = _Parser(prog="sgtlab", description="Scene graph expansion and graph-to-layout toolkit.")
    p.add_argument("--version", action="version", version=f"sgtlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output dataset file (JSONL)")
    s.add_argument("--num", type=int, default=64, help="number of scenes (default 64)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.add_argument("--vocab", help="vocabulary JSON; its object labels become the categories")
    s.add_argument("--min-objects", type=int, default=MIN_OBJECTS, help=f"fewest objects per scene (default {MIN_OBJECTS})")
    s.add_argument("--max-objects", type=int, default=MAX_OBJECTS, help=f"most objects per scene (default {MAX_OBJECTS})")
    s.add_argument("--raster-size", type=int, default=64, help="image raster side recorded for G2L (default 64)")
    s.add_argument("--crop-fraction", type=float, default=0.5, help="crop window side for G2L (default 0.5)")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("ingest", help="convert COCO-style annotations into a dataset")
    s.add_argument("--coco", required=True, help="COCO annotation JSON")
    s.add_argument("--vocab", required=True, help="vocabulary JSON covering every category")
    s.add_argument("--out", required=True, help="output dataset file")
    s.add_argument("--seed", type=int, default=0, help="seed for object subsampling (default 0)")
    s.add_argument("--min-objects", type=int, default=MIN_OBJECTS, help="drop images with fewer objects")
    s.add_argument("--max-objects", type=int, default=MAX_OBJECTS, help="subsample images with more objects")
    s.set_defaults(fn=cmd_ingest)

    for task in ("sge", "g2l"):
        s = sub.add_parser(f"train-{task}", help=f"train the {task.upper()} model")
        s.add_argument("--data", required=True, help="dataset file")
        s.add_argument("--config", help="training config (YAML or JSON)")
        s.add_argument("--out", required=True, help="output directory for checkpoint and metrics log")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--steps", type=int, help="override total_steps")
        s.set_defaults(fn=lambda a, t=task: _train(a, t))

    s = sub.add_parser("eval-sge", help="rank metrics of an SGE checkpoint")
    s.add_argument("--ckpt", required=True, help="SGE checkpoint")
    s.add_argument("--data", required=True, help="dataset file")
    s.add_argument("--strategy", choices=("E", "M"), help="masking strategy (default: the checkpoint's)")
    s.add_argument("--seed", type=int, help="mask seed (default: fixed evaluation seed)")
    s.add_argument("--json", action="store_true", help="print JSON instead of a table")
    s.set_defaults(fn=cmd_eval_sge)

    s = sub.add_parser("eval-g2l", help="mIoU of a G2L checkpoint")
    s.add_argument("--ckpt", required=True, help="G2L checkpoint")
    s.add_argument("--data", required=True, help="dataset file")
    s.add_argument("--zero-image", action="store_true", help="zero the visual features (ablation)")
    s.add_argument("--json", action="store_true", help="print JSON instead of text")
    s.set_defaults(fn=cmd_eval_g2l)

    s = sub.add_parser("expand", help="add new objects to a scene graph")
    s.add_argument("--ckpt", required=True, help="SGE checkpoint")
    s.add_argument("--graph", required=True, help="input graph document")
    s.add_argument("--new-objects", type=int, default=1, help="number of nodes to add (default 1)")
    s.add_argument("--out", required=True, help="output graph document")
    s.set_defaults(fn=cmd_expand)

    s = sub.add_parser("layout", help="predict a full layout from a graph, partial layout and image")
    s.add_argument("--ckpt", required=True, help="G2L checkpoint")
    s.add_argument("--graph", required=True, help="graph document (boxes, if present, are the partial layout)")
    s.add_argument("--partial-layout", help="document whose boxes form the partial layout")
    s.add_argument("--image", required=True, help="category graymap (PGM)")
    s.add_argument("--out", required=True, help="output graph+layout document")
    s.set_defaults(fn=cmd_layout)

    s = sub.add_parser("render", help="draw a layout as SVG (and optionally a PGM raster)")
    s.add_argument("--graph", required=True, help="graph document")
    s.add_argument("--layout", help="document carrying the boxes (default: the graph document)")
    s.add_argument("--vocab", help="vocabulary JSON (default: the synthetic vocabulary)")
    s.add_argument("--svg", required=True, help="output SVG")
    s.add_argument("--pgm", help="also write a category graymap")
    s.add_argument("--raster-size", type=int, default=64, help="graymap side (default 64)")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("pipeline", help="expand, lay out and render in one go")
    s.add_argument("--sge-ckpt", required=True, help="SGE checkpoint")
    s.add_argument("--g2l-ckpt", required=True, help="G2L checkpoint")
    s.add_argument("--graph", help="graph document with partial layout (default: bundled demo)")
    s.add_argument("--image", help="category graymap (default: bundled demo)")
    s.add_argument("--new-objects", type=int, default=1, help="number of nodes to add (default 1)")
    s.add_argument("--seed", type=int, default=0, help="torch seed set before inference (default 0)")
    s.add_argument("--out-dir", required=True, help="directory for expanded.json, layout.json, render.svg")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("gradcheck", help="finite-difference check of the training losses")
    s.add_argument("--seed", type=int, default=0, help="seed for the tiny model and sample (default 0)")
    s.add_argument("--task", choices=("sge", "g2l"), default="sge", help="which losses to check (default sge)")
    s.add_argument("--tolerance", type=float, default=1e-4, help="max relative error (default 1e-4)")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .core import GraphParseError, VocabularyError
    from .data import DataError
    from .nn import NonFiniteLossError, ShapeError
    from .runtime import CheckpointError, ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except NonFiniteLossError as exc:
        print(f"sgtlab {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (
        ConfigError,
        CheckpointError,
        DataError,
        GraphParseError,
        VocabularyError,
        ShapeError,
        FileNotFoundError,
        ValueError,
        KeyError,
    ) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"sgtlab {args.command}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
