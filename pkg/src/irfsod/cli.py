"""Command-line entry points: train, detect, eval, make-shapes, serve.

The CLI stays thin: it parses arguments, loads configs and data, and calls
into the core package. Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .data import (DatasetSplit, ImageRecord, ShapesSpec, SupportInstance,
                   SupportSet, generate_shapes_dataset, load_coco_annotations,
                   load_image, sample_support_sets)
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evaluation import (detect, export_coco_detections, meta_testing,
                         one_time_protocol)
from .training import load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _echo_config(cfg: RunConfig) -> None:
    print("resolved configuration:")
    for key, value in cfg.to_flat_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        print(f"  {key} = {value}")


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "data", None):
        cfg.data.root = str(args.data)
    return cfg.resolve()


def _load_split(root: str | Path, visible: str) -> DatasetSplit:
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset directory not found: {root}")
    annotations = root / "annotations.json" if root.is_dir() else root
    return load_coco_annotations(annotations, visible=visible)


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    if not cfg.data.root:
        raise ConfigError("no dataset: pass --data or set data.root")
    _echo_config(cfg)
    split = _load_split(cfg.data.root, visible="base")
    log_path = args.log or str(Path(args.out).with_suffix(".log.jsonl"))
    result = train(split, cfg, log_path=log_path, progress=not args.quiet)
    save_checkpoint(result.detector, args.out)
    print(f"trained {cfg.train.iterations} iterations in {result.seconds:.1f}s")
    print(f"checkpoint written to {args.out}")
    print(f"training log written to {log_path}")
    return EXIT_OK


def _load_support_dir(support_dir: str | Path) -> list[SupportSet]:
    """Read per-category support folders: <id>/ images + boxes.json.

    Each entry of boxes.json maps an image file name to one (x, y, w, h)
    box or a list of them.
    """
    support_dir = Path(support_dir)
    if not support_dir.is_dir():
        raise DataError(f"support directory not found: {support_dir}")
    sets = []
    for sub in sorted(p for p in support_dir.iterdir() if p.is_dir()):
        token = sub.name.split("_", 1)[0]
        try:
            category = int(token)
        except ValueError:
            raise DataError(
                f"support folder {sub.name!r} must start with a category id") from None
        boxes_file = sub / "boxes.json"
        if not boxes_file.is_file():
            raise DataError(f"missing {boxes_file}")
        mapping = json.loads(boxes_file.read_text())
        items = []
        for file_name, raw in sorted(mapping.items()):
            image_path = sub / file_name
            image = load_image(image_path)
            record = ImageRecord(image_id=-1, file_name=file_name, path=image_path,
                                 width=image.shape[1], height=image.shape[0])
            box_lists = raw if raw and isinstance(raw[0], (list, tuple)) else [raw]
            for xywh in box_lists:
                x, y, w, h = (float(v) for v in xywh)
                from .geometry import Box
                items.append(SupportInstance(record=record, box=Box.from_xywh(x, y, w, h)))
        if not items:
            raise DataError(f"support folder {sub} has no boxes")
        sets.append(SupportSet(category=category, items=items))
    if not sets:
        raise DataError(f"no support categories under {support_dir}")
    return sets


def _cmd_detect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.run_config
    if args.set:
        cfg = apply_overrides(cfg, args.set).resolve()
    supports = _load_support_dir(args.support_dir)
    started = time.perf_counter()
    detections_by_image = {}
    names = {}
    for index, image_path in enumerate(args.images):
        image = load_image(image_path)
        detections_by_image[index] = detect(image, supports, model, cfg)
        names[index] = Path(image_path).name
    elapsed = time.perf_counter() - started
    rows = export_coco_detections(detections_by_image)
    for row in rows:
        row["file_name"] = names[row["image_id"]]
    Path(args.out).write_text(json.dumps(rows, indent=2))
    total = sum(len(v) for v in detections_by_image.values())
    print(f"{total} detections over {len(args.images)} image(s) "
          f"in {elapsed:.2f}s ({elapsed / max(len(args.images), 1):.3f}s/image)")
    print(f"detections written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.run_config
    if args.set:
        cfg = apply_overrides(cfg, args.set).resolve()
    split = _load_split(args.data, visible="novel")
    if args.protocol == "onetime":
        rng = np.random.default_rng(args.seed)
        categories = sorted(split.novel_categories)
        supports = sample_support_sets(split, categories, args.k_shot, rng)
        result = one_time_protocol(model, supports, split, cfg)
        report = result.to_dict()
    elif args.protocol == "meta":
        meta = meta_testing(model, split, n_way=args.n_way, k_shot=args.k_shot,
                            episodes=args.episodes,
                            queries_per_category=args.queries_per_category,
                            seed=args.seed, cfg=cfg)
        report = meta.to_dict()
    else:  # argparse choices guard this, but keep the error explicit
        raise ConfigError(f"unknown protocol {args.protocol!r}")
    for key, value in report.items():
        if isinstance(value, float):
            print(f"{key} = {value:.4f}")
        else:
            print(f"{key} = {value}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
        print(f"metrics written to {args.out}")
    return EXIT_OK


def _cmd_make_shapes(args) -> int:
    spec = ShapesSpec(
        classes=tuple(args.classes.split(",")),
        novel_classes=tuple(args.novel.split(",")) if args.novel else (),
        images=args.images, image_size=args.image_size,
        min_instances=args.min_instances, max_instances=args.max_instances,
        min_size=args.min_size, max_size=args.max_size,
        color_mode=args.color_mode)
    split = generate_shapes_dataset(spec, args.out, seed=args.seed)
    n_annotations = sum(len(r.annotations) for r in split.records)
    print(f"wrote {len(split.records)} images, {n_annotations} annotations to {args.out}")
    print(f"base categories: {sorted(split.base_categories)}; "
          f"novel: {sorted(split.novel_categories)}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app(checkpoint=args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irfsod",
        description="Instant-response few-shot object detection: train on base "
                    "categories, detect novel ones from support boxes alone.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the base split of a dataset")
    p.add_argument("--config", help="config file of group.key = value lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--data", help="dataset directory (annotations.json + images/)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log path (JSONL); default next to --out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="detect support categories in images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support-dir", required=True,
                   help="per-category folders of support images plus boxes.json")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True, help="detections JSON output path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="run an evaluation protocol on novel categories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", required=True, choices=("onetime", "meta"))
    p.add_argument("--data", required=True, help="dataset directory or annotations file")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--n-way", type=int, default=2)
    p.add_argument("--k-shot", type=int, default=10)
    p.add_argument("--queries-per-category", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="metrics JSON output path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("make-shapes", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=300)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--classes", default="circle,square,triangle,star,cross")
    p.add_argument("--novel", default="star,cross")
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--min-size", type=int, default=16)
    p.add_argument("--max-size", type=int, default=44)
    p.add_argument("--color-mode", default="category", choices=("category", "random"))
    p.set_defaults(func=_cmd_make_shapes)

    p = sub.add_parser("serve", help="run the HTTP detection service")
    p.add_argument("--checkpoint", help="load this checkpoint at startup")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
