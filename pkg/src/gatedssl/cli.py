"""Command-line surface.

Subcommands: prepare (persist a long-tailed subsample), train, eval,
report, selftest, dump-transforms. Exit codes: 0 ok, 2 usage/config/data
problems, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .datasets import (
    DatasetSpec,
    exponential_profile,
    load_dataset,
    subsample_indices,
    synthetic_dataset,
    write_index_file,
)
from .errors import ConfigError, DataError, FormatError, NumericError
from .model import load_checkpoint
from .selftest import run_selftest
from .training import TrainConfig, Standardizer, default_config, evaluate, run
from .transforms import (
    LABEL_CARDINALITY,
    TaskKind,
    apply_channel_shuffle,
    apply_lorot_e,
    apply_quadrant_flip,
)

TASK_ALIASES = {
    "lorot_e": TaskKind.LOROT_E,
    "lorot-e": TaskKind.LOROT_E,
    "lorot": TaskKind.LOROT_E,
    "quad_flip": TaskKind.QUAD_FLIP,
    "flip": TaskKind.QUAD_FLIP,
    "channel_shuffle": TaskKind.CHANNEL_SHUFFLE,
    "shuffle": TaskKind.CHANNEL_SHUFFLE,
    "shuffle_channel": TaskKind.CHANNEL_SHUFFLE,
}


def parse_tasks(text: str) -> tuple[TaskKind, ...]:
    tasks = []
    for name in text.split(","):
        key = name.strip().lower()
        if key not in TASK_ALIASES:
            raise ConfigError(
                f"unknown task {name!r}; valid names: {sorted(set(TASK_ALIASES))}"
            )
        tasks.append(TASK_ALIASES[key])
    return tuple(tasks)


def resolve_data_root(arg_root: str | None) -> str | None:
    return arg_root or os.environ.get("DATA_ROOT")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (schema of a run's config.json)")
    p.add_argument("--dataset", help="cifar10 | cifar100 | tiny-imagenet | synthetic")
    p.add_argument("--ratio", type=float, help="imbalance ratio in (0, 1]")
    p.add_argument("--tasks", help="comma-separated task names, e.g. lorot_e,shuffle")
    p.add_argument("--lambda", dest="ssl_ratio", type=float, help="SSL loss ratio (default 0.1)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", help="resnet32-cifar | resnet18 | tinycnn")
    p.add_argument("--drw-epoch", type=int, help="epoch at which reweighting starts")
    p.add_argument("--gate-detach", action="store_true", help="stop gradients into the gate input")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--index-file", help="reuse a subsample index file from `prepare`")
    p.add_argument("--out", help="run directory (resumes if it has checkpoints)")
    p.add_argument("--data-root", help="dataset root (fallback: $DATA_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="persist a long-tailed subsample index file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="index file path (default <dataset>_r<ratio>_s<seed>.idx)")
    p.add_argument("--data-root", help="dataset root (fallback: $DATA_ROOT)")

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on an eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--data-root")
    p.add_argument("--batch-size", type=int, default=256)

    p = sub.add_parser("report", help="accuracy table over finished runs")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--out", help="output prefix; writes <out>.md and <out>.csv")

    sub.add_parser("selftest", help="run the verification-oracle suite")

    p = sub.add_parser("dump-transforms", help="write PNG grids of every transform outcome")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=8, help="nearest-neighbour upscale factor")
    return parser


def cmd_prepare(args) -> int:
    spec = DatasetSpec(args.dataset, root=resolve_data_root(args.data_root) or ".")
    train, _ = load_dataset(spec)
    counts = np.bincount(train.labels, minlength=train.num_classes)
    profile = exponential_profile(train.num_classes, int(counts.min()), args.ratio)
    indices = subsample_indices(train.labels, profile, args.seed)
    out = Path(args.out or f"{args.dataset}_r{args.ratio}_s{args.seed}.idx")
    header = {
        "dataset": args.dataset,
        "ratio": args.ratio,
        "seed": args.seed,
        "counts": list(profile.counts),
    }
    write_index_file(out, header, indices)
    print(f"wrote {len(indices)} indices to {out}")
    return 0


def _merged_train_config(args) -> tuple[TrainConfig, Path]:
    file_dict: dict = {}
    if args.config:
        file_dict = json.loads(Path(args.config).read_text())
    dataset_name = args.dataset or file_dict.get("dataset", {}).get("name")
    if not dataset_name:
        raise ConfigError("specify --dataset or a config file with a dataset entry")
    root = resolve_data_root(args.data_root) or file_dict.get("dataset", {}).get("root")
    base = default_config(dataset_name, root=root).to_dict()
    dataset_dict = base["dataset"] | file_dict.get("dataset", {})
    base.update(file_dict)
    base["dataset"] = dataset_dict
    if root:
        base["dataset"]["root"] = root

    if args.tasks:
        base["tasks"] = [t.value for t in parse_tasks(args.tasks)]
    if args.ratio is not None:
        base["imbalance_ratio"] = args.ratio
    if args.ssl_ratio is not None:
        base["ssl_ratio"] = args.ssl_ratio
    for key in ("epochs", "batch_size", "seed", "backbone", "drw_epoch", "checkpoint_every", "index_file"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if args.lr is not None:
        base["schedule"]["initial"] = args.lr
    if args.gate_detach:
        base["gate_detach"] = True
    if args.no_standardize:
        base["standardize"] = False

    config = TrainConfig.from_dict(base)
    if args.out:
        out_dir = Path(args.out)
    else:
        ratio_tag = f"-r{config.imbalance_ratio}" if config.imbalance_ratio else ""
        task_tag = "+".join(t.value for t in config.tasks)
        out_dir = Path("runs") / f"{dataset_name}{ratio_tag}-{task_tag}-s{config.seed}"
    return config, out_dir


def cmd_train(args) -> int:
    config, out_dir = _merged_train_config(args)
    run_dir = run(config, out_dir)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    model, _, _, extra = load_checkpoint(args.checkpoint)
    spec = DatasetSpec(args.dataset, root=resolve_data_root(args.data_root) or ".")
    _, eval_split = load_dataset(spec)
    standardizer = None
    if extra and "standardizer_mean" in extra:
        standardizer = Standardizer(
            np.array(extra["standardizer_mean"]), np.array(extra["standardizer_std"])
        )
    accuracy = evaluate(model, eval_split, args.batch_size, standardizer)
    print(f"top1_accuracy {accuracy:.6f}")
    return 0


def cmd_report(args) -> int:
    rows, warnings = reporting.collect_rows([Path(d) for d in args.run_dirs])
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    markdown, csv_text = reporting.render_tables(rows)
    if args.out:
        Path(args.out).with_suffix(".md").write_text(markdown)
        Path(args.out).with_suffix(".csv").write_text(csv_text)
    print(markdown, end="")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest()
    for result in results:
        print(result)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_dump_transforms(args) -> int:
    from PIL import Image

    train, _ = synthetic_dataset(4, 1, args.image_size, args.seed)
    img = train[0].image

    def to_pil(arr: np.ndarray) -> Image.Image:
        hwc = (np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        pil = Image.fromarray(hwc)
        size = (arr.shape[2] * args.scale, arr.shape[1] * args.scale)
        return pil.resize(size, Image.NEAREST)

    def grid(images: list[np.ndarray], cols: int) -> Image.Image:
        tiles = [to_pil(a) for a in images]
        w, h = tiles[0].size
        rows = (len(tiles) + cols - 1) // cols
        pad = 2
        sheet = Image.new("RGB", (cols * (w + pad) - pad, rows * (h + pad) - pad), "white")
        for i, tile in enumerate(tiles):
            sheet.paste(tile, ((i % cols) * (w + pad), (i // cols) * (h + pad)))
        return sheet

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lorot = [apply_lorot_e(img, q, r)[0] for q in range(4) for r in range(4)]
    grid(lorot, 4).save(out / "lorot_e.png")
    flip = [apply_quadrant_flip(img, 0, bool(f))[0] for f in range(2)]
    grid(flip, 2).save(out / "quad_flip.png")
    shuffle = [apply_channel_shuffle(img, 0, p)[0] for p in range(LABEL_CARDINALITY[TaskKind.CHANNEL_SHUFFLE])]
    grid(shuffle, 3).save(out / "channel_shuffle.png")
    print(f"wrote transform grids to {out}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "selftest": cmd_selftest,
    "dump-transforms": cmd_dump_transforms,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
