"""``modgan`` command line: synth-data, train, translate, generate, evaluate, ablate, visualize-masks."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from modgan import __version__
from modgan.checkpoint import load_checkpoint, resolve_checkpoint
from modgan.composer import aggregate_masks, execute, parse_plan, upsample_mask
from modgan.config import TrainConfig
from modgan.data.celeba import ingest_celeba
from modgan.data.colormnist import load_split, synthesize_colormnist
from modgan.data.manifest import ImageSet, save_gray, save_png
from modgan.evaluator import (
    AttrClassifier,
    ClassifierConfig,
    all_combinations,
    classification_error,
    export_mask_report,
    train_classifier,
)
from modgan.pipeline import desk_experiment
from modgan.schema import resolve_schema
from modgan.trainer import train

def _provenance(out: Path, args: argparse.Namespace, argv: list[str], config: TrainConfig | None = None) -> None:
    record = {
        "command": args.command,
        "argv": argv,
        "seed": args.seed,
        "config_hash": config.hash() if config else None,
        "versions": {
            "modgan": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------------------


def cmd_synth_data(args, out: Path) -> None:
    if args.dataset == "colormnist":
        m = synthesize_colormnist(args.mnist, out, args.count, args.size, args.seed)
        print(f"wrote {len(m)} images to {out}")
    else:
        if not args.celeba_root:
            raise ValueError("--celeba-root is required for --dataset celeba")
        train_m, test_m = ingest_celeba(args.celeba_root, out, test_count=args.test_count, seed=args.seed)
        print(f"wrote {len(train_m)} train / {len(test_m)} test faces to {out}")


def _load_config(args) -> TrainConfig:
    overrides = list(args.override or [])
    if args.data:
        overrides.append(f"data={args.data}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return TrainConfig.load(args.config, overrides)


def cmd_train(args, out: Path) -> TrainConfig:
    cfg = _load_config(args)
    if not cfg.data:
        raise ValueError("no dataset: set 'data' in the config or pass --data")
    schema = resolve_schema(cfg.schema) if cfg.schema else None
    manifest = load_split(cfg.data, "train", schema)
    _, path = train(cfg, manifest, out, resume=args.resume)
    print(f"checkpoint: {path}")
    return cfg


def _write_result(result, out: Path, size: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for b, img in enumerate(result.output):
        suffix = "" if len(result.output) == 1 else f"_{b:03d}"
        save_png(img, out / f"output{suffix}.png")
        masks = [m[b] for m in result.masks if m is not None]
        for k, m in enumerate(masks):
            save_gray(upsample_mask(m, size), out / f"mask_{k}{suffix}.png")
        if masks:
            save_gray(aggregate_masks(masks, size), out / f"mask_aggregate{suffix}.png")


def _plans(args) -> list[str]:
    plans = list(args.plan or [])
    if args.plan_file:
        plans += [ln.strip() for ln in Path(args.plan_file).read_text().splitlines() if ln.strip()]
    if not plans:
        raise ValueError("give --plan or --plan-file")
    return plans


def cmd_translate(args, out: Path) -> None:
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    plans = _plans(args)
    for k, text in enumerate(plans):
        plan = parse_plan(text, ckpt.schema)
        if plan.source != "img":
            raise ValueError(f"translate expects 'img:' plans, got {text!r}")
        result = execute(plan, ckpt, seed=args.seed)
        _write_result(result, out if len(plans) == 1 else out / f"{k:04d}", ckpt.config.image_size)
    print(f"wrote {len(plans)} translation(s) to {out}")


def cmd_generate(args, out: Path) -> None:
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    plans = _plans(args)
    gen = torch.Generator().manual_seed(args.seed)
    for k, text in enumerate(plans):
        plan = parse_plan(text, ckpt.schema)
        if plan.source != "gen":
            raise ValueError(f"generate expects 'gen:' plans, got {text!r}")
        z = torch.randn(args.count, ckpt.config.z_dim, generator=gen)
        result = execute(plan, ckpt, z=z)
        _write_result(result, out if len(plans) == 1 else out / f"{k:04d}", ckpt.config.image_size)
    print(f"wrote {len(plans)} generation plan(s) x {args.count} sample(s) to {out}")


def _classifier(args, data_root: str, schema, out: Path) -> AttrClassifier:
    if args.classifier and (Path(args.classifier) / "classifier.json").exists():
        return AttrClassifier.load(args.classifier)
    train_set = ImageSet.from_manifest(load_split(data_root, "train", schema))
    test_set = ImageSet.from_manifest(load_split(data_root, "test", schema))
    clf = train_classifier(train_set, schema, ClassifierConfig(epochs=args.classifier_epochs, seed=args.seed), test_set)
    clf.save(Path(args.classifier) if args.classifier else out / "classifier")
    return clf


def cmd_evaluate(args, out: Path) -> None:
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    data_root = args.data or ckpt.config.data
    schema = ckpt.schema
    clf = _classifier(args, data_root, schema, out)
    test = ImageSet.from_manifest(load_split(data_root, "test", schema))
    combos = [c.split("+") for c in args.combinations.split(",")] if args.combinations else all_combinations(schema)
    table = classification_error(
        clf, ckpt, test, schema, combos, seed=args.seed, order=args.order,
        aggregate=args.aggregate, gate=args.gate, variant=args.variant,
    )
    (out / "table.csv").write_text(table.to_csv())
    (out / "table.txt").write_text(table.to_text())
    print(table.to_text(), end="")


def cmd_ablate(args, out: Path) -> TrainConfig:
    cfg = _load_config(args)
    summary = desk_experiment(
        cfg, out, count=args.count, mnist=args.mnist,
        clf_config=ClassifierConfig(epochs=args.classifier_epochs, seed=cfg.seed), seed=cfg.seed, gate=args.gate,
    )
    print((out / "tables.txt").read_text(), end="")
    print(json.dumps(summary["classifier_accuracy"]))
    return cfg


def cmd_visualize_masks(args, out: Path) -> None:
    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    steps_list = []
    for text in _plans(args):
        plan = parse_plan(text if text.startswith(("img:", "gen:")) else f"img:- -> {text} -> out", ckpt.schema)
        steps_list.append(plan.steps)
    data_root = args.data or ckpt.config.data
    test = load_split(data_root, "test", ckpt.schema)
    rng = np.random.default_rng(args.seed)
    pick = sorted(rng.choice(len(test), size=min(args.num_images, len(test)), replace=False))
    images = test.subset(pick, "test").load_images()
    paths = export_mask_report(ckpt, images, steps_list, out)
    print(f"wrote {len(paths)} mask grids to {out}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "visualize-masks": cmd_visualize_masks,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modgan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=seed_default)

    sp = sub.add_parser("synth-data", help="synthesize ColorMNIST or ingest CelebA")
    common(sp)
    sp.add_argument("--dataset", choices=("colormnist", "celeba"), default="colormnist")
    sp.add_argument("--mnist", default="bundled", help="IDX directory, URL, or 'bundled'")
    sp.add_argument("--count", type=int, default=50000)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--celeba-root")
    sp.add_argument("--test-count", type=int, default=2000)

    for name in ("train", "ablate"):
        sp = sub.add_parser(name, help="train one model" if name == "train" else "train variants and score ablations")
        common(sp, seed_default=None)
        sp.add_argument("--config")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE")
        sp.add_argument("--data", help="dataset root (overrides config 'data')")
        if name == "train":
            sp.add_argument("--resume", action="store_true")
        else:
            sp.add_argument("--count", type=int, default=10000, help="images to synthesize when no data is set")
            sp.add_argument("--mnist", default="bundled")
            sp.add_argument("--classifier-epochs", type=int, default=4)
            sp.add_argument("--gate", type=float, default=0.95, help="minimum classifier held-out accuracy to score")

    for name in ("translate", "generate"):
        sp = sub.add_parser(name, help=f"run composition plans ({'img' if name == 'translate' else 'gen'} source)")
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--plan", action="append")
        sp.add_argument("--plan-file")
        if name == "generate":
            sp.add_argument("--count", type=int, default=1)

    sp = sub.add_parser("evaluate", help="classification-error table for one checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--classifier", help="classifier directory (trained and saved there if absent)")
    sp.add_argument("--classifier-epochs", type=int, default=4)
    sp.add_argument("--combinations", help="comma list of '+'-joined attribute names, e.g. color,color+style")
    sp.add_argument("--order", choices=("fixed", "random"), default="fixed")
    sp.add_argument("--aggregate", choices=("any", "mean"), default="any")
    sp.add_argument("--variant", default="full")
    sp.add_argument("--gate", type=float, default=0.95, help="minimum classifier held-out accuracy to score")

    sp = sub.add_parser("visualize-masks", help="input/output/mask grids for test images")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--plan", action="append", help="full plan or 'attr=value -> attr=value'")
    sp.add_argument("--plan-file")
    sp.add_argument("--num-images", type=int, default=4)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        out = _out_dir(args.out)
        with FileLock(str(out / ".modgan.lock"), timeout=0):
            config = COMMANDS[args.command](args, out)
            if args.seed is None:
                args.seed = config.seed if isinstance(config, TrainConfig) else 0
            _provenance(out, args, argv, config if isinstance(config, TrainConfig) else None)
    except Exception as e:  # noqa: BLE001 - single-line machine-parseable failure
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
