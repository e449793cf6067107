"""CelebA ingestion: crop/resize faces and map binary flags to the 3-attribute schema."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from modgan.data.manifest import DatasetManifest
from modgan.data.mnist_idx import IngestionError
from modgan.schema import CELEBA, AttributeSchema

CROP = 178
SIZE = 128
ANNOTATION = "list_attr_celeba.txt"
HAIR_FLAGS = {"Black_Hair": "black", "Blond_Hair": "blond", "Brown_Hair": "brown"}


def parse_attributes(path: str | Path) -> tuple[list[str], dict[str, dict[str, int]]]:
    """Parse ``list_attr_celeba.txt``: count line, header line, then ``file +-1 ...`` rows."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing CelebA annotation file {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise IngestionError(f"{path}: truncated annotation file")
    header = lines[1].split()
    table: dict[str, dict[str, int]] = {}
    order: list[str] = []
    for line in lines[2:]:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != len(header) + 1:
            raise IngestionError(f"{path}: row for {parts[0]} has {len(parts) - 1} flags, expected {len(header)}")
        table[parts[0]] = dict(zip(header, map(int, parts[1:])))
        order.append(parts[0])
    return order, table


def map_labels(flags: dict[str, int]) -> dict[str, str] | None:
    """Schema labels for one face, or None when the hair color is ambiguous."""
    hair = [v for k, v in HAIR_FLAGS.items() if flags.get(k) == 1]
    if len(hair) != 1:
        return None
    return {
        "hair": hair[0],
        "gender": "male" if flags["Male"] == 1 else "female",
        "smile": "smile" if flags["Smiling"] == 1 else "nosmile",
    }


def crop_resize(img: Image.Image, crop: int = CROP, size: int = SIZE) -> Image.Image:
    w, h = img.size
    left, top = (w - crop) // 2, (h - crop) // 2
    return img.crop((left, top, left + crop, top + crop)).resize((size, size), Image.BILINEAR)


def ingest_celeba(
    root: str | Path,
    out_root: str | Path,
    schema: AttributeSchema = CELEBA,
    test_count: int = 2000,
    seed: int = 0,
    image_dir: str = "img_align_celeba",
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write cropped 128x128 faces plus ``train.csv`` / ``test.csv`` under ``out_root``.

    ``test_count`` eligible images are held out uniformly at random (seeded).
    """
    root, out = Path(root), Path(out_root)
    order, table = parse_attributes(root / ANNOTATION)
    eligible = [(f, lab) for f in order if (lab := map_labels(table[f])) is not None]
    if test_count > len(eligible):
        raise IngestionError(f"test_count {test_count} exceeds {len(eligible)} eligible images")

    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for src, labels in eligible:
        try:
            img = Image.open(root / image_dir / src).convert("RGB")
        except OSError as e:
            raise IngestionError(f"cannot read CelebA image {src}: {e}") from e
        dst = f"images/{Path(src).stem}.png"
        crop_resize(img).save(out / dst)
        rows.append((dst, labels))

    full = DatasetManifest(out, schema, rows, split="all", seed=seed)
    full.write("manifest.csv")
    perm = np.random.default_rng(seed).permutation(len(rows))
    test = full.subset(sorted(perm[:test_count]), "test")
    train = full.subset(sorted(perm[test_count:]), "train")
    train.write("train.csv")
    test.write("test.csv")
    schema.save(out / "schema.json")
    meta = {"source_images": len(order), "eligible": len(rows), "test_count": test_count, "seed": seed, "image_size": SIZE}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return train, test
