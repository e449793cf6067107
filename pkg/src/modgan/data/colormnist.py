"""ColorMNIST: MNIST glyphs rendered with a digit color, stroke style and background color."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from modgan.data.manifest import DatasetManifest
from modgan.data.mnist_idx import load_mnist
from modgan.schema import COLORMNIST, AttributeSchema, SchemaError

log = logging.getLogger(__name__)

# The named colors have no canonical RGB; these constants are the fixed choice.
COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 20, 60),
    "blue": (0, 0, 255),
    "green": (0, 128, 0),
    "purple": (128, 0, 128),
    "brown": (139, 69, 19),
    "cyan": (0, 255, 255),
    "yellow": (255, 255, 0),
    "white": (255, 255, 255),
    "silver": (192, 192, 192),
    "salmon": (250, 128, 114),
}

FG_THRESHOLD = 0.5
TEST_FRACTION = 0.1


@dataclass
class LabeledImage:
    pixels: np.ndarray  # float32 [3, h, w] in [-1, 1]
    labels: dict[str, str]

    def to_uint8(self) -> np.ndarray:
        """``[h, w, 3]`` uint8, exact inverse of the normalization."""
        return np.rint((self.pixels + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def _rgb(name: str) -> np.ndarray:
    try:
        return np.array(COLORS[name], dtype=np.float32)
    except KeyError:
        raise SchemaError(f"unknown named color {name!r}; known: {sorted(COLORS)}") from None


def foreground_mask(glyph: np.ndarray, size: int | None = None) -> np.ndarray:
    """Binary glyph: intensity above half the glyph maximum, after optional resize."""
    glyph = np.asarray(glyph)
    if size is not None and glyph.shape != (size, size):
        glyph = np.asarray(
            Image.fromarray(glyph.astype(np.uint8)).resize((size, size), Image.BILINEAR), dtype=np.float32
        )
    glyph = glyph.astype(np.float32)
    peak = glyph.max()
    if peak <= 0:
        return np.zeros(glyph.shape, dtype=bool)
    return glyph > FG_THRESHOLD * peak


def outline(mask: np.ndarray) -> np.ndarray:
    """Mask minus its one-pixel (4-connected) erosion."""
    return mask & ~ndimage.binary_erosion(mask)


def render_digit(
    glyph: np.ndarray, color: str, style: str, bgcolor: str, size: int | None = None
) -> LabeledImage:
    if style not in ("flat", "stroke"):
        raise SchemaError(f"unknown style {style!r}")
    fg, bg = _rgb(color), _rgb(bgcolor)
    mask = foreground_mask(glyph, size)
    if style == "stroke":
        mask = outline(mask)
    rgb = np.where(mask[..., None], fg, bg)
    pixels = (rgb / 127.5 - 1.0).astype(np.float32).transpose(2, 0, 1)
    return LabeledImage(pixels, {"color": color, "style": style, "bgcolor": bgcolor})


def synthesize_colormnist(
    mnist_source: str | Path,
    out_root: str | Path,
    count: int,
    image_size: int = 64,
    seed: int = 0,
    schema: AttributeSchema = COLORMNIST,
) -> DatasetManifest:
    """Render ``count`` images and write the dataset tree.

    Layout: ``images/NNNNNN.png``, ``manifest.csv`` (all rows), ``train.csv`` /
    ``test.csv`` (seeded 90/10 split), ``schema.json`` and ``meta.json``.
    Every attribute and the glyph are drawn independently and uniformly from a
    ``numpy`` generator seeded with ``seed``.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    root = Path(out_root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    glyphs, digits = load_mnist(mnist_source) if count else (np.zeros((0, 28, 28), np.uint8), np.zeros(0, np.int64))

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, max(len(glyphs), 1), size=count)
    draws = {a.name: rng.integers(0, a.size, size=count) for a in schema.attributes}

    rows = []
    for k in range(count):
        labels = {a.name: a.values[draws[a.name][k]] for a in schema.attributes}
        img = render_digit(glyphs[picks[k]], labels["color"], labels["style"], labels["bgcolor"], image_size)
        if schema.content is not None:
            labels[schema.content.name] = str(int(digits[picks[k]]))
        file = f"images/{k:06d}.png"
        Image.fromarray(img.to_uint8(), "RGB").save(root / file)
        rows.append((file, labels))
        if k and k % 10000 == 0:
            log.info("rendered %d/%d", k, count)

    manifest = DatasetManifest(root, schema, rows, split="all", seed=seed)
    manifest.write("manifest.csv")
    order = np.random.default_rng(seed + 1).permutation(count)
    n_test = int(round(count * TEST_FRACTION))
    manifest.subset(sorted(order[n_test:]), "train").write("train.csv")
    manifest.subset(sorted(order[:n_test]), "test").write("test.csv")
    schema.save(root / "schema.json")
    meta = {"count": count, "image_size": image_size, "seed": seed, "source": str(mnist_source), "test_count": n_test}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(root: str | Path, split: str, schema: AttributeSchema | None = None) -> DatasetManifest:
    """Read ``<root>/<split>.csv`` (``manifest`` for all rows)."""
    root = Path(root)
    if schema is None:
        schema = AttributeSchema.load(root / "schema.json")
    name = "manifest.csv" if split in ("all", "manifest") else f"{split}.csv"
    m = DatasetManifest.read(root / name, schema, split=split)
    meta = root / "meta.json"
    if meta.exists():
        m.seed = json.loads(meta.read_text()).get("seed")
    return m
