"""Dataset manifests: ``<root>/images/*.png`` plus CSV label tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from modgan.schema import AttributeSchema, SchemaError


@dataclass
class DatasetManifest:
    """Rows of ``(relative file, {attr: value})`` under ``root``.

    Label columns cover every schema attribute, content attribute first.
    """

    root: Path
    schema: AttributeSchema
    rows: list[tuple[str, dict[str, str]]] = field(default_factory=list)
    split: str = "all"
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def columns(self) -> list[str]:
        return [a.name for a in self.schema.all_attributes]

    def validate(self, check_files: bool = True) -> None:
        for file, labels in self.rows:
            for attr in self.schema.all_attributes:
                if attr.name not in labels:
                    raise SchemaError(f"{file}: missing label for {attr.name!r}")
                attr.index(labels[attr.name])
            if check_files and not (self.root / file).exists():
                raise FileNotFoundError(f"manifest row {file} has no file under {self.root}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["file", *self.columns])
        for file, labels in self.rows:
            w.writerow([file, *(labels[c] for c in self.columns)])
        return buf.getvalue()

    def write(self, name: str = "manifest.csv") -> Path:
        path = self.root / name
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read(cls, path: str | Path, schema: AttributeSchema, split: str = "all") -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "file":
                raise SchemaError(f"{path}: header must start with 'file'")
            rows = [(r[0], dict(zip(header[1:], r[1:]))) for r in reader if r]
        m = cls(path.parent, schema, rows, split=split)
        m.validate(check_files=False)
        return m

    def subset(self, indices, split: str) -> "DatasetManifest":
        return DatasetManifest(self.root, self.schema, [self.rows[i] for i in indices], split, self.seed)

    def label_indices(self, attrs: list[str] | None = None) -> np.ndarray:
        """Integer label matrix ``[N, len(attrs)]`` (default: transformable attributes)."""
        attrs = attrs or self.schema.names
        out = np.zeros((len(self.rows), len(attrs)), dtype=np.int64)
        for j, name in enumerate(attrs):
            a = self.schema.get(name)
            out[:, j] = [a.index(labels[name]) for _, labels in self.rows]
        return out

    def load_images(self) -> torch.Tensor:
        """All images as a uint8 tensor ``[N, 3, h, w]``."""
        if not self.rows:
            return torch.zeros((0, 3, 0, 0), dtype=torch.uint8)
        arrs = [np.asarray(Image.open(self.root / f).convert("RGB")) for f, _ in self.rows]
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


@dataclass
class ImageSet:
    """In-memory images (uint8) with per-attribute label indices."""

    images: torch.Tensor
    labels: torch.Tensor
    content: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_manifest(cls, m: DatasetManifest) -> "ImageSet":
        content = None
        if m.schema.content is not None and m.rows:
            content = torch.from_numpy(m.label_indices([m.schema.content.name])[:, 0])
        return cls(m.load_images(), torch.from_numpy(m.label_indices()), content)

    def batch(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return to_float(self.images[idx]), self.labels[idx]


def to_float(x: torch.Tensor) -> torch.Tensor:
    """uint8 ``[0, 255]`` to float ``[-1, 1]``."""
    return x.float() / 127.5 - 1.0


def to_uint8(x: torch.Tensor) -> torch.Tensor:
    return ((x.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)


def save_png(x: torch.Tensor, path: str | Path) -> None:
    arr = to_uint8(x).permute(1, 2, 0).cpu().numpy()
    Image.fromarray(arr, "RGB").save(path)


def load_png(path: str | Path, size: int | None = None) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return to_float(torch.from_numpy(np.array(img)).permute(2, 0, 1).contiguous())


def gray_uint8(mask: torch.Tensor) -> np.ndarray:
    """``[h, w]`` values in [0, 1] to ``round(255 * clamp(m))``."""
    return (mask.clamp(0, 1) * 255.0).round().to(torch.uint8).cpu().numpy()


def save_gray(mask: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(gray_uint8(mask.squeeze()), "L").save(path)
