"""IDX byte-format reading/writing and MNIST glyph sources."""

from __future__ import annotations

import gzip
import shutil
import struct
import tempfile
import urllib.request
from pathlib import Path

import numpy as np


class IngestionError(RuntimeError):
    pass


_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}

IMAGE_FILES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
LABEL_FILES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as e:
        raise IngestionError(f"cannot read IDX file {path}: {e}") from e
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"{path} is not an IDX file (bad magic)")
    code, ndim = raw[2], raw[3]
    if code not in _DTYPES:
        raise IngestionError(f"{path}: unsupported IDX type code {code:#x}")
    shape = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_DTYPES[code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise IngestionError(f"{path}: payload size {data.size} does not match header shape {shape}")
    return data.reshape(shape).astype(np.dtype(_DTYPES[code]).newbyteorder("="))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _CODES:
        raise ValueError(f"write_idx supports uint8/int8 only, got {array.dtype}")
    header = bytes([0, 0, _CODES[array.dtype], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _find(root: Path, stems: tuple[str, ...]) -> Path:
    for stem in stems:
        for cand in (root / stem, root / f"{stem}.gz"):
            if cand.exists():
                return cand
    raise IngestionError(f"no file named one of {stems} (optionally .gz) under {root}")


def load_mnist(source: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load ``(glyphs uint8 [N,28,28], labels int64 [N])`` from an IDX source.

    ``source`` is a directory holding the training image/label IDX pair, or an
    http(s)/file URL to such a directory. The special value ``"bundled"``
    uses the 5,000-digit MNIST subset shipped with mlxtend.
    """
    source = str(source)
    if source == "bundled":
        return bundled_mnist()
    if "://" in source:
        return _load_url(source)
    root = Path(source)
    if not root.is_dir():
        raise IngestionError(f"MNIST source {root} is not a directory")
    images = read_idx(_find(root, IMAGE_FILES))
    labels = read_idx(_find(root, LABEL_FILES))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IngestionError(f"inconsistent MNIST arrays: {images.shape} vs {labels.shape}")
    return images.astype(np.uint8), labels.astype(np.int64)


def _load_url(base: str) -> tuple[np.ndarray, np.ndarray]:
    base = base.rstrip("/")
    with tempfile.TemporaryDirectory() as tmp:
        for name in (IMAGE_FILES[0] + ".gz", LABEL_FILES[0] + ".gz"):
            try:
                with urllib.request.urlopen(f"{base}/{name}") as resp, open(Path(tmp) / name, "wb") as out:
                    shutil.copyfileobj(resp, out)
            except OSError as e:
                raise IngestionError(f"cannot fetch {base}/{name}: {e}") from e
        return load_mnist(tmp)


def bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise IngestionError("the 'bundled' MNIST source requires mlxtend (pip install mlxtend)") from e
    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64)


def export_idx(out_dir: str | Path, images: np.ndarray, labels: np.ndarray, *, compress: bool = True) -> Path:
    """Write an image/label pair in the standard MNIST IDX layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".gz" if compress else ""
    write_idx(out / f"{IMAGE_FILES[0]}{ext}", images.astype(np.uint8))
    write_idx(out / f"{LABEL_FILES[0]}{ext}", labels.astype(np.uint8))
    return out
