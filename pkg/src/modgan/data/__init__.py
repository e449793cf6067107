from modgan.data.colormnist import COLORS, LabeledImage, load_split, render_digit, synthesize_colormnist
from modgan.data.manifest import DatasetManifest, ImageSet, load_png, save_gray, save_png, to_float, to_uint8
from modgan.data.mnist_idx import IngestionError, load_mnist, read_idx, write_idx

__all__ = [
    "COLORS",
    "DatasetManifest",
    "ImageSet",
    "IngestionError",
    "LabeledImage",
    "load_mnist",
    "load_png",
    "load_split",
    "read_idx",
    "render_digit",
    "save_gray",
    "save_png",
    "synthesize_colormnist",
    "to_float",
    "to_uint8",
    "write_idx",
]
