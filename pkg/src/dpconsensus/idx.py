"""Reader and writer for the IDX binary format used by MNIST."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CountMismatchError, TruncatedFileError
from .objectives import LabeledDataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read(path: str | Path, magic: int, ndims: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than its magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_dataset(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> LabeledDataset:
    """Loads an images/labels IDX pair; pixels are flattened and scaled to [0, 1].

    Raises:
        BadMagicError: wrong magic number in either file.
        CountMismatchError: the files disagree on the number of items.
        TruncatedFileError: a file ends before its declared size.
    """
    images = _read(images_path, IMAGES_MAGIC, 3)
    labels = _read(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def find_mnist(directory: str | Path) -> dict[str, tuple[Path, Path]]:
    """Locates the train/test pairs under both common file-name conventions."""
    d = Path(directory)
    out = {}
    for split, stem in (("train", "train"), ("test", "t10k")):
        for sep in ("-", "."):
            img = d / f"{stem}-images{sep}idx3-ubyte"
            lab = d / f"{stem}-labels{sep}idx1-ubyte"
            if img.exists() and lab.exists():
                out[split] = (img, lab)
                break
    return out
