"""Image dataset ingestion: MNIST IDX files and directories of binary PGMs."""

from __future__ import annotations

import gzip
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_PGM_NAME = re.compile(r"obj(\d+)__(\d+)\.pgm$")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images of shape ``(N, C, H, W)`` scaled to ``[0, 1]`` plus int labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim == 3:
            self.images = self.images[:, None]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = None if n is None else start + n
        return Dataset(self.images[start:stop], self.labels[start:stop], self.split, self.source)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, path) -> np.ndarray:
    if len(buf) < 8:
        raise DatasetError(f"{path}: truncated header ({len(buf)} bytes)")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DatasetError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DatasetError(f"{path}: truncated header, expected {header} bytes, got {len(buf)}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for dims {dims}, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DatasetError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), split, "idx")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Decode a binary (P5) PGM into a float array in ``[0, 1]``."""
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: bad PGM header") from exc
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    if len(buf) - pos < need:
        raise DatasetError(f"{path}: expected {need} pixel bytes, got {len(buf) - pos}")
    pix = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return (pix.reshape(height, width) / float(maxval)).astype(np.float32)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    image = np.asarray(image)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(image.astype(np.uint8 if maxval <= 255 else ">u2").tobytes())


def load_pgm_dir(path, split: str = "train") -> Dataset:
    """Load ``obj<label>__<angle>.pgm`` files; labels are densely re-indexed
    in ascending order of the object number."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file())
    entries = []
    for f in files:
        m = _PGM_NAME.match(f.name)
        if not m:
            raise DatasetError(f"{f}: name does not match obj<label>__<angle>.pgm")
        entries.append((int(m.group(1)), int(m.group(2)), f))
    if not entries:
        log.warning("no PGM files in %s", path)
        return Dataset(np.zeros((0, 1, 0, 0), np.float32), np.zeros(0, np.int64), split, "pgm")
    entries.sort()
    index = {obj: i for i, obj in enumerate(sorted({e[0] for e in entries}))}
    images = [read_pgm(f) for _, _, f in entries]
    if len({im.shape for im in images}) != 1:
        raise DatasetError(f"{path}: images differ in size")
    labels = np.array([index[obj] for obj, _, _ in entries], dtype=np.int64)
    return Dataset(np.stack(images)[:, None], labels, split, "pgm")


def load_dataset(path, split: str = "train") -> Dataset:
    """Load MNIST-style IDX files from a directory (``train-*`` or ``t10k-*``
    depending on ``split``) or, failing that, a PGM directory."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"{path}: not a directory")
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = path / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = path / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return load_idx(img, lab, split)
    return load_pgm_dir(path, split)


def fit_to_input(images: np.ndarray, channels: int, rows: int, cols: int) -> np.ndarray:
    """Zero-pad (centred) or centre-crop to ``rows x cols`` and replicate a
    single channel up to ``channels``."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    n, c, h, w = images.shape
    out = np.zeros((n, c, rows, cols), dtype=images.dtype)
    top, left = (rows - h) // 2, (cols - w) // 2
    src_r0, dst_r0 = max(0, -top), max(0, top)
    src_c0, dst_c0 = max(0, -left), max(0, left)
    hh, ww = min(h - src_r0, rows - dst_r0), min(w - src_c0, cols - dst_c0)
    out[:, :, dst_r0:dst_r0 + hh, dst_c0:dst_c0 + ww] = images[:, :, src_r0:src_r0 + hh, src_c0:src_c0 + ww]
    if c == channels:
        return out
    if c == 1:
        return np.repeat(out, channels, axis=1)
    raise DatasetError(f"cannot map {c} image channels onto {channels} input channels")


def binarize(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images) >= 0.5).astype(np.int8)
