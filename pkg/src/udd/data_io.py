"""Dataset ingestion and artifact persistence.

File formats
------------
IDX (MNIST / FashionMNIST): big-endian; magic 0x00000803 for images
(count, rows, cols follow) and 0x00000801 for labels (count follows), then
raw unsigned bytes. Gzipped files are accepted transparently.

CIFAR-style raw binary: fixed-size records of ``1 label byte + ch*H*W pixel
bytes`` (channel-major, row-major within a channel).

UDDS (synthetic set), little-endian::

    b"UDDS" | u8 version | u8 dtype code (1 = f64)
    u32 classes | u32 ipc | u32 ch | u32 H | u32 W | u64 iteration
    f64[ch] mean | f64[ch] std | 32 bytes config digest (sha256)
    f64[classes*ipc*ch*H*W] pixels, class-major

UDDT (named tensors, used for model parameters and run state), little-endian::

    b"UDDT" | u8 version | u32 json_len | json metadata | u32 count
    per tensor: u16 name_len | name | u8 ndim | u32[ndim] dims | f64 payload
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

UDDS_MAGIC = b"UDDS"
UDDS_VERSION = 1
UDDT_MAGIC = b"UDDT"
UDDT_VERSION = 1

METRICS_HEADER = ["iter", "class", "loss_g", "loss_c", "loss_total", "lr", "policy", "seed"]


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class ConfigHashWarning(UserWarning):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, ch, H, W]
    labels: np.ndarray  # [N] int64
    classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def indices_by_class(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.classes)]

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx)
        return LabeledImages(self.images[idx], self.labels[idx], self.classes)


@dataclass
class SyntheticDataset:
    images: np.ndarray      # [C, IPC, ch, H, W], normalized pixel space
    mean: np.ndarray        # [ch]
    std: np.ndarray         # [ch]
    iteration: int = 0
    config_hash: str = "0" * 64

    @property
    def classes(self) -> int:
        return self.images.shape[0]

    @property
    def ipc(self) -> int:
        return self.images.shape[1]

    def flat(self) -> LabeledImages:
        c, k = self.images.shape[:2]
        return LabeledImages(self.images.reshape(c * k, *self.images.shape[2:]).copy(),
                             np.repeat(np.arange(c), k), c)

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.images.copy(), self.mean.copy(), self.std.copy(),
                                self.iteration, self.config_hash)


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError("IDX header truncated")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError("IDX dimension fields truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"IDX payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> LabeledImages:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    pix = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    lab = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if pix.shape[0] != lab.shape[0]:
        raise CountMismatchError(f"{pix.shape[0]} images but {lab.shape[0]} labels")
    images = (pix.astype(np.float64) / 255.0)[:, None, :, :]
    return LabeledImages(images, lab.astype(np.int64), classes)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_cifar_binary(path, shape=(3, 32, 32), classes: int = 10) -> LabeledImages:
    raw = _read_bytes(path)
    rec = 1 + int(np.prod(shape))
    if len(raw) % rec:
        raise TruncatedFileError(f"{len(raw)} bytes is not a multiple of the {rec}-byte record")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    return LabeledImages(data[:, 1:].reshape(-1, *shape).astype(np.float64) / 255.0,
                         data[:, 0].astype(np.int64), classes)


# ---------------------------------------------------------------- normalisation

def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def _check_stats(mean, std, ch):
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if mean.size != ch or std.size != ch:
        raise ValueError(f"stats for {mean.size}/{std.size} channels, images have {ch}")
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    return mean.reshape(1, ch, 1, 1), std.reshape(1, ch, 1, 1)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m, s = _check_stats(mean, std, images.shape[-3])
    return (images - m) / s


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    m, s = _check_stats(mean, std, images.shape[-3])
    return images * s + m


# ---------------------------------------------------------------- UDDS

_UDDS_HEAD = struct.Struct("<4sBBIIIIIQ")


def save_synthetic(path, syn: SyntheticDataset) -> None:
    c, k, ch, h, w = syn.images.shape
    digest = bytes.fromhex(syn.config_hash)
    if len(digest) != 32:
        raise ValueError("config_hash must be 64 hex characters")
    buf = io.BytesIO()
    buf.write(_UDDS_HEAD.pack(UDDS_MAGIC, UDDS_VERSION, 1, c, k, ch, h, w, int(syn.iteration)))
    buf.write(np.asarray(syn.mean, dtype="<f8").tobytes())
    buf.write(np.asarray(syn.std, dtype="<f8").tobytes())
    buf.write(digest)
    buf.write(np.ascontiguousarray(syn.images, dtype="<f8").tobytes())
    _atomic_write(path, buf.getvalue())


def load_synthetic(path, expected_hash: str | None = None) -> SyntheticDataset:
    """Read a UDDS file. A config-hash mismatch is reported as ``ConfigHashWarning``."""
    raw = Path(path).read_bytes()
    if len(raw) < _UDDS_HEAD.size:
        raise TruncatedFileError("UDDS header truncated")
    magic, version, dtype_code, c, k, ch, h, w, it = _UDDS_HEAD.unpack_from(raw)
    if magic != UDDS_MAGIC:
        raise BadMagicError(f"not a UDDS file (magic {magic!r})")
    if version != UDDS_VERSION or dtype_code != 1:
        raise DataFormatError(f"unsupported UDDS version {version} / dtype {dtype_code}")
    off = _UDDS_HEAD.size
    need = off + 16 * ch + 32 + 8 * c * k * ch * h * w
    if len(raw) != need:
        raise TruncatedFileError(f"UDDS file has {len(raw)} bytes, expected {need}")
    mean = np.frombuffer(raw, "<f8", ch, off).astype(np.float64)
    std = np.frombuffer(raw, "<f8", ch, off + 8 * ch).astype(np.float64)
    off += 16 * ch
    digest = raw[off:off + 32].hex()
    off += 32
    images = np.frombuffer(raw, "<f8", c * k * ch * h * w, off).astype(np.float64).reshape(c, k, ch, h, w)
    if expected_hash is not None and expected_hash != digest:
        warnings.warn(f"config hash mismatch: file {digest[:12]}, current {expected_hash[:12]}",
                      ConfigHashWarning, stacklevel=2)
    return SyntheticDataset(images, mean, std, int(it), digest)


# ---------------------------------------------------------------- UDDT

def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(UDDT_MAGIC + struct.pack("<BI", UDDT_VERSION, len(blob)) + blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    _atomic_write(path, buf.getvalue())


def load_tensors(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != UDDT_MAGIC:
            raise BadMagicError(f"not a UDDT file (magic {raw[:4]!r})")
        version, jlen = struct.unpack_from("<BI", raw, 4)
        if version != UDDT_VERSION:
            raise DataFormatError(f"unsupported UDDT version {version}")
        off = 9
        meta = json.loads(raw[off:off + jlen])
        off += jlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + klen].decode()
            off += klen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(np.prod(dims))
            if off + 8 * n > len(raw):
                raise TruncatedFileError(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(raw, "<f8", n, off).astype(np.float64).reshape(dims)
            off += 8 * n
    except struct.error as exc:
        raise TruncatedFileError(f"UDDT file truncated: {exc}") from None
    if off != len(raw):
        raise DataFormatError("trailing bytes after UDDT payload")
    return tensors, meta


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# ---------------------------------------------------------------- PNG / CSV

def grid_image(syn: SyntheticDataset, pad: int = 2) -> np.ndarray:
    """uint8 grid with one row per class and IPC columns, [rows, cols, ch]."""
    c, k, ch, h, w = syn.images.shape
    pix = denormalize(syn.images.reshape(c * k, ch, h, w), syn.mean, syn.std)
    pix = np.round(np.clip(pix, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(c, k, ch, h, w)
    grid = np.zeros((c * (h + pad), k * (w + pad), ch), dtype=np.uint8)
    for i in range(c):
        for j in range(k):
            y, x = i * (h + pad), j * (w + pad)
            grid[y:y + h, x:x + w] = pix[i, j].transpose(1, 2, 0)
    return grid


def export_png_grid(syn: SyntheticDataset, path, pad: int = 2) -> None:
    from PIL import Image, PngImagePlugin

    grid = grid_image(syn, pad)
    img = Image.fromarray(grid[:, :, 0] if grid.shape[2] == 1 else grid)
    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", syn.config_hash)
    img.save(path, pnginfo=info)


def write_csv(path, header, rows, config_hash: str | None = None) -> None:
    """CSV with an optional leading ``# config_hash=...`` comment line."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def append_csv(path, header, rows, config_hash: str | None = None) -> None:
    path = Path(path)
    if not path.exists():
        write_csv(path, header, rows, config_hash)
        return
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_csv(path) -> tuple[str | None, list[dict]]:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    digest = None
    if lines and lines[0].startswith("# config_hash="):
        digest = lines[0].split("=", 1)[1]
        lines = lines[1:]
    return digest, list(csv.DictReader(lines))


# ---------------------------------------------------------------- dataset lookup

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_dir(name: str = "mnist") -> Path:
    """``$UDD_DATA_DIR/<name>`` if set, else ``/root/data/<name>``, else ``./data/<name>``."""
    env = os.environ.get("UDD_DATA_DIR")
    if env:
        return Path(env) / name
    for root in (Path("/root/data"), Path.cwd() / "data"):
        if (root / name).is_dir():
            return root / name
    return Path.cwd() / "data" / name


def load_split(split: str, name: str = "mnist", root=None) -> LabeledImages:
    """Load ``train`` or ``test`` of an IDX dataset directory (plain or ``.gz`` files)."""
    if split not in _IDX_NAMES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root) if root is not None else data_dir(name)
    paths = []
    for stem in _IDX_NAMES[split]:
        for cand in (root / stem, root / (stem + ".gz")):
            if cand.exists():
                paths.append(cand)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {root}")
    return load_idx(*paths)
