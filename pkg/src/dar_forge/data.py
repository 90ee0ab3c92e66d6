"""Binary dataset parsers (IDX, CIFAR-10), subset selection and PPM image I/O."""

import gzip
import pathlib
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from dar_forge.errors import ParseError, RejectedInputError

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
MNIST_CLASSES = tuple(str(d) for d in range(10))
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class LabeledDataset:
    images: list
    labels: list
    class_names: tuple = field(default=MNIST_CLASSES)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise RejectedInputError(f"{len(self.images)} images but {len(self.labels)} labels")
        for label in self.labels:
            if not 0 <= label < len(self.class_names):
                raise RejectedInputError(f"label {label} outside [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        return LabeledDataset([self.images[i] for i in indices],
                              [self.labels[i] for i in indices], self.class_names)


def parse_idx_raw(data):
    """Parse an unsigned-byte IDX stream into a uint8 array with its declared dims."""
    data = bytes(data)
    if len(data) < 4:
        raise ParseError("IDX header truncated", 0)
    zero, dtype, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0:
        raise ParseError(f"bad IDX magic {data[:4].hex()}", 0)
    if dtype != 0x08:
        raise ParseError(f"unsupported IDX element type {dtype:#04x}", 2)
    if ndim < 1:
        raise ParseError("IDX stream declares zero dimensions", 3)
    if len(data) < 4 + 4 * ndim:
        raise ParseError(f"IDX dims truncated: need {4 * ndim} bytes", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(data) - start
    if expected != actual:
        raise ParseError(f"IDX payload length mismatch: expected {expected} bytes, got {actual}", start)
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(dims)


def parse_idx(data):
    """Parse an IDX stream, mapping bytes to float32 in [0, 1]."""
    return parse_idx_raw(data).astype(np.float32) / np.float32(255)


def parse_cifar10_batch(data):
    """Parse a CIFAR-10 binary batch (1 label byte + 3072 planar RGB bytes per record)."""
    data = bytes(data)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise ParseError(f"CIFAR-10 length {len(data)} is not a positive multiple of {CIFAR_RECORD}",
                         len(data) - len(data) % CIFAR_RECORD)
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(records[:, 0] > 9)
    if bad.size:
        i = int(bad[0])
        raise ParseError(f"CIFAR-10 label {records[i, 0]} out of range in record {i}", i * CIFAR_RECORD)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return LabeledDataset(list(pixels), [int(v) for v in records[:, 0]], CIFAR10_CLASSES)


def _read_bytes(path):
    path = pathlib.Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"{path}: corrupt gzip stream ({exc})", 0) from None
    return raw


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(directory / stem)


def load_mnist(directory, split="train"):
    """Load an MNIST-layout IDX pair (``train`` or ``t10k``) from ``directory``."""
    directory = pathlib.Path(directory)
    images = parse_idx(_read_bytes(_find(directory, f"{split}-images-idx3-ubyte")))
    labels = parse_idx_raw(_read_bytes(_find(directory, f"{split}-labels-idx1-ubyte")))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ParseError(f"MNIST image/label files disagree: {images.shape} vs {labels.shape}", 0)
    return LabeledDataset([im[None] for im in images], [int(v) for v in labels], MNIST_CLASSES)


def load_dataset(path, split="train"):
    """Load a dataset from an IDX directory or a CIFAR-10 ``.bin`` batch file."""
    path = pathlib.Path(path)
    if path.is_dir():
        return load_mnist(path, split)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_cifar10_batch(_read_bytes(path))


def subset_indices(labels, n, seed):
    """Indices of a deterministic stratified sample of ``n`` items without replacement.

    Classes are visited round-robin in a seeded order, each contributing its
    next item from a seeded per-class shuffle, so ``n`` equal to the class
    count yields one item per class.
    """
    labels = np.asarray(labels)
    if n < 0 or n > len(labels):
        raise RejectedInputError(f"cannot select {n} items from a dataset of {len(labels)}")
    rng = np.random.default_rng(seed)
    pools = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        pools.append(idx[rng.permutation(len(idx))])
    order = rng.permutation(len(pools))
    chosen = []
    depth = 0
    while len(chosen) < n:
        for c in order:
            if depth < len(pools[c]):
                chosen.append(int(pools[c][depth]))
                if len(chosen) == n:
                    break
        depth += 1
    return chosen


def select_subset(dataset, n, seed):
    """Stratified, seeded subset of ``dataset`` (see ``subset_indices``)."""
    return dataset.take(subset_indices(dataset.labels, n, seed))


def quantize(tensor):
    """Map [0, 1] floats to bytes, rounding half away from zero."""
    v = np.clip(np.asarray(tensor, dtype=np.float64) * 255.0, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8)


def write_ppm(tensor):
    """Encode a (3, H, W) tensor in [0, 1] as a binary P6 pixmap."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise RejectedInputError(f"write_ppm needs a (3, H, W) tensor, got {tensor.shape}")
    _, h, w = tensor.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(tensor).transpose(1, 2, 0).tobytes()


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\d+)")


def read_ppm(data):
    """Decode a binary P6 pixmap (maxval 255) into a (3, H, W) float32 tensor."""
    data = bytes(data)
    if data[:2] != b"P6":
        raise ParseError(f"not a P6 pixmap (magic {data[:2]!r})", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        m = _PPM_TOKEN.match(data, pos)
        if not m or m.start(1) == pos and pos == 2:
            raise ParseError(f"PPM {name} missing", pos)
        values.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = values
    if maxval != 255:
        raise ParseError(f"PPM maxval {maxval} unsupported (need 255)", pos)
    if w < 1 or h < 1:
        raise ParseError(f"PPM dimensions {w}x{h} invalid", pos)
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ParseError("PPM header not terminated by whitespace", pos)
    pos += 1
    need = 3 * w * h
    if len(data) - pos != need:
        raise ParseError(f"PPM payload length mismatch: expected {need} bytes, got {len(data) - pos}", pos)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def to_channels(tensor, channels):
    """Convert between 1- and 3-channel layouts (replicate or channel mean)."""
    c = tensor.shape[0]
    if c == channels:
        return tensor
    if c == 1 and channels == 3:
        return np.repeat(tensor, 3, axis=0)
    if c == 3 and channels == 1:
        return tensor.astype(np.float64).mean(axis=0, keepdims=True).astype(np.float32)
    raise RejectedInputError(f"cannot convert {c} channels to {channels}")


def pad_and_pool(dataset, pad, factor):
    """Zero-pad every image by ``pad`` pixels, then average-pool by ``factor``.

    Used to derive small-geometry corpora, e.g. 28x28 -> 32x32 -> 16x16.
    """
    out = []
    for im in dataset.images:
        p = np.pad(np.asarray(im, dtype=np.float32), ((0, 0), (pad, pad), (pad, pad)))
        c, h, w = p.shape
        pooled = p.reshape(c, h // factor, factor, w // factor, factor).astype(np.float64).mean(axis=(2, 4))
        out.append(pooled.astype(np.float32))
    return LabeledDataset(out, list(dataset.labels), dataset.class_names)
