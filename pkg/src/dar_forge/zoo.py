"""Three victim architectures of graded size, their training loop and checkpoints.

The triple is a desk-scale stand-in for a small / medium / large family of
image classifiers. At 1x28x28 input and 10 classes the parameter counts are
55,338 (``dar_small``), 206,026 (``dar_medium``) and 481,130 (``dar_large``).
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from dar_forge.autodiff import (
    AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU, forward, softmax_xent,
)
from dar_forge.errors import IntegrityError, RejectedInputError

MAGIC = b"DARW"
FORMAT_VERSION = 1

# layer specs: ("conv", out_channels) is a 3x3 same-padded convolution
_ARCHITECTURES = {
    "dar_small": [
        ("conv", 16), ("relu",), ("maxpool", 2),
        ("conv", 32), ("relu",), ("maxpool", 2),
        ("flatten",), ("dense", 32), ("relu",), ("dense", None),
    ],
    "dar_medium": [
        ("conv", 32), ("relu",), ("maxpool", 2),
        ("conv", 64), ("relu",), ("maxpool", 2),
        ("conv", 64), ("relu",), ("maxpool", 2),
        ("flatten",), ("dense", 256), ("relu",), ("dense", None),
    ],
    "dar_large": [
        ("conv", 32), ("relu",), ("maxpool", 2),
        ("conv", 64), ("relu",), ("maxpool", 2),
        ("conv", 128), ("relu",),
        ("conv", 128), ("relu",), ("maxpool", 2),
        ("flatten",), ("dense", 192), ("relu",), ("dense", 96), ("relu",), ("dense", None),
    ],
}
SPEC_NAMES = tuple(_ARCHITECTURES)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10

    def build(self):
        """Instantiate the architecture with zero weights."""
        shape = self.input_shape
        layers = []
        for entry in self.layers:
            kind = entry[0]
            if kind == "conv":
                layer = Conv2D(shape[0], entry[1], 3, stride=1, padding=1)
            elif kind == "dense":
                out = self.num_classes if entry[1] is None else entry[1]
                layer = Dense(shape[0], out)
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool":
                layer = MaxPool2D(entry[1])
            elif kind == "avgpool":
                layer = AvgPool2D(entry[1])
            elif kind == "flatten":
                layer = Flatten()
            else:
                raise RejectedInputError(f"unknown layer kind {kind!r}")
            shape = layer.output_shape(shape)
            layers.append(layer)
        return Model(layers, self.input_shape, self.num_classes, name=self.name)

    @property
    def param_count(self):
        return self.build().param_count


def canonical_specs(input_shape=(1, 28, 28), num_classes=10):
    """The (dar_small, dar_medium, dar_large) triple for a given input geometry."""
    return tuple(ModelSpec(name, tuple(layers), tuple(input_shape), num_classes)
                 for name, layers in _ARCHITECTURES.items())


def get_spec(name, input_shape=(1, 28, 28), num_classes=10):
    for spec in canonical_specs(input_shape, num_classes):
        if spec.name == name:
            return spec
    raise RejectedInputError(f"unknown model spec {name!r}; valid names: {', '.join(SPEC_NAMES)}")


def init_model(spec, seed):
    """He-normal weights, zero biases, drawn from a seeded generator."""
    model = spec.build()
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if layer.kind == "conv2d":
            fan_in = layer.weight[0].size
        elif layer.kind == "dense":
            fan_in = layer.weight.shape[0]
        else:
            continue
        layer.weight[...] = rng.standard_normal(layer.weight.shape) * np.sqrt(2.0 / fan_in)
    return model


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 0.05
    batch_size: int = 16
    seed: int = 0


def train_model(spec, dataset, cfg):
    """Train ``spec`` on ``dataset`` with plain minibatch SGD.

    Returns ``(model, history)`` where history holds one dict per epoch with
    the mean training loss and the running training accuracy.
    """
    if cfg.epochs < 1:
        raise RejectedInputError("epochs must be >= 1")
    if not cfg.lr > 0:
        raise RejectedInputError("lr must be > 0")
    if len(dataset) == 0:
        raise RejectedInputError("cannot train on an empty dataset")
    x = np.stack(dataset.images).astype(np.float32)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if x.shape[1:] != tuple(spec.input_shape):
        raise RejectedInputError(f"dataset images {x.shape[1:]} do not match spec input {spec.input_shape}")
    model = init_model(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    step = np.float32(cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        losses, correct = [], 0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, caches = model.logits_batch(x[idx])
            loss, dlogits, _ = softmax_xent(logits, y[idx])
            _, grads = model.backward_batch(dlogits, caches)
            for p, g in zip(model.params(), grads):
                p -= step * g
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        history.append({"epoch": epoch + 1, "loss": sum(losses) / len(y), "accuracy": correct / len(y)})
    return model, history


def evaluate(model, dataset):
    """Return ``(accuracy, mean true-class confidence)`` over ``dataset``."""
    if len(dataset) == 0:
        raise RejectedInputError("cannot evaluate on an empty dataset")
    correct = 0
    conf = 0.0
    for image, label in zip(dataset.images, dataset.labels):
        probs = forward(model, image)
        correct += int(np.argmax(probs) == label)
        conf += float(probs[label])
    return correct / len(dataset), conf / len(dataset)


def serialize_checkpoint(model):
    body = bytearray()
    name = model.name.encode("utf-8")
    body += struct.pack("<H", len(name)) + name
    body += struct.pack("<B", len(model.input_shape))
    body += struct.pack(f"<{len(model.input_shape)}I", *model.input_shape)
    body += struct.pack("<I", model.num_classes)
    params = model.params()
    body += struct.pack("<I", len(params))
    for p in params:
        body += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        body += p.astype("<f4").tobytes()
    head = MAGIC + struct.pack("<H", FORMAT_VERSION)
    return head + bytes(body) + struct.pack("<I", zlib.crc32(body))


def checkpoint_checksum(model):
    """The trailing CRC-32 a checkpoint of ``model`` would carry."""
    return struct.unpack("<I", serialize_checkpoint(model)[-4:])[0]


class _Reader:
    def __init__(self, data, pos):
        self.data = data
        self.pos = pos

    def take(self, fmt, field):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise IntegrityError(field, f"truncated at byte {self.pos}")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n, field):
        if self.pos + n > len(self.data):
            raise IntegrityError(field, f"truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def deserialize_checkpoint(data):
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise IntegrityError("magic", f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 10:
        raise IntegrityError("header", "file too short")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise IntegrityError("version", f"unsupported version {version}")
    body = data[6:-4]
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored:
        raise IntegrityError("checksum", f"stored {stored:#010x} != computed {zlib.crc32(body):#010x}")
    r = _Reader(body, 0)
    (nlen,) = r.take("<H", "spec name")
    try:
        name = r.raw(nlen, "spec name").decode("utf-8")
    except UnicodeDecodeError:
        raise IntegrityError("spec name", "not valid utf-8") from None
    (ndim,) = r.take("<B", "input shape")
    input_shape = r.take(f"<{ndim}I", "input shape")
    (num_classes,) = r.take("<I", "class count")
    try:
        model = get_spec(name, input_shape, num_classes).build()
    except RejectedInputError as exc:
        raise IntegrityError("spec name", str(exc)) from None
    params = model.params()
    (count,) = r.take("<I", "tensor count")
    if count != len(params):
        raise IntegrityError("tensor count", f"expected {len(params)}, got {count}")
    for i, p in enumerate(params):
        (nd,) = r.take("<B", f"tensor {i} shape")
        shape = r.take(f"<{nd}I", f"tensor {i} shape")
        if tuple(shape) != p.shape:
            raise IntegrityError(f"tensor {i} shape", f"expected {p.shape}, got {tuple(shape)}")
        payload = np.frombuffer(r.raw(4 * p.size, f"tensor {i} payload"), dtype="<f4")
        if not np.all(np.isfinite(payload)):
            raise IntegrityError(f"tensor {i} payload", "non-finite weight")
        p[...] = payload.reshape(p.shape)
    if r.pos != len(body):
        raise IntegrityError("trailer", f"{len(body) - r.pos} unexpected trailing bytes")
    return model


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(serialize_checkpoint(model))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return deserialize_checkpoint(f.read())
