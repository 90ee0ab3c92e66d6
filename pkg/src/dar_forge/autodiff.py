"""Layer-wise forward/backward passes for small convolutional classifiers.

Images are float32 arrays laid out as (channels, height, width). Layers work
on a leading batch axis internally; the attack paths always feed a batch of
one so that every reduction happens in the same order run after run.

The loss J is cross-entropy on the softmax of the final layer's logits.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dar_forge.errors import RejectedInputError


class Layer:
    kind = "layer"
    param_names = ()

    def params(self):
        return [getattr(self, n) for n in self.param_names]

    def output_shape(self, input_shape):
        return input_shape

    def astype(self, dtype):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        for n in self.param_names:
            setattr(clone, n, getattr(self, n).astype(dtype))
        return clone


class Conv2D(Layer):
    """2-D cross-correlation with zero padding.

    Weight shape is (out_channels, in_channels, kh, kw).
    """

    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        if stride < 1 or padding < 0 or kernel_size < 1:
            raise RejectedInputError("conv2d needs stride >= 1, padding >= 0, kernel >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        self.weight = np.zeros((out_channels, in_channels, k, k), dtype=np.float32)
        self.bias = np.zeros(out_channels, dtype=np.float32)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise RejectedInputError(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise RejectedInputError(f"conv2d kernel {k} does not fit input {h}x{w}")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        n = x.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (x.shape, cols, ho, wo)

    def backward(self, dout, cache):
        x_shape, cols, ho, wo = cache
        n, c, h, w = x_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.weight.reshape(self.out_channels, -1)
        dweight = (dflat.T @ cols).reshape(self.weight.shape)
        dbias = dflat.sum(axis=0)
        dcols = (dflat @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, [dweight, dbias]


class Dense(Layer):
    """Fully connected layer, ``y = x @ weight + bias`` with weight (in, out)."""

    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((in_features, out_features), dtype=np.float32)
        self.bias = np.zeros(out_features, dtype=np.float32)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise RejectedInputError(f"dense expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def backward(self, dout, x):
        return dout @ self.weight.T, [x.T @ dout, dout.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, dout, positive):
        return dout * positive, []


class _Pool2D(Layer):
    def __init__(self, size=2):
        if size < 1:
            raise RejectedInputError("pool size must be >= 1")
        self.size = size

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h < self.size or w < self.size:
            raise RejectedInputError(f"pool {self.size} does not fit input {h}x{w}")
        return (c, h // self.size, w // self.size)

    def _windows(self, x):
        k = self.size
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        return x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)


class MaxPool2D(_Pool2D):
    """Non-overlapping max pooling; gradient goes to the first maximum."""

    kind = "maxpool2d"

    def forward(self, x):
        k = self.size
        win = self._windows(x).transpose(0, 1, 2, 4, 3, 5)
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        x_shape, arg = cache
        k = self.size
        n, c, ho, wo = dout.shape
        flat = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
        np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
        win = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, :ho * k, :wo * k] = win.reshape(n, c, ho * k, wo * k)
        return dx, []


class AvgPool2D(_Pool2D):
    kind = "avgpool2d"

    def forward(self, x):
        return self._windows(x).mean(axis=(3, 5)), x.shape

    def backward(self, dout, x_shape):
        k = self.size
        n, c, ho, wo = dout.shape
        share = np.repeat(np.repeat(dout / (k * k), k, axis=2), k, axis=3)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, :ho * k, :wo * k] = share
        return dx, []


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, x_shape):
        return dout.reshape(x_shape), []


def softmax(logits):
    """Row-wise softmax, evaluated in float64 and returned in the input dtype."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Returns ``(loss, dlogits, probabilities)``; ``loss`` is a python float.
    """
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= len(labels)
    return loss, grad.astype(logits.dtype), probs.astype(logits.dtype)


class Model:
    """An ordered list of layers ending in class logits (the classifier θ)."""

    def __init__(self, layers, input_shape, num_classes, name="model"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.name = name
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (num_classes,):
            raise RejectedInputError(f"model output shape {shape} != ({num_classes},)")

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params()))

    def astype(self, dtype):
        return Model([l.astype(dtype) for l in self.layers], self.input_shape,
                     self.num_classes, self.name)

    def copy(self):
        return self.astype(np.float32)

    def logits_batch(self, x):
        """Forward a (N, C, H, W) batch, returning logits and per-layer caches."""
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward_batch(self, dlogits, caches):
        """Backpropagate ``dlogits``; returns (grad wrt input, param grads in params() order)."""
        grads = []
        d = dlogits
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(d, cache)
            grads.append(g)
        flat = [g for layer_grads in reversed(grads) for g in layer_grads]
        return d, flat


@dataclass
class GradientBundle:
    grad_input: np.ndarray
    grad_params: list = field(default_factory=list)
    loss: float = 0.0


def _check_image(model, image):
    image = np.asarray(image)
    if image.shape != model.input_shape:
        raise RejectedInputError(f"image shape {image.shape} does not match model input {model.input_shape}")
    if not np.all(np.isfinite(image)):
        raise RejectedInputError("image contains non-finite values")
    return image


def _check_label(model, label):
    if not 0 <= int(label) < model.num_classes:
        raise RejectedInputError(f"label {label} outside [0, {model.num_classes})")
    return int(label)


def forward(model, image):
    """Class probabilities for a single (C, H, W) image."""
    image = _check_image(model, image)
    dtype = model.params()[0].dtype if model.params() else np.float32
    logits, _ = model.logits_batch(image[None].astype(dtype, copy=False))
    return softmax(logits)[0]


def loss_and_input_gradient(model, image, label):
    """Cross-entropy at ``label`` together with its gradient w.r.t. the image and weights."""
    image = _check_image(model, image)
    label = _check_label(model, label)
    dtype = model.params()[0].dtype if model.params() else np.float32
    logits, caches = model.logits_batch(image[None].astype(dtype, copy=False))
    loss, dlogits, _ = softmax_xent(logits, np.array([label]))
    dx, dparams = model.backward_batch(dlogits, caches)
    return GradientBundle(grad_input=dx[0], grad_params=dparams, loss=loss)


def _loss64(model64, x, label):
    logits, _ = model64.logits_batch(x[None])
    return softmax_xent(logits, np.array([label]))[0]


def finite_diff_gradient(model, image, label, h=1e-3):
    """Central-difference estimate of dJ/dx, evaluated entirely in float64."""
    if not h > 0:
        raise RejectedInputError("finite difference step must be positive")
    image = _check_image(model, image)
    label = _check_label(model, label)
    model64 = model.astype(np.float64)
    x = image.astype(np.float64)
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = _loss64(model64, x, label)
        flat[i] = orig - h
        down = _loss64(model64, x, label)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def finite_diff_param_gradients(model, image, label, h=1e-3):
    """Central-difference estimates of dJ/dw for every parameter tensor (float64)."""
    image = _check_image(model, image)
    label = _check_label(model, label)
    model64 = model.astype(np.float64)
    x = image.astype(np.float64)
    out = []
    for p in model64.params():
        g = np.zeros(p.size, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _loss64(model64, x, label)
            flat[i] = orig - h
            down = _loss64(model64, x, label)
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
        out.append(g.reshape(p.shape))
    return out


def train_step(model, batch, labels, lr):
    """One plain SGD step on the mean batch loss. Mutates ``model``; returns (model, loss)."""
    if not lr >= 0:
        raise RejectedInputError("learning rate must be non-negative")
    batch = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if batch.shape[1:] != model.input_shape or len(batch) != len(labels):
        raise RejectedInputError(f"batch shape {batch.shape} incompatible with model input {model.input_shape}")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise RejectedInputError("label out of range")
    logits, caches = model.logits_batch(batch)
    loss, dlogits, _ = softmax_xent(logits, labels)
    _, grads = model.backward_batch(dlogits, caches)
    if lr > 0:
        step = np.float32(lr)
        for p, g in zip(model.params(), grads):
            p -= step * g
    return model, loss
