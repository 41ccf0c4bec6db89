"""Small numpy classifiers with hand-written backward passes.

A :class:`Model` is a list of layers acting on batches shaped ``(B, C, H, W)``.
It serves as the gradient oracle for the attacks: ``predict``,
``loss_and_input_grad`` and ``features``. Single images ``(C, H, W)`` are
accepted everywhere and treated as a batch of one.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import FLOAT, SeededRng

# He-uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases start at zero.
INIT_GAIN = 6.0


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


class HeaderShapeError(ModelFormatError):
    pass


# -- layers ------------------------------------------------------------------

class Conv3x3:
    tag = 0

    def __init__(self, cin, cout, dtype=FLOAT):
        self.cin, self.cout = cin, cout
        self.weight = np.zeros((cout, cin, 3, 3), dtype=dtype)
        self.bias = np.zeros(cout, dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.cin:
            raise ValueError(f"Conv3x3 expects {self.cin} channels, got {c}")
        return (self.cout, h, w)

    def forward(self, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))        # b, c, h, w, 3, 3
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
        out = cols @ self.weight.reshape(self.cout, -1).T + self.bias
        return out.reshape(b, h, w, self.cout).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, grad, cache):
        cols, (b, c, h, w) = cache
        g = grad.transpose(0, 2, 3, 1).reshape(b * h * w, self.cout)
        dw = (g.T @ cols).reshape(self.weight.shape)
        db = g.sum(axis=0)
        dcols = (g @ self.weight.reshape(self.cout, -1)).reshape(b, h, w, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=grad.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], [dw, db]


class ReLU:
    tag = 1

    def params(self):
        return []

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        active = x > 0
        return np.where(active, x, 0).astype(x.dtype), active

    def backward(self, grad, active):
        return np.where(active, grad, 0).astype(grad.dtype), []


class MaxPool2:
    tag = 2

    def params(self):
        return []

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ValueError(f"MaxPool2 needs even spatial size, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        b, c, h, w = x.shape
        win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, grad, cache):
        arg, (b, c, h, w) = cache
        win = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
        dx = win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return dx, []


class Flatten:
    tag = 3

    def __init__(self, in_shape):
        self.in_shape = tuple(int(v) for v in in_shape)

    def params(self):
        return []

    def out_shape(self, shape):
        if tuple(shape) != self.in_shape:
            raise ValueError(f"Flatten expects {self.in_shape}, got {tuple(shape)}")
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, shape):
        return grad.reshape(shape), []


class Dense:
    tag = 4

    def __init__(self, nin, nout, dtype=FLOAT):
        self.nin, self.nout = nin, nout
        self.weight = np.zeros((nout, nin), dtype=dtype)
        self.bias = np.zeros(nout, dtype=dtype)

    def params(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        if tuple(shape) != (self.nin,):
            raise ValueError(f"Dense expects ({self.nin},), got {tuple(shape)}")
        return (self.nout,)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, grad, x):
        return grad @ self.weight, [grad.T @ x, grad.sum(axis=0)]


LAYER_TYPES = {cls.tag: cls for cls in (Conv3x3, ReLU, MaxPool2, Flatten, Dense)}


# -- model -------------------------------------------------------------------

def _log_softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Model:
    def __init__(self, layers, input_shape, name="model"):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ValueError(f"model must end in a flat logit vector, got shape {shape}")
        self.num_classes = shape[0]

    def __repr__(self):
        kinds = "-".join(type(layer).__name__ for layer in self.layers)
        return f"Model({self.name!r}, {self.input_shape}, {kinds})"

    @property
    def dtype(self):
        ps = self.params()
        return ps[0].dtype if ps else FLOAT

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def astype(self, dtype):
        """Deep copy with every weight cast, e.g. to float64 for gradient checks."""
        other = copy.deepcopy(self)
        for layer in other.layers:
            for attr in ("weight", "bias"):
                if hasattr(layer, attr):
                    setattr(layer, attr, getattr(layer, attr).astype(dtype))
        return other

    def _batch(self, x):
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x.astype(self.dtype, copy=False), single

    def forward(self, x, keep_cache=True):
        x, single = self._batch(x)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache if keep_cache else None)
        return (x[0] if single else x), caches

    def logits(self, x):
        return self.forward(x, keep_cache=False)[0]

    def predict(self, x):
        """Class probabilities."""
        return np.exp(_log_softmax(self.logits(x))).astype(self.dtype)

    def classify(self, x, batch_size=512):
        x = np.asarray(x)
        if x.ndim == 3:
            return int(np.argmax(self.logits(x)))
        return np.concatenate([np.argmax(self.logits(x[i:i + batch_size]), axis=-1)
                               for i in range(0, len(x), batch_size)]) if len(x) else np.zeros(0, int)

    def _loss_grad(self, x, y, want_params):
        xb, single = self._batch(x)
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        if y.shape != (xb.shape[0],):
            y = np.broadcast_to(y, (xb.shape[0],))
        if np.any((y < 0) | (y >= self.num_classes)):
            raise ValueError(f"class index out of range [0, {self.num_classes})")
        out = xb
        caches = []
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        logp = _log_softmax(out)
        losses = -logp[np.arange(len(y)), y]
        g = np.exp(logp)
        g[np.arange(len(y)), y] -= 1.0
        g = g.astype(self.dtype)
        pgrads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, pg = layer.backward(g, cache)
            if want_params:
                pgrads = pg + pgrads
        return losses, g, pgrads, single

    def loss_and_input_grad(self, x, y):
        """Softmax cross-entropy and its gradient w.r.t. the input.

        For a batch, returns per-sample losses and per-sample gradients.
        """
        losses, g, _, single = self._loss_grad(x, y, want_params=False)
        if single:
            return float(losses[0]), g[0]
        return losses, g

    def features(self, x):
        """Every post-ReLU activation, in layer order."""
        x, single = self._batch(x)
        maps = []
        for layer in self.layers:
            x, _ = layer.forward(x)
            if isinstance(layer, ReLU):
                maps.append(x[0] if single else x)
        return maps


def forward(model: Model, x):
    return model.forward(x)


def loss_and_input_grad(model: Model, x, y):
    return model.loss_and_input_grad(x, y)


# -- architectures -----------------------------------------------------------

def build_arch(name: str, input_shape=(1, 16, 16), num_classes=10) -> Model:
    c, h, w = input_shape
    if name == "cnn-a":
        layers = [Conv3x3(c, 8), ReLU(), MaxPool2(),
                  Conv3x3(8, 16), ReLU(), MaxPool2(),
                  Flatten((16, h // 4, w // 4)), Dense(16 * (h // 4) * (w // 4), num_classes)]
    elif name == "cnn-b":
        layers = [Conv3x3(c, 12), ReLU(), Conv3x3(12, 12), ReLU(), MaxPool2(),
                  Conv3x3(12, 24), ReLU(), MaxPool2(),
                  Flatten((24, h // 4, w // 4)), Dense(24 * (h // 4) * (w // 4), 64), ReLU(),
                  Dense(64, num_classes)]
    elif name == "mlp":
        layers = [Flatten((c, h, w)), Dense(c * h * w, 128), ReLU(),
                  Dense(128, 64), ReLU(), Dense(64, num_classes)]
    else:
        raise ValueError(f"unknown architecture {name!r}")
    return Model(layers, input_shape, name)


ARCHITECTURES = ("cnn-a", "cnn-b", "mlp")


def init_weights(model: Model, rng: SeededRng) -> Model:
    for i, layer in enumerate(model.layers):
        if not layer.params():
            continue
        w = layer.weight
        fan_in = int(np.prod(w.shape[1:]))
        bound = np.sqrt(INIT_GAIN / fan_in)
        layer.weight = rng.substream(i).uniform(-bound, bound, size=w.shape).astype(w.dtype)
        layer.bias = np.zeros_like(layer.bias)
    return model


@dataclass
class TrainLog:
    epoch_losses: list
    train_accuracy: float | None = None
    test_accuracy: float | None = None


def train(model: Model, images, labels, epochs: int, lr: float, rng: SeededRng,
          batch_size: int = 64, momentum: float = 0.9, weight_decay: float = 0.0,
          init: bool = True, test=None, log=None):
    """Minibatch SGD (heavy-ball momentum) on softmax cross-entropy.

    ``rng`` is split into an init stream (0) and a shuffle stream (1), so two
    runs with equal seeds give bit-identical weights.
    """
    images = np.asarray(images, dtype=FLOAT)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if init:
        init_weights(model, rng.substream(0))
    shuffle = rng.substream(1)
    velocity = [np.zeros_like(p) for p in model.params()]
    history = TrainLog(epoch_losses=[])
    for epoch in range(epochs):
        order = shuffle.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            losses, _, grads, _ = model._loss_grad(images[idx], labels[idx], want_params=True)
            total += float(losses.sum())
            scale = 1.0 / len(idx)
            for p, g, v in zip(model.params(), grads, velocity):
                step = g * scale + weight_decay * p
                v *= momentum
                v += step.astype(v.dtype)
                p -= (lr * v).astype(p.dtype)
        history.epoch_losses.append(total / len(images))
        if log:
            log(f"{model.name} epoch {epoch + 1}/{epochs} loss {history.epoch_losses[-1]:.4f}")
    history.train_accuracy = float(np.mean(model.classify(images) == labels))
    if test is not None:
        history.test_accuracy = float(np.mean(model.classify(test[0]) == np.asarray(test[1])))
    model.train_log = history
    return model


# -- serialization -----------------------------------------------------------

MAGIC = b"SIAM"
VERSION = 1


def save_model(model: Model, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<B", layer.tag))
        if isinstance(layer, Conv3x3):
            parts.append(struct.pack("<II", layer.cin, layer.cout))
        elif isinstance(layer, Dense):
            parts.append(struct.pack("<II", layer.nin, layer.nout))
        elif isinstance(layer, Flatten):
            parts.append(struct.pack("<III", *layer.in_shape))
        for p in layer.params():
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count, what):
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def floats(self, shape, what):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(FLOAT).reshape(shape)


def load_model(path, name: str | None = None) -> Model:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a SIAM model file")
    (version,) = r.u32(1, "version")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    (count,) = r.u32(1, "layer count")
    layers = []
    for i in range(count):
        (tag,) = struct.unpack("<B", r.take(1, f"layer {i} tag"))
        if tag not in LAYER_TYPES:
            raise HeaderShapeError(f"layer {i}: unknown kind tag {tag}")
        if tag == Conv3x3.tag:
            cin, cout = r.u32(2, f"layer {i} shape")
            layer = Conv3x3(cin, cout)
            layer.weight = r.floats((cout, cin, 3, 3), f"layer {i} weights")
            layer.bias = r.floats((cout,), f"layer {i} biases")
        elif tag == Dense.tag:
            nin, nout = r.u32(2, f"layer {i} shape")
            layer = Dense(nin, nout)
            layer.weight = r.floats((nout, nin), f"layer {i} weights")
            layer.bias = r.floats((nout,), f"layer {i} biases")
        elif tag == Flatten.tag:
            layer = Flatten(r.u32(3, f"layer {i} shape"))
        else:
            layer = LAYER_TYPES[tag]()
        layers.append(layer)
    if r.pos != len(data):
        raise HeaderShapeError(f"{path}: {len(data) - r.pos} unexpected trailing bytes")
    try:
        input_shape = _infer_input_shape(layers)
        return Model(layers, input_shape, name or Path(path).stem)
    except ValueError as exc:
        raise HeaderShapeError(f"{path}: inconsistent layer shapes: {exc}") from None


def _infer_input_shape(layers):
    flat = next((i for i, layer in enumerate(layers) if isinstance(layer, Flatten)), None)
    if flat is None:
        raise ValueError("no Flatten layer, cannot recover the input shape")
    c, h, w = layers[flat].in_shape
    for layer in reversed(layers[:flat]):
        if isinstance(layer, MaxPool2):
            h, w = 2 * h, 2 * w
        elif isinstance(layer, Conv3x3):
            c = layer.cin
    return (c, h, w)
