"""Small dense/convolutional network engine with exact backpropagation.

Images are ``(H, W, C)`` float64 arrays in ``[0, 1]``; batches carry a
leading sample axis. Every layer output is checked for finiteness so a
blow-up is reported with the index of the layer that produced it.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericalError, ShapeError, TrainingError, UsageError

__all__ = [
    "Dense",
    "Conv2D",
    "MaxPool2D",
    "ReLU",
    "Softmax",
    "Flatten",
    "Network",
    "TrainResult",
    "forward",
    "input_gradient",
    "parameter_gradients",
    "sgd_step",
    "sgd_train",
    "save_weights",
    "load_weights",
    "weights_to_bytes",
    "weights_from_bytes",
]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Layer:
    kind = ""
    tag = 0

    @property
    def params(self) -> tuple[np.ndarray, ...]:
        return ()

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if params:
            raise ShapeError(f"{self.kind} layer has no parameters")

    def shape_ints(self) -> tuple[int, ...]:
        return ()

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def copy(self) -> "Layer":
        new = self.__class__(*self.shape_ints())
        new.set_params([p.copy() for p in self.params])
        return new

    def __repr__(self) -> str:
        args = ", ".join(str(i) for i in self.shape_ints())
        return f"{self.__class__.__name__}({args})"


class Dense(Layer):
    kind = "dense"
    tag = 1

    def __init__(self, n_in: int, n_out: int):
        if n_in <= 0 or n_out <= 0:
            raise ShapeError(f"dense widths must be positive, got {n_in}->{n_out}")
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.W = np.zeros((self.n_in, self.n_out))
        self.b = np.zeros(self.n_out)

    @property
    def params(self):
        return (self.W, self.b)

    def set_params(self, params):
        W, b = params
        if W.shape != (self.n_in, self.n_out) or b.shape != (self.n_out,):
            raise ShapeError(f"dense parameters {W.shape}, {b.shape} do not fit {self!r}")
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def shape_ints(self):
        return (self.n_in, self.n_out)

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"dense layer expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def init_params(self, rng):
        self.W = _glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out)
        self.b = np.zeros(self.n_out)

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, dout, x):
        return dout @ self.W.T, (x.T @ dout, dout.sum(axis=0))


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution over NHWC input."""

    kind = "conv2d"
    tag = 2

    def __init__(self, kh: int, kw: int, c_in: int, c_out: int):
        if min(kh, kw, c_in, c_out) <= 0:
            raise ShapeError("conv2d sizes must be positive")
        self.kh, self.kw, self.c_in, self.c_out = int(kh), int(kw), int(c_in), int(c_out)
        self.W = np.zeros((self.kh, self.kw, self.c_in, self.c_out))
        self.b = np.zeros(self.c_out)

    @property
    def params(self):
        return (self.W, self.b)

    def set_params(self, params):
        W, b = params
        if W.shape != (self.kh, self.kw, self.c_in, self.c_out) or b.shape != (self.c_out,):
            raise ShapeError(f"conv2d parameters {W.shape}, {b.shape} do not fit {self!r}")
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def shape_ints(self):
        return (self.kh, self.kw, self.c_in, self.c_out)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.c_in:
            raise ShapeError(f"conv2d expects (H, W, {self.c_in}), got {in_shape}")
        h, w = in_shape[0] - self.kh + 1, in_shape[1] - self.kw + 1
        if h <= 0 or w <= 0:
            raise ShapeError(f"input {in_shape} smaller than {self.kh}x{self.kw} kernel")
        return (h, w, self.c_out)

    def init_params(self, rng):
        area = self.kh * self.kw
        self.W = _glorot(rng, self.W.shape, area * self.c_in, area * self.c_out)
        self.b = np.zeros(self.c_out)

    def forward(self, x):
        # (N, Ho, Wo, Cin, kh, kw)
        win = sliding_window_view(x, (self.kh, self.kw), axis=(1, 2))
        out = np.tensordot(win, self.W.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
        return out + self.b, (x.shape, win)

    def backward(self, dout, cache):
        x_shape, win = cache
        dW = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        db = dout.sum(axis=(0, 1, 2))
        # full correlation of dout with the flipped kernel
        kh, kw = self.kh, self.kw
        padded = np.pad(dout, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        win_out = sliding_window_view(padded, (kh, kw), axis=(1, 2))
        flipped = self.W[::-1, ::-1].transpose(3, 0, 1, 2)
        dx = np.tensordot(win_out, flipped, axes=([3, 4, 5], [0, 1, 2]))
        return dx, (dW, db)


class MaxPool2D(Layer):
    """2x2 window, stride 2. Odd trailing rows/columns are dropped."""

    kind = "maxpool2d"
    tag = 3

    def __init__(self, ph: int = 2, pw: int = 2):
        if (ph, pw) != (2, 2):
            raise ShapeError("only 2x2 max pooling is supported")

    def shape_ints(self):
        return (2, 2)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (H, W, C), got {in_shape}")
        h, w = in_shape[0] // 2, in_shape[1] // 2
        if h == 0 or w == 0:
            raise ShapeError(f"input {in_shape} too small for 2x2 pooling")
        return (h, w, in_shape[2])

    def forward(self, x):
        n, H, W, c = x.shape
        ho, wo = H // 2, W // 2
        blocks = (
            x[:, : 2 * ho, : 2 * wo, :]
            .reshape(n, ho, 2, wo, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, 4)
        )
        # argmax returns the first maximal entry, i.e. row-major tie-breaking
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        (n, H, W, c), idx = cache
        ho, wo = dout.shape[1], dout.shape[2]
        routed = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(routed, idx[..., None], dout[..., None], axis=-1)
        routed = routed.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros((n, H, W, c))
        dx[:, : 2 * ho, : 2 * wo, :] = routed.reshape(n, 2 * ho, 2 * wo, c)
        return dx, None


class ReLU(Layer):
    kind = "relu"
    tag = 4

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, x):
        return dout * (x > 0), None


class Softmax(Layer):
    kind = "softmax"
    tag = 5

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a flat vector, got {in_shape}")
        return in_shape

    def forward(self, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p

    def backward(self, dout, p):
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True)), None


class Flatten(Layer):
    kind = "flatten"
    tag = 6

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), None


LAYER_TYPES: dict[int, type[Layer]] = {
    cls.tag: cls for cls in (Dense, Conv2D, MaxPool2D, ReLU, Softmax, Flatten)
}

@dataclass
class Trace:
    activations: list
    caches: list
    single: bool
    input_shape: tuple

    @property
    def probabilities(self) -> np.ndarray:
        return self.activations[-1]


# Objective callback: (probabilities, activations) -> (value, {layer index: d value / d output})
Objective = Callable[[np.ndarray, list], tuple[float, dict]]


class Network:
    """A layer sequence with its parameters.

    Shapes are checked layer by layer at construction, so an incompatible
    stack never gets as far as a forward pass.
    """

    def __init__(self, layers: Sequence[Layer], input_shape, name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.name = name
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {k} ({layer.kind}): {exc}") from None
        self.shapes = shapes
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ShapeError("network must end in a softmax layer")

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def init_params(self, seed) -> "Network":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)
        return self

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], self.input_shape, self.name)

    def get_params(self) -> list[tuple[np.ndarray, ...]]:
        return [layer.params for layer in self.layers]

    def set_params(self, params) -> None:
        for layer, p in zip(self.layers, params):
            layer.set_params(list(p))

    def kinds(self) -> list[str]:
        return [layer.kind for layer in self.layers]

    def _batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == len(self.input_shape) + 1 and x.shape[1:] == self.input_shape:
            return x, False
        raise ShapeError(f"input shape {x.shape} does not match model input {self.input_shape}")

    def _forward(self, xb: np.ndarray):
        acts, caches = [], []
        h = xb
        for k, layer in enumerate(self.layers):
            h, cache = layer.forward(h)
            if not np.isfinite(h.sum()):
                raise NumericalError(f"non-finite output in layer {k} ({layer.kind})", layer=k)
            acts.append(h)
            caches.append(cache)
        return acts, caches

    def _backward(self, caches, seeds: dict[int, np.ndarray], want_params: bool):
        grad = None
        pgrads: list = [()] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            if k in seeds:
                grad = seeds[k] if grad is None else grad + seeds[k]
            if grad is None:
                continue
            grad, pg = self.layers[k].backward(grad, caches[k])
            if not np.isfinite(grad.sum()):
                raise NumericalError(
                    f"non-finite gradient in layer {k} ({self.layers[k].kind})", layer=k
                )
            if want_params and pg is not None:
                pgrads[k] = pg
        if want_params:
            for k, layer in enumerate(self.layers):
                if layer.params and not pgrads[k]:
                    pgrads[k] = tuple(np.zeros_like(p) for p in layer.params)
        return grad, pgrads

    def forward(self, x):
        """Return ``(probabilities, activations)``; a single image gives unbatched arrays."""
        xb, single = self._batch(x)
        acts, _ = self._forward(xb)
        if single:
            acts = [a[0] for a in acts]
        return acts[-1], acts

    def predict_proba(self, X) -> np.ndarray:
        xb, single = self._batch(X)
        out = []
        for start in range(0, len(xb), 256):
            out.append(self._forward(xb[start:start + 256])[0][-1])
        p = np.concatenate(out) if out else np.zeros((0, self.n_classes))
        return p[0] if single else p

    def trace(self, x) -> "Trace":
        """Forward pass that keeps what backpropagation needs."""
        xb, single = self._batch(x)
        acts, caches = self._forward(xb)
        view = [a[0] for a in acts] if single else acts
        return Trace(view, caches, single, xb.shape)

    def backprop_input(self, trace: "Trace", seeds: dict) -> np.ndarray:
        """Gradient at the input given seeds (gradients w.r.t. layer outputs) for a traced pass."""
        if trace.single:
            seeds = {k: np.asarray(g, dtype=np.float64)[None] for k, g in seeds.items()}
        grad, _ = self._backward(trace.caches, seeds, want_params=False)
        if grad is None:
            grad = np.zeros(trace.input_shape)
        return grad[0] if trace.single else grad

    def value_and_input_gradient(self, x, objective: Objective):
        """Evaluate ``objective`` at ``x`` and backpropagate it to the input."""
        tr = self.trace(x)
        value, seeds = objective(tr.probabilities, tr.activations)
        return float(value), self.backprop_input(tr, seeds)

    def loss_and_gradients(self, X, y):
        """Mean cross-entropy over the batch and its parameter gradients."""
        xb, _ = self._batch(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        n = len(xb)
        if n == 0:
            raise UsageError("empty batch")
        if len(y) != n:
            raise UsageError(f"{n} images but {len(y)} labels")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise UsageError(f"labels must lie in [0, {self.n_classes})")
        acts, caches = self._forward(xb)
        p = acts[-1]
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
        # cross-entropy through softmax: gradient at the logits is (p - onehot) / n
        dlogits = p.copy()
        dlogits[np.arange(n), y] -= 1.0
        _, pgrads = self._backward(caches[:-1], {len(self.layers) - 2: dlogits / n}, True)
        return float(loss), pgrads[:-1] + [()]

    def __repr__(self) -> str:
        return f"Network({self.name!r}, input={self.input_shape}, layers={self.layers})"


def forward(model: Network, x):
    return model.forward(x)


def input_gradient(model: Network, x, objective: Objective) -> np.ndarray:
    return model.value_and_input_gradient(x, objective)[1]


def parameter_gradients(model: Network, X, y):
    return model.loss_and_gradients(X, y)[1]


def sgd_step(model: Network, grads, learning_rate: float, velocity=None, momentum: float = 0.0):
    """In-place (momentum) SGD update; ``learning_rate=0`` is a no-op."""
    for k, layer in enumerate(model.layers):
        if not layer.params:
            continue
        new = []
        for i, (p, g) in enumerate(zip(layer.params, grads[k])):
            if velocity is not None:
                v = velocity[k][i]
                v *= momentum
                v -= learning_rate * g
                new.append(p + v)
            else:
                new.append(p - learning_rate * g)
        layer.set_params(new)


@dataclass
class TrainResult:
    model: Network
    losses: list[float] = field(default_factory=list)
    accuracy: float = float("nan")


def accuracy(model: Network, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict_proba(X).argmax(axis=1) == y))


def sgd_train(
    model: Network,
    X,
    y,
    epochs: int,
    learning_rate: float,
    rng_seed: int,
    batch_size: int = 32,
    momentum: float = 0.9,
) -> TrainResult:
    """Mini-batch SGD on cross-entropy. The input model is left untouched."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise UsageError("training set is empty")
    if not learning_rate > 0:
        raise UsageError("learning_rate must be positive")
    if epochs < 0:
        raise UsageError("epochs must be non-negative")
    net = model.copy()
    rng = np.random.default_rng(rng_seed)
    velocity = [[np.zeros_like(p) for p in layer.params] for layer in net.layers]
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            try:
                loss, grads = net.loss_and_gradients(X[idx], y[idx])
            except NumericalError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged in epoch {epoch}")
            total += loss * len(idx)
            sgd_step(net, grads, learning_rate, velocity, momentum)
        losses.append(total / len(X))
        if not np.isfinite(losses[-1]):
            raise TrainingError(f"training diverged in epoch {epoch}")
    return TrainResult(net, losses, accuracy(net, X, y))


# Weight file: b"DPRB", u32 version, u32 layer count, u32 input rank, u32 dims,
# then per layer: u8 kind tag, u32 int count, i32 shape ints, f64 params (all little-endian).
MAGIC = b"DPRB"
FORMAT_VERSION = 1


def weights_to_bytes(model: Network) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(model.layers)))
    buf.write(struct.pack("<I", len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for layer in model.layers:
        ints = layer.shape_ints()
        buf.write(struct.pack("<BI", layer.tag, len(ints)))
        buf.write(struct.pack(f"<{len(ints)}i", *ints))
        for p in layer.params:
            buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def weights_from_bytes(data: bytes, name: str = "net") -> Network:
    view = memoryview(data)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise UsageError("truncated weight file")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MAGIC:
        raise UsageError("not a weight file (bad magic)")
    pos = 4
    version, n_layers = take("<II")
    if version != FORMAT_VERSION:
        raise UsageError(f"unsupported weight file version {version}")
    (rank,) = take("<I")
    input_shape = take(f"<{rank}I")
    layers = []
    for _ in range(n_layers):
        tag, n_ints = take("<BI")
        if tag not in LAYER_TYPES:
            raise UsageError(f"unknown layer tag {tag}")
        layer = LAYER_TYPES[tag](*take(f"<{n_ints}i"))
        params = []
        for p in layer.params:
            count = p.size
            if pos + 8 * count > len(view):
                raise UsageError("truncated weight file")
            arr = np.frombuffer(view, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            params.append(arr.reshape(p.shape))
        layer.set_params(params)
        layers.append(layer)
    if pos != len(view):
        raise UsageError("trailing bytes in weight file")
    return Network(layers, input_shape, name)


def save_weights(model: Network, path) -> None:
    Path(path).write_bytes(weights_to_bytes(model))


def load_weights(path, name: str | None = None) -> Network:
    path = Path(path)
    return weights_from_bytes(path.read_bytes(), name or path.stem)
