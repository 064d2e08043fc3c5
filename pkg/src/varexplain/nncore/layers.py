"""Layer implementations with explicit forward/backward passes.

Everything is float64 and batch-first: dense layers take (B, d), image
layers take (B, C, H, W). Each layer's forward returns (output, cache);
backward consumes the cache and the upstream gradient and returns
(input_grad, [param_grads...]). Parameter layout per layer is a list of
numpy arrays (possibly empty).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input/parameter shape mismatch, naming the offending layer."""


@dataclass
class LayerSpec:
    """Declarative layer description; builds into a concrete layer.

    kind: one of dense, conv2d, maxpool2d, relu, softplus, dropout, flatten.
    Size fields are only read for the kinds that need them.
    """

    kind: str
    units: int = 0          # dense
    filters: int = 0        # conv2d
    kernel: int = 3         # conv2d
    stride: int = 1         # conv2d
    padding: int = 1        # conv2d
    pool: int = 2           # maxpool2d (window == stride)
    rate: float = 0.0       # dropout

    def __post_init__(self):
        kinds = {"dense", "conv2d", "maxpool2d", "relu", "softplus", "dropout", "flatten"}
        if self.kind not in kinds:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise ValueError(f"dropout rate must be in [0,1), got {self.rate}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kind", "units", "filters", "kernel", "stride", "padding", "pool", "rate")}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def dropout_mask(shape, rate: float, rng: np.random.Generator, train: bool = True) -> np.ndarray:
    """Inverted-dropout mask: kept entries scaled by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not train or rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# concrete layers


class Layer:
    spec: LayerSpec
    name: str

    def params(self) -> list:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, rng=None, train=False):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, spec: LayerSpec, in_shape: tuple, rng: np.random.Generator, name: str):
        if len(in_shape) != 1:
            raise ShapeError(f"{name}: dense expects flat input, got shape {in_shape}")
        self.spec = spec
        self.name = name
        d_in, d_out = in_shape[0], spec.units
        # He initialization; fine for the ReLU trunks used here
        self.W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        self.b = np.zeros(d_out)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, in_shape):
        return (self.spec.units,)

    def forward(self, x, rng=None, train=False):
        if x.shape[1] != self.W.shape[0]:
            raise ShapeError(f"{self.name}: expected {self.W.shape[0]} features, got {x.shape[1]}")
        return x @ self.W + self.b, x

    def backward(self, dout, cache):
        x = cache
        return dout @ self.W.T, [x.T @ dout, dout.sum(axis=0)]


class Conv2d(Layer):
    """3x3-style convolution via im2col. Weight shape (Cout, Cin, k, k)."""

    def __init__(self, spec: LayerSpec, in_shape: tuple, rng: np.random.Generator, name: str):
        if len(in_shape) != 3:
            raise ShapeError(f"{name}: conv2d expects (C,H,W) input, got shape {in_shape}")
        self.spec = spec
        self.name = name
        c_in = in_shape[0]
        k = spec.kernel
        fan_in = c_in * k * k
        self.W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.filters, c_in, k, k))
        self.b = np.zeros(spec.filters)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, in_shape):
        _, h, w = in_shape
        s = self.spec
        return (s.filters,
                conv_out_size(h, s.kernel, s.stride, s.padding),
                conv_out_size(w, s.kernel, s.stride, s.padding))

    def _im2col(self, x):
        s = self.spec
        b, c, h, w = x.shape
        ho = conv_out_size(h, s.kernel, s.stride, s.padding)
        wo = conv_out_size(w, s.kernel, s.stride, s.padding)
        xp = np.pad(x, ((0, 0), (0, 0), (s.padding, s.padding), (s.padding, s.padding)))
        # gather all kernel-offset slices: (B, C, k, k, Ho, Wo)
        cols = np.empty((b, c, s.kernel, s.kernel, ho, wo))
        for i in range(s.kernel):
            for j in range(s.kernel):
                cols[:, :, i, j] = xp[:, :,
                                      i:i + s.stride * ho:s.stride,
                                      j:j + s.stride * wo:s.stride]
        return cols.reshape(b, c * s.kernel * s.kernel, ho * wo), (ho, wo)

    def _col2im(self, dcols, x_shape):
        s = self.spec
        b, c, h, w = x_shape
        ho = conv_out_size(h, s.kernel, s.stride, s.padding)
        wo = conv_out_size(w, s.kernel, s.stride, s.padding)
        dxp = np.zeros((b, c, h + 2 * s.padding, w + 2 * s.padding))
        dcols = dcols.reshape(b, c, s.kernel, s.kernel, ho, wo)
        for i in range(s.kernel):
            for j in range(s.kernel):
                dxp[:, :,
                    i:i + s.stride * ho:s.stride,
                    j:j + s.stride * wo:s.stride] += dcols[:, :, i, j]
        if s.padding:
            return dxp[:, :, s.padding:-s.padding or None, s.padding:-s.padding or None]
        return dxp

    def forward(self, x, rng=None, train=False):
        if x.shape[1] != self.W.shape[1]:
            raise ShapeError(f"{self.name}: expected {self.W.shape[1]} channels, got {x.shape[1]}")
        cols, (ho, wo) = self._im2col(x)
        wmat = self.W.reshape(self.W.shape[0], -1)
        out = np.matmul(wmat, cols) + self.b[None, :, None]
        return out.reshape(x.shape[0], self.W.shape[0], ho, wo), (cols, x.shape)

    def backward(self, dout, cache):
        cols, x_shape = cache
        b, f, ho, wo = dout.shape
        dmat = dout.reshape(b, f, ho * wo)
        wmat = self.W.reshape(f, -1)
        dW = np.einsum("bfp,bkp->fk", dmat, cols, optimize=True).reshape(self.W.shape)
        db = dout.sum(axis=(0, 2, 3))
        dcols = np.matmul(wmat.T, dmat)
        return self._col2im(dcols, x_shape), [dW, db]


class MaxPool2d(Layer):
    def __init__(self, spec: LayerSpec, in_shape: tuple, rng=None, name: str = "maxpool"):
        if len(in_shape) != 3:
            raise ShapeError(f"{name}: maxpool2d expects (C,H,W) input, got shape {in_shape}")
        if in_shape[1] % spec.pool or in_shape[2] % spec.pool:
            raise ShapeError(f"{name}: spatial dims {in_shape[1:]} not divisible by pool {spec.pool}")
        self.spec = spec
        self.name = name

    def out_shape(self, in_shape):
        c, h, w = in_shape
        p = self.spec.pool
        return (c, h // p, w // p)

    def forward(self, x, rng=None, train=False):
        p = self.spec.pool
        b, c, h, w = x.shape
        xr = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
        windows = xr.reshape(b, c, h // p, w // p, p * p)
        arg = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, dout, cache):
        arg, x_shape = cache
        p = self.spec.pool
        b, c, h, w = x_shape
        dwin = np.zeros((b, c, h // p, w // p, p * p))
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // p, w // p, p, p).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(x_shape), []

    def max_source_mask(self, cache):
        """Boolean mask of winning positions, for winner-take-all relevance routing."""
        ones = np.ones_like(cache[0], dtype=float)
        return self.backward(ones, cache)[0] > 0


class ReLU(Layer):
    def __init__(self, spec: LayerSpec, in_shape=None, rng=None, name: str = "relu"):
        self.spec = spec
        self.name = name

    def forward(self, x, rng=None, train=False):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        return dout * (cache > 0), []


class Softplus(Layer):
    def __init__(self, spec: LayerSpec, in_shape=None, rng=None, name: str = "softplus"):
        self.spec = spec
        self.name = name

    def forward(self, x, rng=None, train=False):
        return np.logaddexp(0.0, x), x

    def backward(self, dout, cache):
        # d softplus / dx = sigmoid(x)
        return dout * sigmoid(cache), []


class Dropout(Layer):
    def __init__(self, spec: LayerSpec, in_shape=None, rng=None, name: str = "dropout"):
        self.spec = spec
        self.name = name

    def forward(self, x, rng=None, train=False):
        if train and rng is None:
            raise ValueError(f"{self.name}: train-mode forward needs an rng")
        mask = dropout_mask(x.shape, self.spec.rate, rng, train=train)
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, []


class Flatten(Layer):
    def __init__(self, spec: LayerSpec, in_shape=None, rng=None, name: str = "flatten"):
        self.spec = spec
        self.name = name

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, rng=None, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), []


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_LAYER_CLASSES = {
    "dense": Dense,
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "relu": ReLU,
    "softplus": Softplus,
    "dropout": Dropout,
    "flatten": Flatten,
}


def build_layer(spec: LayerSpec, in_shape: tuple, rng: np.random.Generator, name: str) -> Layer:
    return _LAYER_CLASSES[spec.kind](spec, in_shape, rng, name)
