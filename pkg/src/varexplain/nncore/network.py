"""Sequential network container with taped forward and reverse passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import make_rng
from .layers import Layer, LayerSpec, ShapeError, build_layer


class StaleTapeError(RuntimeError):
    """The tape's parameters were updated since the forward pass."""


@dataclass
class GradientTape:
    caches: list
    version: int
    batch_shape: tuple


class Network:
    """Ordered layer stack over float64 arrays.

    Deterministic given (specs, input_shape, seed): parameter init and
    every train-mode dropout draw come from the network's own Philox
    stream. Eval-mode forward is pure.
    """

    def __init__(self, specs: list[LayerSpec], input_shape: tuple, seed: int):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self._rng = make_rng(seed, "net-init")
        self._dropout_rng = make_rng(seed, "net-dropout")
        self._version = 0
        self.layers: list[Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(specs):
            name = f"layer{i}:{spec.kind}"
            layer = build_layer(spec, shape, self._rng, name)
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape

    # -- parameters ---------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def param_names(self) -> list[str]:
        names = []
        for layer in self.layers:
            for j, _ in enumerate(layer.params()):
                names.append(f"{layer.name}/{'Wb'[j] if j < 2 else j}")
        return names

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def set_state(self, state: list[np.ndarray]):
        params = self.params()
        if len(state) != len(params):
            raise ValueError("state length mismatch")
        for p, s in zip(params, state):
            if p.shape != s.shape:
                raise ValueError(f"state shape mismatch: {p.shape} vs {s.shape}")
            p[...] = s
        self._version += 1

    def bump_version(self):
        """Callers that mutate parameters in place must invalidate old tapes."""
        self._version += 1

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    # -- passes -------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval") -> tuple[np.ndarray, GradientTape]:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == len(self.input_shape)
        if squeeze:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network input: expected {self.input_shape}, got {x.shape[1:]}")
        train = mode == "train"
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, rng=self._dropout_rng if train else None, train=train)
            caches.append(cache)
        tape = GradientTape(caches=caches, version=self._version, batch_shape=x.shape)
        return (x[0] if squeeze else x), tape

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, mode="eval")[0]

    def backward(self, tape: GradientTape, upstream: np.ndarray):
        """Return (param_grads, input_grad) for the taped forward pass."""
        if tape.version != self._version:
            raise StaleTapeError("parameters changed since this tape's forward pass")
        dout = np.asarray(upstream, dtype=np.float64)
        if dout.ndim == len(tape.batch_shape) - 1:
            dout = dout[None]
        if dout.shape != tape.batch_shape:
            raise ShapeError(f"upstream: expected {tape.batch_shape}, got {dout.shape}")
        param_grads: list[np.ndarray] = []
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            dout, grads = layer.backward(dout, cache)
            param_grads = grads + param_grads
        return param_grads, dout

    def clone(self) -> "Network":
        net = Network(self.specs, self.input_shape, self.seed)
        net.set_state(self.get_state())
        return net
