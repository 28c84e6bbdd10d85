"""Small fully connected building blocks on top of the tape engine."""

from __future__ import annotations

import numpy as np

from . import engine
from .errors import ContractError
from .rng import RngStream

_ACTIVATIONS = {
    "relu": engine.relu,
    "leaky": lambda x: engine.leaky_relu(x, 0.2),
    "sigmoid": engine.sigmoid,
    "softplus": engine.softplus,
    "linear": lambda x: x,
}


class Linear:
    """Affine map. Weights start at N(0, 2/fan_in), biases at zero."""

    def __init__(self, in_dim: int, out_dim: int, rng: RngStream, name: str):
        scale = np.sqrt(2.0 / in_dim)
        self.W = engine.parameter(rng.normal((in_dim, out_dim)) * scale)
        self.b = engine.parameter(np.zeros(out_dim))
        self.name = name

    def __call__(self, x):
        return engine.matmul(x, self.W) + self.b

    def named_parameters(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}


class MLP:
    """Stack of Linear layers with one activation between them.

    ``dims`` lists layer widths input-first, e.g. (144, 256, 256, 32).
    The final layer has no activation; callers put heads on top.
    """

    def __init__(self, dims, rng: RngStream, activation: str = "relu",
                 name: str = "mlp"):
        if len(dims) < 2:
            raise ContractError("an MLP needs at least input and output dims")
        if activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng.child(f"{name}.fc{i}"),
                   f"{name}.fc{i}")
            for i in range(len(dims) - 1)
        ]
        self.act = _ACTIVATIONS[activation]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def named_parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.named_parameters())
        return out
