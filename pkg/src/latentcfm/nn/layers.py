"""Parameter containers, linear layers and multilayer perceptrons."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ad
from .autograd import ShapeError, Tensor


class Module:
    """Collects :class:`Tensor` parameters from attributes, recursively.

    Parameter names are dotted attribute paths (``layers.0.weight``), which is
    also the key format used by checkpoints.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: expected {p.data.shape}, got {arr.shape}")
            p.data[...] = arr

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def checksum(self):
        """sha256 over parameter names and raw bytes."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def kaiming_uniform(fan_in, shape, rng):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Tensor(kaiming_uniform(in_dim, (in_dim, out_dim), rng), requires_grad=True)
        self.bias = Tensor(kaiming_uniform(in_dim, (out_dim,), rng), requires_grad=True) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def predict(self, x):
        y = x @ self.weight.data
        return y + self.bias.data if self.bias is not None else y


@dataclass
class MlpConfig:
    input_dim: int
    hidden_dims: list = field(default_factory=lambda: [64, 64, 64])
    output_dim: int = 1
    activation: str = "selu"

    def __post_init__(self):
        dims = [self.input_dim, self.output_dim, *self.hidden_dims]
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer sizes must be positive: {dims}")
        if self.activation.lower() not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.activation = self.activation.lower()
        self.hidden_dims = [int(h) for h in self.hidden_dims]


class MLP(Module):
    """Fully connected network; activation after every hidden layer."""

    def __init__(self, config: MlpConfig, rng):
        self.config = config
        dims = [config.input_dim, *config.hidden_dims, config.output_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self._act = ad.ACTIVATIONS[config.activation]
        self._act_np = ad.ACTIVATION_ARRAYS[config.activation]

    def _check(self, x):
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"expected input dim {self.config.input_dim}, got {x.shape[-1]}")

    def __call__(self, x, first_offset=None):
        """Forward pass recording the graph.

        ``first_offset`` is added to the first hidden pre-activation, which is
        how conditioning embeddings are injected.
        """
        x = ad.as_tensor(x)
        self._check(x)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i == 0 and first_offset is not None:
                h = h + first_offset
            if i < len(self.layers) - 1:
                h = self._act(h)
        return h

    def features(self, x):
        """Activations of the last hidden layer (graph-recording)."""
        x = ad.as_tensor(x)
        self._check(x)
        h = x
        for layer in self.layers[:-1]:
            h = self._act(layer(h))
        return h

    def predict(self, x, first_offset=None):
        """Plain numpy forward pass, no graph."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.predict(h)
            if i == 0 and first_offset is not None:
                h = h + first_offset
            if i < len(self.layers) - 1:
                h = self._act_np(h)
        return h

    def predict_features(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        h = x
        for layer in self.layers[:-1]:
            h = self._act_np(layer.predict(h))
        return h
