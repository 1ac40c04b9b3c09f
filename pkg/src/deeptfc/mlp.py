"""Fully connected networks used as free functions.

Parameters live in one flat vector.  Layout is layer-major; within a layer
the weight matrix (``fan_in x fan_out``, row-major) comes first, then the
bias vector.  Saved models and optimizer state depend on this order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adcore

ACTIVATIONS = {"tanh": adcore.tanh, "sigmoid": adcore.sigmoid}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"all layer widths must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")

    @property
    def layer_shapes(self):
        sizes = (self.input_dim,) + self.hidden_widths + (self.output_dim,)
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_dim"]), tuple(d["hidden_widths"]), int(d.get("output_dim", 1)),
                   d.get("activation", "tanh"))


@dataclass
class ParameterVector:
    spec: NetworkSpec
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} parameters, got shape {self.theta.shape}")

    def __len__(self):
        return self.theta.size

    def unflatten(self):
        """List of ``(W, b)`` arrays (views into ``theta``)."""
        layers, pos = [], 0
        for i, o in self.spec.layer_shapes:
            W = self.theta[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = self.theta[pos:pos + o]
            pos += o
            layers.append((W, b))
        return layers

    @classmethod
    def flatten(cls, spec, layers):
        parts = []
        for (W, b), (i, o) in zip(layers, spec.layer_shapes):
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float)
            if W.shape != (i, o) or b.shape != (o,):
                raise ValueError(f"layer shape mismatch: W{W.shape} b{b.shape}, expected ({i}, {o})")
            parts += [W.ravel(), b]
        return cls(spec, np.concatenate(parts))


def xavier_bound(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(spec: NetworkSpec, seed: int) -> ParameterVector:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, o in spec.layer_shapes:
        lim = xavier_bound(i, o)
        layers.append((rng.uniform(-lim, lim, size=(i, o)), np.zeros(o)))
    return ParameterVector.flatten(spec, layers)


def _layer_views(spec, params):
    if isinstance(params, adcore.DiffScalar):
        if params.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
        views, pos = [], 0
        for i, o in spec.layer_shapes:
            W = params[pos:pos + i * o].reshape(i, o)
            pos += i * o
            views.append((W, params[pos:pos + o]))
            pos += o
        return views
    if not isinstance(params, ParameterVector):
        params = ParameterVector(spec, params)
    return params.unflatten()


def bind(spec: NetworkSpec, params):
    """Return ``g(inputs)`` evaluating the network; parameters are sliced once.

    ``params`` may be a :class:`ParameterVector`, a flat array (treated as
    constant) or a parameter leaf from :func:`adcore.parameter`.
    """
    layers = _layer_views(spec, params)
    act = ACTIVATIONS[spec.activation]

    def g(inputs: Sequence):
        if len(inputs) != spec.input_dim:
            raise ValueError(f"network expects {spec.input_dim} inputs, got {len(inputs)}")
        h = adcore.stack(list(inputs))
        last = len(layers) - 1
        for n, (W, b) in enumerate(layers):
            h = adcore.affine(h, W, b)
            if n != last:
                h = act(h)
        return h[..., 0] if spec.output_dim == 1 else h

    return g


def forward(spec: NetworkSpec, params, inputs: Sequence):
    return bind(spec, params)(inputs)


def to_json_dict(params: ParameterVector):
    # repr of a Python float round-trips exactly
    return {"spec": params.spec.to_dict(), "theta": [float(t) for t in params.theta]}


def from_json_dict(d) -> ParameterVector:
    return ParameterVector(NetworkSpec.from_dict(d["spec"]), np.array(d["theta"], dtype=float))


def save(path, params: ParameterVector):
    Path(path).write_text(json.dumps(to_json_dict(params)))


def load(path) -> ParameterVector:
    return from_json_dict(json.loads(Path(path).read_text()))
