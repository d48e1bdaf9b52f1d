"""Parametric maps used for phi, psi and beta, with hand-written gradients.

All maps work on batches: inputs are ``(B, in_dim)`` arrays (a single vector is
promoted to a batch of one). ``backward`` takes the input and the gradient of
some scalar with respect to the map's output and returns
``(param_grads, input_grad)`` where ``param_grads`` mirrors ``params()``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .numeric import Rng

__all__ = [
    "LinearMap",
    "LogisticHead",
    "MlpStack",
    "ModelStack",
    "init_parameters",
    "flatten_params",
    "restore_params",
    "save_snapshot",
    "load_snapshot",
    "sigmoid",
]

Grads = dict[str, np.ndarray]


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _as_batch(x, in_dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"{what}: expected input dimension {in_dim}, got shape {x.shape}")
    return x


class LinearMap:
    """``x -> W x (+ b)`` with ``W`` stored as ``(out, in)``."""

    kind = "linear"

    def __init__(self, weight, bias=None, use_bias: Optional[bool] = None):
        self.weight = np.array(weight, dtype=np.float64, ndmin=2)
        if use_bias is None:
            use_bias = bias is not None
        if use_bias:
            b = np.zeros(self.out_dim) if bias is None else np.array(bias, dtype=np.float64).reshape(-1)
            if b.shape != (self.out_dim,):
                raise ValueError(f"bias must have length {self.out_dim}, got {b.shape}")
            self.bias = b
        else:
            self.bias = None

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, bias: bool = False) -> "LinearMap":
        return cls(np.zeros((out_dim, in_dim)), use_bias=bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x) -> np.ndarray:
        x = _as_batch(x, self.in_dim, "LinearMap")
        out = x @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, x, grad_out) -> tuple[Grads, np.ndarray]:
        x = _as_batch(x, self.in_dim, "LinearMap")
        g = np.asarray(grad_out, dtype=np.float64).reshape(x.shape[0], -1)
        if g.shape[1] != self.out_dim:
            raise ValueError(f"LinearMap: upstream gradient has {g.shape[1]} columns, expected {self.out_dim}")
        grads = {"weight": g.T @ x}
        if self.bias is not None:
            grads["bias"] = g.sum(axis=0)
        return grads, g @ self.weight

    def copy(self) -> "LinearMap":
        return LinearMap(self.weight.copy(), None if self.bias is None else self.bias.copy(),
                         use_bias=self.bias is not None)


class LogisticHead:
    """``s -> 1 / (1 + exp(-(w.s + b)))``; forward returns a ``(B,)`` vector."""

    kind = "logistic"

    def __init__(self, weight, bias=None, use_bias: Optional[bool] = None):
        self.weight = np.array(weight, dtype=np.float64).reshape(-1)
        if use_bias is None:
            use_bias = bias is not None
        self.bias = np.array(0.0 if bias is None else bias, dtype=np.float64).reshape(()) if use_bias else None

    @classmethod
    def zeros(cls, in_dim: int, bias: bool = True) -> "LogisticHead":
        return cls(np.zeros(in_dim), use_bias=bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return 1

    def params(self) -> dict[str, np.ndarray]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def logit(self, s) -> np.ndarray:
        s = _as_batch(s, self.in_dim, "LogisticHead")
        t = s @ self.weight
        if self.bias is not None:
            t = t + self.bias
        return t

    def forward(self, s) -> np.ndarray:
        return sigmoid(self.logit(s))

    def backward_logit(self, s, grad_logit) -> tuple[Grads, np.ndarray]:
        s = _as_batch(s, self.in_dim, "LogisticHead")
        g = np.asarray(grad_logit, dtype=np.float64).reshape(-1)
        if g.shape[0] != s.shape[0]:
            raise ValueError(f"LogisticHead: upstream gradient has length {g.shape[0]}, batch is {s.shape[0]}")
        grads = {"weight": s.T @ g}
        if self.bias is not None:
            grads["bias"] = np.array(g.sum())
        return grads, np.outer(g, self.weight)

    def backward(self, s, grad_out) -> tuple[Grads, np.ndarray]:
        p = self.forward(s)
        return self.backward_logit(s, np.asarray(grad_out, dtype=np.float64).reshape(-1) * p * (1.0 - p))

    def copy(self) -> "LogisticHead":
        return LogisticHead(self.weight.copy(), None if self.bias is None else self.bias.copy(),
                            use_bias=self.bias is not None)


class MlpStack:
    """Linear layers with a rectifier between consecutive layers (none after the last)."""

    kind = "mlp"

    def __init__(self, layers: list[LinearMap]):
        if not layers:
            raise ValueError("MlpStack needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)

    @classmethod
    def zeros(cls, sizes: list[int], bias: bool = True) -> "MlpStack":
        return cls([LinearMap.zeros(i, o, bias=bias) for i, o in zip(sizes, sizes[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{k}.{name}"] = arr
        return out

    def _activations(self, x) -> list[np.ndarray]:
        acts = [_as_batch(x, self.in_dim, "MlpStack")]
        for k, layer in enumerate(self.layers):
            h = layer.forward(acts[-1])
            if k < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        return self._activations(x)[-1]

    def backward(self, x, grad_out) -> tuple[Grads, np.ndarray]:
        acts = self._activations(x)
        g = np.asarray(grad_out, dtype=np.float64).reshape(acts[-1].shape)
        grads: Grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            if k < len(self.layers) - 1:
                # rectifier subgradient at exactly 0 is 0
                g = g * (acts[k + 1] > 0.0)
            layer_grads, g = self.layers[k].backward(acts[k], g)
            for name, arr in layer_grads.items():
                grads[f"{k}.{name}"] = arr
        return grads, g

    def copy(self) -> "MlpStack":
        return MlpStack([layer.copy() for layer in self.layers])


Map = Union[LinearMap, LogisticHead, MlpStack]


def init_parameters(m: Map, rng: Rng, scheme: str = "scaled-uniform") -> Map:
    """Initialize ``m`` in place and return it.

    ``scaled-uniform`` draws each weight from U(-a, a), a = sqrt(6 / (fan_in + fan_out));
    biases are always zero.
    """
    if scheme not in ("zeros", "scaled-uniform"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    layers = m.layers if isinstance(m, MlpStack) else [m]
    for layer in layers:
        if layer.bias is not None:
            layer.bias[...] = 0.0
        if scheme == "zeros":
            layer.weight[...] = 0.0
        else:
            a = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            layer.weight[...] = rng.uniform(-a, a, layer.weight.shape)
    return m


@dataclass
class ModelStack:
    """The triple (phi, psi, beta); the predictor is ``psi(phi(x))``."""

    phi: Map
    psi: LogisticHead
    beta: Optional[Map] = None

    def __post_init__(self):
        if self.phi.out_dim != self.psi.in_dim:
            raise ValueError(f"phi outputs {self.phi.out_dim} dims but psi expects {self.psi.in_dim}")

    @property
    def representation_dim(self) -> int:
        return self.phi.out_dim

    def maps(self) -> dict[str, Map]:
        out = {"phi": self.phi, "psi": self.psi}
        if self.beta is not None:
            out["beta"] = self.beta
        return out

    def predict_proba(self, x) -> np.ndarray:
        return self.psi.forward(self.phi.forward(x))

    def predict(self, x) -> np.ndarray:
        return (self.psi.logit(self.phi.forward(x)) > 0.0).astype(np.int64)

    def param_items(self, roles=None) -> list[tuple[str, np.ndarray]]:
        """``(role.name, array)`` in a fixed order, restricted to ``roles``."""
        maps = self.maps()
        roles = [r for r in ("phi", "psi", "beta") if r in maps and (roles is None or r in roles)]
        return [(f"{r}.{name}", arr) for r in roles for name, arr in maps[r].params().items()]

    def get_flat(self, roles=None) -> np.ndarray:
        return flatten_params(self.param_items(roles))

    def set_flat(self, theta, roles=None) -> None:
        restore_params(self.param_items(roles), theta)

    def flat_grads(self, grads: dict[str, Grads], roles=None) -> np.ndarray:
        """Flatten role-keyed gradients in ``get_flat`` order; missing entries are zero."""
        parts = []
        for key, arr in self.param_items(roles):
            role, name = key.split(".", 1)
            g = grads.get(role, {}).get(name)
            parts.append(np.zeros(arr.size) if g is None else np.asarray(g, dtype=np.float64).reshape(-1))
        return np.concatenate(parts) if parts else np.empty(0)

    def copy(self) -> "ModelStack":
        return ModelStack(self.phi.copy(), self.psi.copy(), None if self.beta is None else self.beta.copy())


def flatten_params(items) -> np.ndarray:
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1) for _, a in items]
    return np.concatenate(arrays) if arrays else np.empty(0)


def restore_params(items, theta) -> None:
    theta = np.asarray(theta, dtype=np.float64)
    total = sum(a.size for _, a in items)
    if theta.shape != (total,):
        raise ValueError(f"parameter vector has shape {theta.shape}, expected ({total},)")
    offset = 0
    for _, arr in items:
        arr[...] = theta[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size


SNAPSHOT_FORMAT = "sideinfo-params/1"


def save_snapshot(stack: ModelStack) -> str:
    """Serialize all parameters as JSON: a shape header plus one flat float64 list.

    Floats are written with ``repr`` (shortest round-trip form), so loading
    restores every value bit for bit.
    """
    items = stack.param_items()
    doc = {
        "format": SNAPSHOT_FORMAT,
        "entries": [{"name": name, "shape": list(arr.shape)} for name, arr in items],
        "values": [float(v) for v in flatten_params(items)],
    }
    return json.dumps(doc)


def load_snapshot(stack: ModelStack, text: str) -> None:
    doc = json.loads(text)
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"unsupported snapshot format {doc.get('format')!r}")
    items = stack.param_items()
    header = [(e["name"], tuple(e["shape"])) for e in doc["entries"]]
    actual = [(name, arr.shape) for name, arr in items]
    if header != actual:
        raise ValueError(f"snapshot layout {header} does not match model layout {actual}")
    restore_params(items, np.array(doc["values"], dtype=np.float64))
