"""Feed-forward network for the nonparametric part of the model.

Layer sizes are listed bottom to top. The hidden weight list follows the
opposite convention, top first: ``hidden_weights[0]`` maps the second
layer from the top into the top layer, and ``hidden_weights[-1]`` maps the
raw inputs ``Z`` into the bottom layer. The top layer is linear in its
weights and has no intercept (the fixed effects absorb it).

An architecture with no hidden layers is allowed; the top layer is then
``Z`` itself and the model reduces to a linear fixed-effects regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from panelnn.errors import DimensionError

ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class Activation:
    name: str = "leaky_relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.name!r}; choose from {ACTIVATIONS}")
        if self.name == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky slope must lie in (0, 1)")

    def __str__(self):
        return f"leaky_relu({self.slope!r})" if self.name == "leaky_relu" else self.name

    @classmethod
    def parse(cls, text: str) -> Activation:
        text = text.strip()
        if text.startswith("leaky_relu(") and text.endswith(")"):
            return cls("leaky_relu", float(text[len("leaky_relu("):-1]))
        return cls(text)


def activate(kind: Activation, x):
    x = np.asarray(x, dtype=float)
    if kind.name == "leaky_relu":
        return np.where(x < 0, kind.slope * x, x)
    if kind.name == "relu":
        return np.maximum(x, 0.0)
    if kind.name == "tanh":
        return np.tanh(x)
    return expit(x)


def activate_prime(kind: Activation, x):
    """Derivative of :func:`activate`; the (leaky) ReLU kink at 0 gets slope 1."""
    x = np.asarray(x, dtype=float)
    if kind.name == "leaky_relu":
        return np.where(x < 0, kind.slope, 1.0)
    if kind.name == "relu":
        return np.where(x < 0, 0.0, 1.0)
    if kind.name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    s = expit(x)
    return s * (1.0 - s)


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    p_x: int
    p_z: int
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("every layer needs at least one node")
        if self.p_x < 0 or self.p_z < 0:
            raise ValueError("covariate counts must be non-negative")
        if self.layer_sizes and self.p_z < 1:
            raise ValueError("hidden layers need at least one Z column")

    @property
    def depth(self) -> int:
        return len(self.layer_sizes)

    @property
    def top_size(self) -> int:
        return self.layer_sizes[-1] if self.layer_sizes else self.p_z

    def hidden_shapes(self) -> list[tuple[int, int]]:
        """Weight shapes, top layer first (same order as ``ParamSet.hidden_weights``)."""
        fan_in = (self.p_z,) + self.layer_sizes[:-1]
        return [(i, o) for i, o in zip(fan_in, self.layer_sizes)][::-1]

    def blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes of parameter blocks in flattening order."""
        out = [("beta", (self.p_x,)), ("top", (self.top_size,))]
        for k, shape in enumerate(self.hidden_shapes()):
            out.append((f"W{k + 2}", shape))
            out.append((f"b{k + 2}", (shape[1],)))
        return out

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.blocks())

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.blocks():
            size = int(np.prod(shape))
            out[name] = slice(start, start + size)
            start += size
        return out


@dataclass(frozen=True)
class ParamSet:
    beta: np.ndarray
    top_weights: np.ndarray
    hidden_weights: tuple[np.ndarray, ...] = ()
    hidden_biases: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "top_weights", np.asarray(self.top_weights, dtype=float).reshape(-1))
        object.__setattr__(self, "hidden_weights", tuple(np.asarray(w, dtype=float) for w in self.hidden_weights))
        object.__setattr__(self, "hidden_biases",
                           tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.hidden_biases))

    def check(self, arch: Architecture) -> None:
        if self.beta.shape != (arch.p_x,) or self.top_weights.shape != (arch.top_size,):
            raise DimensionError("beta/top weight sizes do not match the architecture")
        shapes = arch.hidden_shapes()
        if len(self.hidden_weights) != len(shapes) or len(self.hidden_biases) != len(shapes):
            raise DimensionError("number of hidden layers does not match the architecture")
        for w, b, s in zip(self.hidden_weights, self.hidden_biases, shapes):
            if w.shape != s or b.shape != (s[1],):
                raise DimensionError(f"hidden weight shape {w.shape} does not match {s}")

    def flatten(self) -> np.ndarray:
        parts = [self.beta, self.top_weights]
        for w, b in zip(self.hidden_weights, self.hidden_biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: Architecture, theta: np.ndarray) -> ParamSet:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (arch.n_params,):
            raise DimensionError(f"expected {arch.n_params} parameters, got {theta.shape}")
        sl = arch.block_slices()
        ws, bs = [], []
        for k, shape in enumerate(arch.hidden_shapes()):
            ws.append(theta[sl[f"W{k + 2}"]].reshape(shape).copy())
            bs.append(theta[sl[f"b{k + 2}"]].copy())
        return cls(theta[sl["beta"]].copy(), theta[sl["top"]].copy(), tuple(ws), tuple(bs))

    def replace_top(self, beta, top_weights) -> ParamSet:
        return ParamSet(beta, top_weights, self.hidden_weights, self.hidden_biases)


@dataclass(frozen=True)
class ForwardCache:
    """Activations bottom to top; ``node_matrices[-1]`` is the top layer."""

    node_matrices: list[np.ndarray]
    preactivations: list[np.ndarray]
    fitted: np.ndarray

    @property
    def top(self) -> np.ndarray:
        return self.node_matrices[-1]


def _check_inputs(arch: Architecture, X, Z):
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if X.ndim != 2 or X.shape[1] != arch.p_x:
        raise DimensionError(f"X must have {arch.p_x} columns, got shape {X.shape}")
    if Z.ndim != 2 or Z.shape[1] != arch.p_z:
        raise DimensionError(f"Z must have {arch.p_z} columns, got shape {Z.shape}")
    if X.shape[0] != Z.shape[0]:
        raise DimensionError("X and Z row counts differ")
    return X, Z


def top_nodes(params: ParamSet, arch: Architecture, Z) -> ForwardCache:
    """Forward pass through the hidden layers only (``fitted`` left empty)."""
    h = Z
    nodes, pres = [], []
    for w, b in zip(reversed(params.hidden_weights), reversed(params.hidden_biases)):
        pre = h @ w + b
        h = activate(arch.activation, pre)
        pres.append(pre)
        nodes.append(h)
    if not nodes:
        nodes.append(Z)
    return ForwardCache(nodes, pres, np.empty(0))


def forward(params: ParamSet, arch: Architecture, X, Z) -> ForwardCache:
    """Fitted values ``X beta + V1 top_weights`` (no fixed effect) and all layer outputs."""
    X, Z = _check_inputs(arch, X, Z)
    params.check(arch)
    cache = top_nodes(params, arch, Z)
    fitted = X @ params.beta + cache.top @ params.top_weights
    return ForwardCache(cache.node_matrices, cache.preactivations, fitted)


def init_params(arch: Architecture, seed: int = 0) -> ParamSet:
    """Uniform fan-based initialisation; biases and beta start at zero."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in reversed(arch.hidden_shapes()):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    bound = np.sqrt(6.0 / (arch.top_size + 1))
    top = rng.uniform(-bound, bound, size=arch.top_size)
    return ParamSet(np.zeros(arch.p_x), top, tuple(ws[::-1]), tuple(bs[::-1]))
