"""Dense-network substrate with explicit reverse-mode gradients.

Networks are stored as a single flat float64 vector plus layer metadata,
which is the form parameters take when they cross the federation boundary.
Weights are laid out per layer as ``W`` (row-major, shape ``(out, in)``)
followed by the bias ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

_LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when vector or layer dimensions do not line up."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def size(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


def mlp_specs(sizes: Sequence[int], hidden: str = "tanh", output: str = "identity") -> tuple[LayerSpec, ...]:
    """Layer specs for an MLP with layer widths ``sizes`` (input first)."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    n = len(sizes) - 1
    return tuple(
        LayerSpec(sizes[k], sizes[k + 1], output if k == n - 1 else hidden) for k in range(n)
    )


def check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ShapeError("empty layer list")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise ShapeError(
                f"layer {k} output_dim {specs[k].output_dim} != "
                f"layer {k + 1} input_dim {specs[k + 1].input_dim}"
            )


def param_count(specs: Sequence[LayerSpec]) -> int:
    return sum(s.size for s in specs)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with its layer layout."""

    values: np.ndarray
    specs: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        specs = tuple(self.specs)
        check_chain(specs)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != param_count(specs):
            raise ShapeError(
                f"values length {values.shape} does not match layer layout ({param_count(specs)})"
            )
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "values", values)

    @property
    def offsets(self) -> list[int]:
        out, pos = [], 0
        for s in self.specs:
            out.append(pos)
            pos += s.size
        return out

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    def __len__(self) -> int:
        return self.values.shape[0]

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer ``(W, b)`` views into ``values``."""
        layers = []
        for s, off in zip(self.specs, self.offsets):
            nw = s.input_dim * s.output_dim
            w = self.values[off : off + nw].reshape(s.output_dim, s.input_dim)
            b = self.values[off + nw : off + s.size]
            layers.append((w, b))
        return layers

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.specs)


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]], specs: Sequence[LayerSpec]) -> ParamVector:
    parts = []
    for (w, b), s in zip(layers, specs, strict=True):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (s.output_dim, s.input_dim) or b.shape != (s.output_dim,):
            raise ShapeError(f"layer arrays {w.shape}/{b.shape} do not match {s}")
        parts.append(w.ravel())
        parts.append(b)
    return ParamVector(np.concatenate(parts), tuple(specs))


def mlp_init(specs: Sequence[LayerSpec], seed: int | np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    specs = tuple(specs)
    check_chain(specs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for s in specs:
        bound = math.sqrt(6.0 / (s.input_dim + s.output_dim))
        w = rng.uniform(-bound, bound, size=(s.output_dim, s.input_dim))
        layers.append((w, np.zeros(s.output_dim)))
    return flatten(layers, specs)


def zeros_like(p: ParamVector) -> ParamVector:
    return ParamVector(np.zeros_like(p.values), p.specs)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _as_batch(p: ParamVector, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != p.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {p.input_dim}")
    return xb, single


def _forward_trace(p, xb, masks):
    """Returns pre-activations and post-activations (post[0] is the input)."""
    pre, post = [], [xb]
    h = xb
    layers = p.unflatten()
    for k, ((w, b), s) in enumerate(zip(layers, p.specs)):
        z = h @ w.T + b
        a = _act(s.activation, z)
        if masks is not None and k < len(layers) - 1 and masks[k] is not None:
            a = a * masks[k]
        pre.append(z)
        post.append(a)
        h = a
    return pre, post


def mlp_forward(p: ParamVector, x: np.ndarray, masks: Sequence[np.ndarray | None] | None = None) -> np.ndarray:
    """Evaluate the network on one input vector or a ``(batch, in)`` array.

    ``masks`` optionally multiplies each hidden layer's activations (used for
    dropout); the output layer is never masked.
    """
    xb, single = _as_batch(p, x)
    _, post = _forward_trace(p, xb, masks)
    out = post[-1]
    return out[0] if single else out


def mlp_backward(
    p: ParamVector,
    x: np.ndarray,
    g_out: np.ndarray,
    masks: Sequence[np.ndarray | None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<mlp_forward(p, x), g_out>`` w.r.t. the parameters and input.

    For batched ``x`` the parameter gradient is summed over the batch and the
    input gradient is returned per row.
    """
    xb, single = _as_batch(p, x)
    g = np.asarray(g_out, dtype=np.float64)
    gb = g[None, :] if single else g
    if gb.shape != (xb.shape[0], p.output_dim):
        raise ShapeError(f"g_out shape {g.shape} does not match output ({xb.shape[0]}, {p.output_dim})")

    pre, post = _forward_trace(p, xb, masks)
    layers = p.unflatten()
    grads: list[np.ndarray] = [None] * len(layers)  # type: ignore[list-item]
    delta = gb
    for k in range(len(layers) - 1, -1, -1):
        s = p.specs[k]
        w, _ = layers[k]
        if masks is not None and k < len(layers) - 1 and masks[k] is not None:
            delta = delta * masks[k]
        dz = delta * _act_grad(s.activation, pre[k])
        gw = dz.T @ post[k]
        gbias = dz.sum(axis=0)
        grads[k] = np.concatenate([gw.ravel(), gbias])
        delta = dz @ w
    g_params = np.concatenate(grads)
    return g_params, (delta[0] if single else delta)


def clamp_log_std(log_std: np.ndarray, lo: float = LOG_STD_MIN, hi: float = LOG_STD_MAX) -> np.ndarray:
    return np.clip(np.asarray(log_std, dtype=np.float64), lo, hi)


@dataclass(frozen=True)
class GaussianHead:
    """Diagonal Gaussian; ``log_std`` is clamped on construction."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if not np.all(np.isfinite(log_std)):
            raise ValueError("log_std must be finite")
        if log_std.shape != mean.shape[-1:]:
            raise ShapeError(f"log_std shape {log_std.shape} vs mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", clamp_log_std(log_std))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + 0.5 * self.log_std.shape[0] * (1.0 + _LOG_2PI))


def gaussian_log_prob(head: GaussianHead, action: np.ndarray) -> float | np.ndarray:
    """Log density; broadcasts over a leading batch axis of ``mean``/``action``."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != head.log_std.shape[0]:
        raise ShapeError(f"action dim {action.shape} vs head dim {head.log_std.shape}")
    z = (action - head.mean) * np.exp(-head.log_std)
    lp = -0.5 * np.sum(z * z, axis=-1) - np.sum(head.log_std) - 0.5 * head.log_std.shape[0] * _LOG_2PI
    return float(lp) if np.ndim(lp) == 0 else lp


def gaussian_sample(head: GaussianHead, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    noise = rng.standard_normal(head.mean.shape)
    action = head.mean + head.std * noise
    return action, gaussian_log_prob(head, action)
