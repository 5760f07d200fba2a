"""Deep convolutional Hopfield network: architecture, energy and its gradients.

The network has an input layer ``s_0``, a stack of convolutional hidden
layers (3x3 convolution, padding 1, followed by 2x2 max-pooling) and a
dense output layer. Hidden states live in ``[0, 1]``; the output is
unbounded. States and parameters carry a leading batch axis throughout.

Layer indices follow the network: ``k = 1 .. L`` where ``L`` is the output
layer. ``params.weights[k - 1]`` is the interaction between ``s_{k-1}`` and
``s_k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .exceptions import NudgingError, ShapeError
from .kernels import (
    PoolIndexMap,
    compute_dtype,
    conv2d,
    conv2d_input_adjoint,
    conv2d_kernel_adjoint,
    maxpool2,
    maxpool2_adjoint,
)

__all__ = [
    "Architecture",
    "Parameters",
    "NetworkState",
    "energy",
    "primitive",
    "layer_drive",
    "cost",
    "energy_param_grad",
    "forward_interaction",
    "interaction_adjoint",
    "one_hot",
    "hard_sigmoid",
]


@dataclass(frozen=True)
class Architecture:
    """Static description of the layer stack.

    ``channels`` lists the out-channels of the convolutional layers; each of
    them halves the spatial extent through pooling. The last hidden layer is
    connected to the ``n_out`` output units by a dense interaction.
    """

    in_channels: int = 1
    image_size: int = 32
    channels: tuple = (128, 256, 512, 512)
    n_out: int = 10

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.in_channels < 1 or self.n_out < 1 or any(c < 1 for c in self.channels):
            raise ShapeError("channel counts and n_out must be positive")
        if self.image_size % (2 ** len(self.channels)):
            raise ShapeError(
                f"image size {self.image_size} is not divisible by 2**{len(self.channels)}"
            )

    @classmethod
    def full(cls, in_channels: int = 1, n_out: int = 10) -> "Architecture":
        """The four-conv-layer network (128, 256, 512, 512 channels) on 32x32 inputs."""
        return cls(in_channels, 32, (128, 256, 512, 512), n_out)

    @property
    def n_layers(self) -> int:
        """Index ``L`` of the output layer."""
        return len(self.channels) + 1

    @property
    def n_conv(self) -> int:
        return len(self.channels)

    @property
    def layer_shapes(self) -> list:
        shapes = [(self.in_channels, self.image_size, self.image_size)]
        size = self.image_size
        for c in self.channels:
            size //= 2
            shapes.append((c, size, size))
        shapes.append((self.n_out,))
        return shapes

    @property
    def weight_shapes(self) -> list:
        ins = (self.in_channels,) + self.channels
        shapes = [(c_out, c_in, 3, 3) for c_in, c_out in zip(ins, self.channels)]
        shapes.append((int(np.prod(self.layer_shapes[-2])), self.n_out))
        return shapes

    @property
    def bias_shapes(self) -> list:
        return [(c,) for c in self.channels] + [(self.n_out,)]

    def is_conv(self, k: int) -> bool:
        return 1 <= k <= self.n_conv

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "channels": list(self.channels),
            "n_out": self.n_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["in_channels"], d["image_size"], tuple(d["channels"]), d["n_out"])


@dataclass
class Parameters:
    """Weights ``w_1..w_L`` and biases ``b_1..b_L``.

    Conv biases hold one value per channel and are shared over positions.
    Also used for anything parameter-shaped (gradients, updates, velocities).
    """

    weights: list
    biases: list

    @classmethod
    def zeros(cls, arch: Architecture, dtype=np.float64) -> "Parameters":
        return cls(
            [np.zeros(s, dtype=dtype) for s in arch.weight_shapes],
            [np.zeros(s, dtype=dtype) for s in arch.bias_shapes],
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def names(self) -> list:
        n = self.n_layers
        return [f"w{k}" for k in range(1, n + 1)] + [f"b{k}" for k in range(1, n + 1)]

    def arrays(self) -> list:
        return list(self.weights) + list(self.biases)

    def items(self) -> Iterator:
        return zip(self.names(), self.arrays())

    def __getitem__(self, name: str) -> np.ndarray:
        kind, k = name[0], int(name[1:])
        return (self.weights if kind == "w" else self.biases)[k - 1]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Parameters":
        n = len(arrays) // 2
        return cls(list(arrays[:n]), list(arrays[n:]))

    def map(self, fn: Callable, *others: "Parameters") -> "Parameters":
        return Parameters.from_arrays(
            [fn(a, *(o.arrays()[i] for o in others)) for i, a in enumerate(self.arrays())]
        )

    def copy(self) -> "Parameters":
        return self.map(np.array)

    def astype(self, dtype) -> "Parameters":
        return self.map(lambda a: a.astype(dtype))

    def zeros_like(self) -> "Parameters":
        return self.map(np.zeros_like)

    def __add__(self, other: "Parameters") -> "Parameters":
        return self.map(np.add, other)

    def __sub__(self, other: "Parameters") -> "Parameters":
        return self.map(np.subtract, other)

    def __neg__(self) -> "Parameters":
        return self.map(np.negative)

    def scale(self, c: float) -> "Parameters":
        return self.map(lambda a: (a * c).astype(a.dtype, copy=False))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector: np.ndarray) -> "Parameters":
        """Parameters of the same shapes as ``self`` filled from ``vector``."""
        out, start = [], 0
        for a in self.arrays():
            out.append(np.asarray(vector[start:start + a.size], dtype=a.dtype).reshape(a.shape))
            start += a.size
        if start != len(vector):
            raise ShapeError(f"vector of length {len(vector)} does not match {start} parameters")
        return Parameters.from_arrays(out)

    def check(self, arch: Architecture) -> None:
        for a, s in zip(self.weights, arch.weight_shapes):
            if a.shape != tuple(s):
                raise ShapeError(f"weight shape {a.shape} != expected {tuple(s)}")
        for a, s in zip(self.biases, arch.bias_shapes):
            if a.shape != tuple(s):
                raise ShapeError(f"bias shape {a.shape} != expected {tuple(s)}")
        if len(self.weights) != arch.n_layers or len(self.biases) != arch.n_layers:
            raise ShapeError("parameter count does not match the architecture")

    def max_abs_diff(self, other: "Parameters") -> float:
        return max(float(np.abs(a.astype(np.float64) - b).max(initial=0.0))
                   for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class NetworkState:
    """Layer activations ``s_0 .. s_L`` (each with a batch axis) and clamp flags."""

    layers: list
    clamped: tuple = field(default=())

    def __post_init__(self):
        if not self.clamped:
            self.clamped = (True,) + (False,) * (len(self.layers) - 1)
        self.clamped = tuple(bool(c) for c in self.clamped)
        if len(self.clamped) != len(self.layers):
            raise ShapeError("one clamp flag per layer is required")
        if not self.clamped[0]:
            raise ShapeError("the input layer is always clamped")

    @classmethod
    def zeros(cls, arch: Architecture, x: np.ndarray, dtype=None) -> "NetworkState":
        """Input clamped to ``x``; hidden and output layers at zero."""
        x = np.asarray(x)
        if x.ndim == len(arch.layer_shapes[0]):
            x = x[None]
        if x.shape[1:] != arch.layer_shapes[0]:
            raise ShapeError(f"input shape {x.shape[1:]} != expected {arch.layer_shapes[0]}")
        dtype = dtype or (x.dtype if x.dtype.kind == "f" else np.float64)
        x = x.astype(dtype)
        layers = [x] + [np.zeros((x.shape[0],) + s, dtype=dtype) for s in arch.layer_shapes[1:]]
        return cls(layers)

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1]

    @property
    def hidden(self) -> list:
        return self.layers[1:-1]

    def copy(self) -> "NetworkState":
        return NetworkState([np.array(s) for s in self.layers], self.clamped)

    def with_clamped(self, clamped: Sequence[bool]) -> "NetworkState":
        return NetworkState(list(self.layers), tuple(clamped))

    def sample(self, i: int) -> "NetworkState":
        return NetworkState([s[i:i + 1] for s in self.layers], self.clamped)

    def check(self, arch: Architecture) -> None:
        if len(self.layers) != arch.n_layers + 1:
            raise ShapeError("state has the wrong number of layers")
        b = self.batch_size
        for s, shape in zip(self.layers, arch.layer_shapes):
            if s.shape != (b,) + tuple(shape):
                raise ShapeError(f"layer shape {s.shape} != expected {(b,) + tuple(shape)}")


def hard_sigmoid(u: np.ndarray) -> np.ndarray:
    return np.clip(u, 0, 1)


def one_hot(labels, n_out: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (n_out,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1, axis=-1)
    return out


def _check_pair(params: Parameters, state: NetworkState) -> None:
    if params.n_layers != state.n_layers:
        raise ShapeError(
            f"parameters describe {params.n_layers} layers, state has {state.n_layers}"
        )


def _is_dense(params: Parameters, k: int) -> bool:
    return params.weights[k - 1].ndim == 2


def forward_interaction(params: Parameters, k: int, s_prev: np.ndarray):
    """Bottom-up term of layer ``k``: ``P(w_k * s_{k-1})`` or ``s_{k-1} w_k``.

    Returns ``(value, pool_indices)``; indices are ``None`` for the dense layer.
    """
    w = params.weights[k - 1]
    if w.ndim == 2:
        flat = s_prev.reshape(s_prev.shape[0], -1)
        if flat.shape[1] != w.shape[0]:
            raise ShapeError(f"dense layer {k} expects {w.shape[0]} inputs, got {flat.shape[1]}")
        acc = compute_dtype(np.result_type(flat, w))
        out = flat.astype(acc, copy=False) @ w.astype(acc, copy=False)
        return out.astype(np.result_type(flat, w), copy=False), None
    return maxpool2(conv2d(s_prev, w))


def interaction_adjoint(params: Parameters, k: int, s_k: np.ndarray,
                        indices: Optional[PoolIndexMap], prev_shape: tuple) -> np.ndarray:
    """Top-down term ``d[s_k . P(w_k * s_{k-1})] / d s_{k-1}`` with frozen winners."""
    w = params.weights[k - 1]
    if w.ndim == 2:
        acc = compute_dtype(np.result_type(s_k, w))
        out = s_k.astype(acc, copy=False) @ w.T.astype(acc, copy=False)
        return out.astype(np.result_type(s_k, w), copy=False).reshape(prev_shape)
    return conv2d_input_adjoint(maxpool2_adjoint(s_k, indices), w)


def _bias_term(params: Parameters, k: int, like: np.ndarray) -> np.ndarray:
    b = params.biases[k - 1]
    if like.ndim == 4:
        return b[:, None, None]
    return b


def _sum_per_sample(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1).sum(axis=1, dtype=np.float64)


def _dot_per_sample(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bi,bi->b", a.reshape(a.shape[0], -1).astype(np.float64),
                     b.reshape(b.shape[0], -1).astype(np.float64))


def _reduce(values: np.ndarray, per_sample: bool):
    return values if per_sample else float(values.sum())


def energy(params: Parameters, state: NetworkState, per_sample: bool = False):
    """Hopfield energy of ``state``, summed over the batch unless ``per_sample``.

    Sum of the quadratic self terms, the (pooled) convolutional and dense
    interaction terms and the bias terms. Accumulated in 64-bit.
    """
    _check_pair(params, state)
    s = state.layers
    total = np.zeros(state.batch_size)
    for k in range(1, state.n_layers + 1):
        total += 0.5 * _dot_per_sample(s[k], s[k])
        interaction, _ = forward_interaction(params, k, s[k - 1])
        total -= _dot_per_sample(s[k], interaction)
        total -= _dot_per_sample(s[k], np.broadcast_to(_bias_term(params, k, s[k]), s[k].shape))
    return _reduce(total, per_sample)


def primitive(params: Parameters, state: NetworkState, per_sample: bool = False):
    """Primitive function ``Phi`` such that ``E = 0.5 * |s|^2 - Phi``."""
    _check_pair(params, state)
    s = state.layers
    total = np.zeros(state.batch_size)
    for k in range(1, state.n_layers + 1):
        interaction, _ = forward_interaction(params, k, s[k - 1])
        total += _dot_per_sample(s[k], interaction + _bias_term(params, k, s[k]))
    return _reduce(total, per_sample)


def check_nudging(beta: float) -> None:
    if not 1.0 + 2.0 * beta > 0.0:
        raise NudgingError(
            f"nudging beta={beta} gives 1 + 2*beta <= 0: augmented energy is unbounded below"
        )


def nudged_output(drive: np.ndarray, beta: float, y: np.ndarray) -> np.ndarray:
    """Minimiser in ``o`` of ``0.5|o|^2 - o.drive + beta * |o - y|^2``."""
    check_nudging(beta)
    return ((drive + 2.0 * beta * y) / (1.0 + 2.0 * beta)).astype(drive.dtype, copy=False)


def layer_drive(params: Parameters, state: NetworkState, k: int,
                nudge: Optional[tuple] = None) -> np.ndarray:
    """Pre-activation of layer ``k``: ``dPhi/ds_k`` at the current state.

    With ``nudge=(beta, y)`` (output layer only) the stationary output of the
    nudged energy is returned instead.
    """
    _check_pair(params, state)
    L = state.n_layers
    if not 1 <= k <= L:
        raise ShapeError(f"layer index {k} outside 1..{L}")
    if nudge is not None and k != L:
        raise NudgingError("nudging only applies to the output layer")
    s = state.layers
    drive, _ = forward_interaction(params, k, s[k - 1])
    drive = drive + _bias_term(params, k, s[k])
    if k < L:
        _, idx = forward_interaction(params, k + 1, s[k])
        drive = drive + interaction_adjoint(params, k + 1, s[k + 1], idx, s[k].shape)
    if nudge is not None:
        beta, y = nudge
        return nudged_output(drive, beta, np.asarray(y, dtype=drive.dtype))
    return drive


def cost(o: np.ndarray, y: np.ndarray, per_sample: bool = False):
    """Squared error ``|o - y|^2``."""
    o = np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if o.shape != y.shape:
        raise ShapeError(f"output shape {o.shape} != target shape {y.shape}")
    if o.ndim == 1:
        return float(((o - y) ** 2).sum())
    values = ((o - y) ** 2).reshape(o.shape[0], -1).sum(axis=1)
    return _reduce(values, per_sample)


def energy_param_grad(params: Parameters, state: NetworkState) -> Parameters:
    """Closed-form ``dE/dtheta`` at ``state``, summed over the batch.

    Pool winners are those of the current forward pass and are treated as
    locally constant. The result is kept in the accumulation dtype, so
    batch sums over 16-bit states cannot overflow.
    """
    _check_pair(params, state)
    s = state.layers
    weights, biases = [], []
    for k in range(1, state.n_layers + 1):
        w = params.weights[k - 1]
        acc = compute_dtype(np.result_type(s[k - 1], s[k], w))
        if w.ndim == 2:
            prev = s[k - 1].reshape(s[k - 1].shape[0], -1)
            weights.append(-(prev.astype(acc, copy=False).T @ s[k].astype(acc, copy=False)))
            biases.append(-s[k].astype(acc, copy=False).sum(axis=0))
        else:
            _, idx = maxpool2(conv2d(s[k - 1], w))
            weights.append(-conv2d_kernel_adjoint(maxpool2_adjoint(s[k], idx), s[k - 1], acc))
            biases.append(-s[k].astype(acc, copy=False).sum(axis=(0, 2, 3)))
    return Parameters(weights, biases)
