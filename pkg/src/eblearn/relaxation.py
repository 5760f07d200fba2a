"""Energy minimisation by fixed-point iteration.

Each update sets a layer to ``sigma_k(dPhi/ds_k)``: the hard sigmoid for
hidden layers, the identity for the output layer (or the closed-form
stationary point of the nudged energy when a nudge is active).

Two schemes are provided. ``sync`` updates every free layer from the same
state. ``async`` first updates the even-indexed layers from the current
state, then the odd-indexed layers from the half-updated one; even layers
only interact with odd layers, so each half-step is an exact parallel
block update.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DivergenceError, NudgingError, ShapeError
from .model import (
    NetworkState,
    Parameters,
    check_nudging,
    cost,
    energy,
    forward_interaction,
    hard_sigmoid,
    interaction_adjoint,
    nudged_output,
)

__all__ = [
    "Scheme",
    "PhaseSpec",
    "RelaxationReport",
    "relax",
    "free_state",
    "initial_state",
    "layer_groups",
    "write_trace",
]


class Scheme(str, enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class PhaseSpec:
    """What is clamped or nudged during a relaxation, and for how long.

    ``mode`` is one of ``"free"``, ``"nudged"`` (requires ``beta`` and
    ``target``) or ``"clamped"`` (requires ``target``: the fixed output).
    ``tol`` optionally stops the iteration once the residual falls below it.
    """

    mode: str = "free"
    iterations: int = 60
    scheme: Scheme = Scheme.ASYNC
    beta: float = 0.0
    target: Optional[np.ndarray] = None
    tol: Optional[float] = None
    record_energy: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.mode not in ("free", "nudged", "clamped"):
            raise ValueError(f"unknown phase mode {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.mode != "free" and self.target is None:
            raise ValueError(f"{self.mode} phase needs a target")
        if self.mode == "nudged":
            check_nudging(self.beta)

    @classmethod
    def free(cls, iterations, scheme=Scheme.ASYNC, **kw) -> "PhaseSpec":
        return cls("free", iterations, scheme, **kw)

    @classmethod
    def nudged(cls, beta, target, iterations, scheme=Scheme.ASYNC, **kw) -> "PhaseSpec":
        return cls("nudged", iterations, scheme, beta=beta, target=target, **kw)

    @classmethod
    def clamped(cls, output, iterations, scheme=Scheme.ASYNC, **kw) -> "PhaseSpec":
        return cls("clamped", iterations, scheme, target=output, **kw)


@dataclass
class RelaxationReport:
    state: NetworkState
    residuals: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("inf")


def layer_groups(n_layers: int, scheme: Scheme, clamped=()) -> list:
    """Layers updated together, in order, within one iteration."""
    free = [k for k in range(1, n_layers + 1) if not (clamped and clamped[k])]
    if Scheme(scheme) is Scheme.SYNC:
        return [free]
    return [[k for k in free if k % 2 == 0], [k for k in free if k % 2 == 1]]


class StepContext:
    """Caches the bottom-up interactions of a state between layer updates.

    ``forward(k)`` is ``P(w_k * s_{k-1})`` (or the dense product) together
    with its pool winners; it stays valid until ``s_{k-1}`` changes.
    """

    def __init__(self, params: Parameters, layers: list):
        self.params = params
        self.layers = layers
        self.n_layers = len(layers) - 1
        self._cache = {}

    def forward(self, k: int):
        if k not in self._cache:
            self._cache[k] = forward_interaction(self.params, k, self.layers[k - 1])
        return self._cache[k]

    def drive(self, k: int) -> np.ndarray:
        s = self.layers
        value, _ = self.forward(k)
        b = self.params.biases[k - 1]
        drive = value + (b[:, None, None] if value.ndim == 4 else b)
        if k < self.n_layers:
            _, idx = self.forward(k + 1)
            drive = drive + interaction_adjoint(self.params, k + 1, s[k + 1], idx, s[k].shape)
        return drive.astype(s[k].dtype, copy=False)

    def assign(self, k: int, value: np.ndarray) -> None:
        self.layers[k] = value
        self._cache.pop(k + 1, None)


def activate(k: int, n_layers: int, drive: np.ndarray, phase: PhaseSpec) -> np.ndarray:
    if k < n_layers:
        return hard_sigmoid(drive)
    if phase.mode == "nudged":
        return nudged_output(drive, phase.beta, phase.target)
    return drive


def _phase_energy(params: Parameters, state: NetworkState, phase: PhaseSpec) -> float:
    e = energy(params, state)
    if phase.mode == "nudged":
        e += phase.beta * cost(state.output, phase.target)
    return e


def relax(params: Parameters, initial: NetworkState, phase: PhaseSpec) -> RelaxationReport:
    """Run the fixed-point dynamics for ``phase.iterations`` iterations.

    The input state is not modified. Raises :class:`DivergenceError` when a
    layer becomes non-finite.
    """
    if params.n_layers != initial.n_layers:
        raise ShapeError("parameters and state disagree on the number of layers")
    L = initial.n_layers
    dtype = initial.layers[-1].dtype
    clamped = list(initial.clamped)
    layers = [np.array(s) for s in initial.layers]
    if phase.mode == "clamped":
        target = np.asarray(phase.target, dtype=dtype)
        if target.shape != layers[-1].shape:
            raise ShapeError(f"clamped output {target.shape} != output shape {layers[-1].shape}")
        layers[-1] = target.copy()
        clamped[-1] = True
    else:
        clamped[-1] = False
        if phase.mode == "nudged":
            target = np.asarray(phase.target, dtype=dtype)
            if target.shape != layers[-1].shape:
                raise ShapeError(f"target {target.shape} != output shape {layers[-1].shape}")
            phase = PhaseSpec("nudged", phase.iterations, phase.scheme, phase.beta, target,
                              phase.tol, phase.record_energy)
    if phase.mode == "nudged" and not 1 + 2 * phase.beta > 0:
        raise NudgingError(f"invalid nudging {phase.beta}")

    ctx = StepContext(params, layers)
    groups = layer_groups(L, phase.scheme, clamped)
    report = RelaxationReport(NetworkState(layers, tuple(clamped)))
    for t in range(phase.iterations):
        residual = 0.0
        for group in groups:
            drives = {k: ctx.drive(k) for k in group}
            for k in group:
                new = activate(k, L, drives[k], phase)
                change = float(np.abs(new - layers[k]).max(initial=0.0))
                if not np.isfinite(change):
                    raise DivergenceError(
                        f"layer {k} became non-finite at iteration {t + 1}", iteration=t + 1
                    )
                residual = max(residual, change)
                ctx.assign(k, new)
        report.residuals.append(residual)
        report.iterations = t + 1
        if phase.record_energy:
            report.energies.append(_phase_energy(params, report.state, phase))
        if phase.tol is not None and residual <= phase.tol:
            report.converged = True
            break
    report.state = NetworkState(layers, tuple(clamped))
    if phase.tol is None:
        report.converged = bool(report.residuals) and report.residuals[-1] == 0.0
    return report


def initial_state(params: Parameters, x: np.ndarray) -> NetworkState:
    """State with ``x`` clamped and every other layer at zero."""
    x = np.asarray(x)
    batched = x if x.ndim == 4 else x[None]
    b, _, h, w = batched.shape
    layers = [batched.astype(params.dtype)]
    for weight in params.weights:
        if weight.ndim == 2:
            layers.append(np.zeros((b, weight.shape[1]), dtype=params.dtype))
        else:
            h, w = h // 2, w // 2
            layers.append(np.zeros((b, weight.shape[0], h, w), dtype=params.dtype))
    return NetworkState(layers)


def free_state(params: Parameters, x: np.ndarray, T: int, scheme=Scheme.ASYNC) -> NetworkState:
    """Free equilibrium reached after ``T`` iterations from the zero state."""
    return relax(params, initial_state(params, x), PhaseSpec.free(T, scheme)).state


def write_trace(report: RelaxationReport, stream, **columns) -> None:
    """Write ``iteration, residual, energy`` rows (plus constant ``columns``)."""
    writer = csv.writer(stream)
    extra = list(columns)
    writer.writerow(extra + ["iteration", "residual", "energy"])
    for i, r in enumerate(report.residuals):
        e = report.energies[i] if i < len(report.energies) else ""
        writer.writerow([columns[c] for c in extra] + [i + 1, repr(r), e if e == "" else repr(e)])
