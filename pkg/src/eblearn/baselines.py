"""Gradient baselines obtained by differentiating the relaxation dynamics.

``tbp_gradient`` unrolls ``K`` fixed-point iterations after the free phase
and reverses them with hand-written vector-Jacobian products.
``rbp_gradient`` differentiates the fixed point implicitly by iterating
the adjoint equation ``lam = dC/ds + J^T lam`` at the free state.

Both return the gradient of the squared-error cost (summed over the batch)
with respect to the parameters, i.e. an ascent direction on the cost.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DivergenceError
from .kernels import (
    conv2d,
    conv2d_input_adjoint,
    conv2d_kernel_adjoint,
    maxpool2_adjoint,
    maxpool2_gather,
)
from .model import NetworkState, Parameters
from .relaxation import PhaseSpec, Scheme, StepContext, initial_state, layer_groups, relax

__all__ = ["HalfStep", "record_steps", "reverse_step", "tbp_gradient", "rbp_gradient", "RBPResult"]


@dataclass
class HalfStep:
    """Everything needed to reverse one block update of a layer group.

    ``layers`` holds the state read by the block (before it was written),
    ``masks[k]`` the activation derivative of layer ``k`` and ``pools[k]``
    the pool winners of the bottom-up interaction into layer ``k``.
    """

    group: list
    layers: list
    masks: dict
    pools: dict


def _mask(drive: np.ndarray, k: int, n_layers: int) -> np.ndarray:
    if k == n_layers:
        return np.ones_like(drive)
    # subgradient 0 at the saturation boundaries
    return ((drive > 0) & (drive < 1)).astype(drive.dtype)


def record_steps(params: Parameters, state: NetworkState, iterations: int,
                 scheme=Scheme.ASYNC):
    """Run ``iterations`` free-phase iterations and record every half-step.

    Returns ``(final_state, steps)``.
    """
    L = state.n_layers
    layers = list(state.layers)
    ctx = StepContext(params, layers)
    groups = layer_groups(L, scheme, state.clamped)
    steps = []
    for t in range(iterations):
        for group in groups:
            snapshot = list(layers)
            masks, pools, drives = {}, {}, {}
            for k in range(1, L + 1):
                pools[k] = ctx.forward(k)[1]
            for k in group:
                drives[k] = ctx.drive(k)
                masks[k] = _mask(drives[k], k, L)
            for k in group:
                new = drives[k] if k == L else np.clip(drives[k], 0.0, 1.0)
                if not np.isfinite(new).all():
                    raise DivergenceError(f"layer {k} became non-finite during replay", iteration=t + 1)
                ctx.assign(k, new)
            steps.append(HalfStep(group, snapshot, masks, pools))
    return NetworkState(layers, state.clamped), steps


def reverse_step(params: Parameters, step: HalfStep, cotangents: list,
                 grads: Parameters = None) -> list:
    """Pull layer cotangents back through one recorded half-step.

    Parameter cotangents are accumulated into ``grads`` in place when given.
    Cotangents of the clamped input layer are dropped.
    """
    s = step.layers
    L = len(s) - 1
    out = [None if k in step.group else c for k, c in enumerate(cotangents)]
    out = [np.zeros_like(s[k]) if c is None else c.copy() for k, c in enumerate(out)]
    for k in step.group:
        g = cotangents[k] * step.masks[k]
        w = params.weights[k - 1]
        # bottom-up pathway: drive_k depends on s_{k-1}, w_k and b_k
        if w.ndim == 2:
            flat_prev = s[k - 1].reshape(s[k - 1].shape[0], -1)
            if grads is not None:
                grads.weights[k - 1] += flat_prev.T @ g
                grads.biases[k - 1] += g.sum(axis=0)
            if k > 1:
                out[k - 1] += (g @ w.T).reshape(s[k - 1].shape)
        else:
            up = maxpool2_adjoint(g, step.pools[k])
            if grads is not None:
                grads.weights[k - 1] += conv2d_kernel_adjoint(up, s[k - 1])
                grads.biases[k - 1] += g.sum(axis=(0, 2, 3))
            if k > 1:
                out[k - 1] += conv2d_input_adjoint(up, w)
        if k == L:
            continue
        # top-down pathway: drive_k also reads s_{k+1} through w_{k+1}
        w_next = params.weights[k]
        if w_next.ndim == 2:
            flat_g = g.reshape(g.shape[0], -1)
            if grads is not None:
                grads.weights[k] += flat_g.T @ s[k + 1]
            out[k + 1] += flat_g @ w_next
        else:
            idx = step.pools[k + 1]
            if grads is not None:
                grads.weights[k] += conv2d_kernel_adjoint(maxpool2_adjoint(s[k + 1], idx), g)
            out[k + 1] += maxpool2_gather(conv2d(g, w_next), idx)
    out[0] = np.zeros_like(s[0])
    return out


def _output_cotangent(state: NetworkState, y: np.ndarray) -> list:
    y = np.asarray(y, dtype=np.float64).reshape(state.output.shape)
    cot = [np.zeros_like(s) for s in state.layers]
    cot[-1] = 2.0 * (state.output - y)
    return cot


def _free(params, x, T, scheme, free):
    if free is not None:
        return free.with_clamped((True,) + (False,) * free.n_layers)
    return relax(params, initial_state(params, x), PhaseSpec.free(T, scheme)).state


def tbp_gradient(params: Parameters, x: np.ndarray, y: np.ndarray, T: int, K: int,
                 scheme=Scheme.ASYNC, free: NetworkState = None) -> Parameters:
    """Cost gradient by backpropagating through the last ``K`` iterations.

    The free phase runs ``T`` iterations (or ``free`` is used as is); the
    ``K`` replayed iterations start from it and the gradient does not flow
    into that starting state.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    start = _free(params, x, T, scheme, free)
    final, steps = record_steps(params, start, K, scheme)
    cot = _output_cotangent(final, y)
    grads = params.zeros_like()
    for step in reversed(steps):
        cot = reverse_step(params, step, cot, grads)
    return grads


@dataclass
class RBPResult:
    gradient: Parameters
    iterations: int
    converged: bool
    residual: float


def rbp_gradient(params: Parameters, x: np.ndarray, y: np.ndarray, T: int,
                 max_adjoint_iters: int = 1000, tol: float = 1e-10,
                 free: NetworkState = None, scheme=Scheme.ASYNC) -> RBPResult:
    """Cost gradient by implicit differentiation of the free fixed point.

    ``scheme`` only drives the free phase; the adjoint always uses the
    Jacobian of one synchronous step, whose fixed points coincide with
    those of the asynchronous map.
    """
    state = _free(params, x, T, scheme, free)
    _, (step,) = record_steps(params, state, 1, Scheme.SYNC)
    source = _output_cotangent(state, y)
    lam = source
    converged, residual, it = False, float("inf"), 0
    for it in range(1, max_adjoint_iters + 1):
        pulled = reverse_step(params, step, lam)
        new = [a + b for a, b in zip(source, pulled)]
        residual = max(float(np.abs(a - b).max(initial=0.0)) for a, b in zip(new, lam))
        if not np.isfinite(residual):
            raise DivergenceError("adjoint iteration became non-finite", iteration=it)
        lam = new
        if residual <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"adjoint iteration did not reach {tol} in {max_adjoint_iters} steps "
                      f"(residual {residual:.3g})", RuntimeWarning)
    grads = params.zeros_like()
    reverse_step(params, step, lam, grads)
    return RBPResult(grads, it, converged, residual)
