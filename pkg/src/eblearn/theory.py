"""Numerical checks of the learning-rule theory.

Contains the augmented energy minimum ``F(beta) = min E + beta * C``, the
equilibrium-propagation surrogate losses built from it, a central
finite-difference gradient, and two small analytic models on which coupled
learning fails to descend its candidate losses.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import DomainError, NudgingError
from .model import NetworkState, Parameters, check_nudging, cost, energy
from .relaxation import PhaseSpec, Scheme, initial_state, relax

__all__ = [
    "augmented_min",
    "SurrogateEval",
    "surrogate_losses",
    "contrastive_loss",
    "cpl_contrast_L2",
    "fd_param_grad",
    "QuadraticCpLModel",
    "ScalarCpLModel",
    "quadratic_counterexample",
    "scalar_counterexample",
]

DEFAULT_ITERS = 20000
DEFAULT_TOL = 1e-10


def _relax_to(params, x, phase_kw, init, iters, tol, scheme):
    start = init if init is not None else initial_state(params, x)
    mode = phase_kw.pop("mode")
    phase = PhaseSpec(mode, iters, scheme, tol=tol, **phase_kw)
    report = relax(params, start, phase)
    if not report.converged:
        warnings.warn(f"{mode} relaxation stopped at residual {report.residual:.3g} > {tol}",
                      RuntimeWarning)
    return report


def augmented_min(params: Parameters, x: np.ndarray, y: np.ndarray, beta: float,
                  iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
                  init: Optional[NetworkState] = None, scheme=Scheme.ASYNC):
    """Minimise ``E + beta * C`` over the free layers.

    Returns ``(state, F, converged)``. ``init`` warm-starts the relaxation
    (the zero state otherwise).
    """
    check_nudging(beta)
    y = np.asarray(y, dtype=np.float64)
    if beta == 0.0:
        report = _relax_to(params, x, {"mode": "free"}, init, iters, tol, scheme)
    else:
        report = _relax_to(params, x, {"mode": "nudged", "beta": beta, "target": y},
                           init, iters, tol, scheme)
    state = report.state
    value = energy(params, state) + beta * cost(state.output, y.reshape(state.output.shape))
    return state, value, report.converged


@dataclass
class SurrogateEval:
    """``F`` at ``-beta, 0, +beta`` and the losses derived from it."""

    beta: float
    F_values: dict
    C_free: float
    converged: bool = True
    states: dict = field(default_factory=dict, repr=False)

    @property
    def L_beta(self) -> float:
        return (self.F_values[self.beta] - self.F_values[0.0]) / self.beta

    @property
    def L_minus_beta(self) -> float:
        return (self.F_values[-self.beta] - self.F_values[0.0]) / -self.beta

    @property
    def L_centered(self) -> float:
        return (self.F_values[self.beta] - self.F_values[-self.beta]) / (2 * self.beta)


def surrogate_losses(params: Parameters, x: np.ndarray, y: np.ndarray, beta: float,
                     iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
                     scheme=Scheme.ASYNC) -> SurrogateEval:
    """Evaluate ``F`` at ``{-beta, 0, +beta}``; the nudged minima start from the free one."""
    if not beta > 0:
        raise NudgingError(f"surrogate losses need beta > 0, got {beta}")
    free, f0, ok = augmented_min(params, x, y, 0.0, iters, tol, scheme=scheme)
    values, states = {0.0: f0}, {0.0: free}
    for b in (-beta, beta):
        states[b], values[b], ok_b = augmented_min(params, x, y, b, iters, tol, init=free,
                                                   scheme=scheme)
        ok = ok and ok_b
    y = np.asarray(y, dtype=np.float64).reshape(free.output.shape)
    return SurrogateEval(beta, values, cost(free.output, y), ok, states)


def contrastive_loss(params: Parameters, x: np.ndarray, y: np.ndarray,
                     iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
                     init: Optional[NetworkState] = None, scheme=Scheme.ASYNC):
    """``E(clamped to y) - E(free)`` at the two minima. Returns ``(value, free_state)``."""
    free = _relax_to(params, x, {"mode": "free"}, init, iters, tol, scheme).state
    y = np.asarray(y, dtype=np.float64).reshape(free.output.shape)
    clamped = _relax_to(params, x, {"mode": "clamped", "target": y}, free, iters, tol, scheme).state
    return energy(params, clamped) - energy(params, free), free


def cpl_contrast_L2(params: Parameters, x: np.ndarray, y: np.ndarray, beta: float,
                    iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
                    scheme=Scheme.ASYNC) -> float:
    """``(E(clamped to (1-beta) o + beta y) - E(free)) / beta``."""
    if beta == 0.0:
        raise NudgingError("coupled contrast needs a non-zero beta")
    free = _relax_to(params, x, {"mode": "free"}, None, iters, tol, scheme).state
    y = np.asarray(y, dtype=np.float64).reshape(free.output.shape)
    target = (1.0 - beta) * free.output + beta * y
    clamped = _relax_to(params, x, {"mode": "clamped", "target": target}, free, iters, tol,
                        scheme).state
    return (energy(params, clamped) - energy(params, free)) / beta


def fd_param_grad(f: Callable[[Parameters], float], params: Parameters, eps: float = 1e-5,
                  return_kinks: bool = False):
    """Central finite-difference gradient of a scalar function of the parameters.

    With ``return_kinks`` the flat indices where the two one-sided slopes
    disagree by far more than smooth curvature allows (a pool winner
    flipped inside the stencil) are also returned.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = params.flatten().astype(np.float64)
    grad = np.empty_like(theta)
    f0 = f(params) if return_kinks else None
    kinks = []
    for i in range(theta.size):
        t = theta.copy()
        t[i] += eps
        plus = f(params.unflatten(t))
        t[i] = theta[i] - eps
        minus = f(params.unflatten(t))
        grad[i] = (plus - minus) / (2 * eps)
        if return_kinks:
            right, left = (plus - f0) / eps, (f0 - minus) / eps
            if abs(right - left) > 1e-3 * max(1.0, abs(right), abs(left)):
                kinks.append(i)
    grad = params.unflatten(grad)
    return (grad, kinks) if return_kinks else grad


@dataclass(frozen=True)
class QuadraticCpLModel:
    """``E(theta, o) = 0.5 (o - b)^T A (o - b)`` with ``b = (1 + t2, t1 + 2 t2)``, target 0."""

    A: tuple = ((1.0, -1.0), (-1.0, 2.0))
    y: tuple = (0.0, 0.0)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.shape != (2, 2) or not np.allclose(A, A.T) or np.linalg.eigvalsh(A).min() <= 0:
            raise DomainError("A must be a symmetric positive definite 2x2 matrix")

    @staticmethod
    def b(theta) -> np.ndarray:
        t1, t2 = theta
        return np.array([1.0 + t2, t1 + 2.0 * t2])

    @staticmethod
    def b_jacobian() -> np.ndarray:
        # rows: components of b, columns: theta coordinates
        return np.array([[0.0, 1.0], [1.0, 2.0]])

    def equilibrium(self, theta) -> np.ndarray:
        return self.b(theta)

    def mse(self, theta) -> float:
        r = self.equilibrium(theta) - np.asarray(self.y)
        return float(r @ r)

    def mse_grad(self, theta) -> np.ndarray:
        r = self.equilibrium(theta) - np.asarray(self.y)
        return 2.0 * self.b_jacobian().T @ r

    def energy_theta_grad(self, theta, o) -> np.ndarray:
        A = np.asarray(self.A)
        return -self.b_jacobian().T @ A @ (np.asarray(o) - self.b(theta))

    def energy(self, theta, o) -> float:
        r = np.asarray(o) - self.b(theta)
        return float(0.5 * r @ np.asarray(self.A) @ r)

    def cpl_contrast(self, theta, beta: float) -> float:
        """``(E(theta, o_beta) - E(theta, o_free)) / beta`` with ``o_beta = (1 - beta) o + beta y``."""
        o_free = self.equilibrium(theta)
        o_beta = (1.0 - beta) * o_free + beta * np.asarray(self.y)
        return (self.energy(theta, o_beta) - self.energy(theta, o_free)) / beta

    def cpl_update(self, theta, eta: float, beta: float) -> np.ndarray:
        """Coupled-learning step contrasting the free and nudged-clamped energies.

        The energy gradient is affine in ``o``, so ``beta`` cancels and the
        step is defined (by continuity) at ``beta = 0`` too.
        """
        o_free = self.equilibrium(theta)
        if beta == 0.0:
            beta = 1.0
        o_beta = (1.0 - beta) * o_free + beta * np.asarray(self.y)
        return -eta / beta * (self.energy_theta_grad(theta, o_beta)
                              - self.energy_theta_grad(theta, o_free))


@dataclass(frozen=True)
class ScalarCpLModel:
    """``E(theta, o) = 0.5 (5 - 4 theta)(o - theta)^2`` with target 0, for ``theta`` in (0, 5/4)."""

    lower: float = 0.0
    upper: float = 1.25

    def check(self, theta: float) -> None:
        if not self.lower < theta < self.upper:
            raise DomainError(f"theta must lie in ({self.lower}, {self.upper}), got {theta}")

    def energy(self, theta: float, o: float) -> float:
        return 0.5 * (5 - 4 * theta) * (o - theta) ** 2

    def energy_theta_grad(self, theta: float, o: float) -> float:
        return -2 * (o - theta) ** 2 - (5 - 4 * theta) * (o - theta)

    def output_curvature(self, theta: float) -> float:
        return 5 - 4 * theta

    def l1(self, theta: float) -> float:
        """Curvature-weighted squared error ``(o - y) H (o - y)`` at the free output ``o = theta``."""
        self.check(theta)
        return self.output_curvature(theta) * theta**2

    def l1_prime(self, theta: float) -> float:
        self.check(theta)
        return 10 * theta - 12 * theta**2

    def cpl_update(self, theta: float, eta: float, beta: float) -> float:
        self.check(theta)
        o_beta = (1 - beta) * theta
        return -eta / beta * (self.energy_theta_grad(theta, o_beta) - self.energy_theta_grad(theta, theta))


@dataclass(frozen=True)
class QuadraticCounterexample:
    delta_theta: np.ndarray
    directional_derivative: float
    loss_before: float
    loss_after: float


@dataclass(frozen=True)
class ScalarCounterexample:
    delta_theta: float
    L1_prime: float
    theta0: float


def quadratic_counterexample(eta: float = 1e-3, beta: float = 0.5) -> QuadraticCounterexample:
    """Coupled-learning step on the quadratic model at ``theta = (0, 0)``.

    The step reduces to ``-eta * b'^T A b`` for every ``beta``; the
    directional derivative uses the exact gradient ``2 b'^T b`` of the
    squared error.
    """
    if not eta > 0:
        raise DomainError("eta must be positive")
    model = QuadraticCpLModel()
    theta0 = np.zeros(2)
    delta = model.cpl_update(theta0, eta, beta)
    return QuadraticCounterexample(
        delta_theta=delta,
        directional_derivative=float(model.mse_grad(theta0) @ delta),
        loss_before=model.mse(theta0),
        loss_after=model.mse(theta0 + delta),
    )


def scalar_counterexample(eta: float = 1e-3, beta: float = 0.5,
                          theta0: float = 1.0) -> ScalarCounterexample:
    """Coupled-learning step and ``L1`` slope on the scalar model at ``theta0``.

    The step applies the one-sided rule to the exact energy derivative
    ``dE/dtheta = (o - theta)(6 theta - 2 o - 5)``, which gives
    ``-eta * (5 - 4 theta - 2 beta theta) * theta``.
    """
    model = ScalarCpLModel()
    return ScalarCounterexample(model.cpl_update(theta0, eta, beta), model.l1_prime(theta0), theta0)


def relative_error(measured: np.ndarray, reference: np.ndarray) -> float:
    """``max |measured - reference| / max |reference|`` (absolute when the reference is zero)."""
    measured, reference = np.ravel(measured), np.ravel(reference)
    scale = np.abs(reference).max(initial=0.0)
    diff = np.abs(measured - reference).max(initial=0.0)
    return float(diff / scale) if scale > 0 else float(diff)


def _warm_value(fn, params, init):
    """Wrap ``fn(params, init) -> (value, state)`` so each call warm-starts from ``init``."""
    return lambda q: fn(q, init)[0]


def update_theorem_errors(params: Parameters, x: np.ndarray, y: np.ndarray, beta: float,
                          tol: float = DEFAULT_TOL, eps: float = 1e-5,
                          iters: int = DEFAULT_ITERS, scheme=Scheme.ASYNC) -> dict:
    """Relative errors between each rule's update and minus the finite-difference
    gradient of the loss it descends.

    Keys are ``"cl"``, ``"p-ep"``, ``"n-ep"`` and ``"c-ep"``. The relaxations
    of the finite-difference stencil are warm-started from the unperturbed
    minima so they stay on the same branch. Raises ``RuntimeError`` when a
    stencil straddles a pool-winner change.
    """
    from .rules import UpdateRule, compute_update

    y = np.asarray(y, dtype=np.float64)
    free, _, _ = augmented_min(params, x, y, 0.0, iters, tol, scheme=scheme)
    mins = {0.0: free}
    for b in (-beta, beta):
        mins[b] = augmented_min(params, x, y, b, iters, tol, init=free, scheme=scheme)[0]
    clamped = _relax_to(params, x, {"mode": "clamped", "target": y.reshape(free.output.shape)},
                        free, iters, tol, scheme).state

    def F(b):
        return lambda q: augmented_min(q, x, y, b, iters, tol, init=mins[b], scheme=scheme)[1]

    def G(q):
        return energy(q, _relax_to(q, x, {"mode": "clamped", "target": y.reshape(free.output.shape)},
                                   clamped, iters, tol, scheme).state)

    grads = {}
    for key, f in (("F0", F(0.0)), ("F+", F(beta)), ("F-", F(-beta)), ("G", G)):
        g, kinks = fd_param_grad(f, params, eps, return_kinks=True)
        if kinks:
            raise RuntimeError(f"finite-difference stencil crosses a kink in {key}")
        grads[key] = g.flatten()
    targets = {
        "cl": -(grads["G"] - grads["F0"]),
        "p-ep": -(grads["F+"] - grads["F0"]) / beta,
        "n-ep": -(grads["F-"] - grads["F0"]) / -beta,
        "c-ep": -(grads["F+"] - grads["F-"]) / (2 * beta),
    }
    errors = {}
    for name, target in targets.items():
        rule = UpdateRule.from_name(name, beta=beta, K=iters, scheme=scheme, tol=tol)
        update = compute_update(rule, params, x, y.reshape(free.output.shape), free)
        errors[name] = relative_error(update.flatten(), target)
    return errors
