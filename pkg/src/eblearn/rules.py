"""Contrastive energy-based learning rules.

Every rule contrasts the energy parameter-gradients of two equilibrium
states. They differ in how the second state (or pair of states) is
obtained from the free state:

* ``cl``: output clamped to the target.
* ``p-ep`` / ``n-ep``: output nudged by ``+beta`` / ``-beta`` times the cost.
* ``c-ep``: two nudged phases at ``-beta`` and ``+beta``.
* ``p-cpl`` / ``n-cpl`` / ``c-cpl``: output clamped to
  ``(1 - beta) * o_free + beta * y`` with the corresponding sign(s).

The returned update is rate-free and already oriented as a descent
direction: the optimizer subtracts ``-lr * update``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .exceptions import NudgingError
from .model import NetworkState, Parameters, check_nudging, energy_param_grad
from .relaxation import PhaseSpec, Scheme, relax

__all__ = ["RuleKind", "UpdateRule", "contrast", "compute_update", "RULE_NAMES"]


class RuleKind(str, enum.Enum):
    CL = "cl"
    P_EP = "p-ep"
    N_EP = "n-ep"
    C_EP = "c-ep"
    P_CPL = "p-cpl"
    N_CPL = "n-cpl"
    C_CPL = "c-cpl"

    @property
    def family(self) -> str:
        if self is RuleKind.CL:
            return "cl"
        return "ep" if self.value.endswith("-ep") else "cpl"

    @property
    def sign(self) -> str:
        return self.value[0] if self is not RuleKind.CL else ""


RULE_NAMES = [k.value for k in RuleKind]


@dataclass(frozen=True)
class UpdateRule:
    """A learning rule with its nudging strength and perturbed-phase length.

    ``beta`` is a magnitude; negatively-perturbed variants apply the sign
    themselves (a negative value given for them is taken as its magnitude).
    ``tol`` stops perturbed phases early once their residual drops below it.
    """

    kind: RuleKind
    beta: float = 0.25
    K: int = 15
    scheme: Scheme = Scheme.ASYNC
    tol: Optional[float] = None

    def __post_init__(self):
        kind = RuleKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if kind is RuleKind.CL:
            return
        beta = float(self.beta)
        if beta == 0.0:
            raise NudgingError(f"{kind.value} needs a non-zero nudging parameter")
        if kind.sign == "n":
            beta = abs(beta)
        elif beta < 0:
            raise NudgingError(f"{kind.value} needs beta > 0, got {beta}")
        object.__setattr__(self, "beta", beta)
        if kind.family == "ep":
            for b in self.nudgings:
                check_nudging(b)

    @classmethod
    def from_name(cls, name: str, **kw) -> "UpdateRule":
        return cls(RuleKind(name.lower()), **kw)

    @property
    def nudgings(self) -> tuple:
        """Signed nudging values of the perturbed phases, in execution order."""
        if self.kind is RuleKind.CL:
            return ()
        if self.kind.sign == "p":
            return (self.beta,)
        if self.kind.sign == "n":
            return (-self.beta,)
        return (-self.beta, self.beta)

    @property
    def n_perturbed_phases(self) -> int:
        return max(1, len(self.nudgings))


def contrast(params: Parameters, state_a: NetworkState, state_b: NetworkState,
             scale: float) -> Parameters:
    """``scale * (dE/dtheta(state_a) - dE/dtheta(state_b))``."""
    ga = energy_param_grad(params, state_a)
    gb = energy_param_grad(params, state_b)
    return (ga - gb).scale(scale)


def _phase(rule: UpdateRule, mode: str, beta: float, target) -> PhaseSpec:
    return PhaseSpec(mode, rule.K, rule.scheme, beta=beta, target=target, tol=rule.tol)


def perturbed_state(rule: UpdateRule, params: Parameters, free: NetworkState,
                    y: np.ndarray, beta: float) -> NetworkState:
    """Second-phase equilibrium for one signed nudging value, started from ``free``."""
    y = np.asarray(y, dtype=free.output.dtype)
    if rule.kind is RuleKind.CL:
        phase = _phase(rule, "clamped", 0.0, y)
    elif rule.kind.family == "ep":
        phase = _phase(rule, "nudged", beta, y)
    else:
        o_beta = ((1.0 - beta) * free.output + beta * y).astype(free.output.dtype)
        phase = _phase(rule, "clamped", 0.0, o_beta)
    return relax(params, free, phase).state


def compute_update(rule: UpdateRule, params: Parameters, x: np.ndarray, y: np.ndarray,
                   free: NetworkState, return_states: bool = False):
    """Parameter update of ``rule`` given a free equilibrium for input ``x``.

    ``y`` holds one-hot targets with the batch axis of ``free``. The update
    is summed over the batch and excludes the learning rate.
    """
    x = np.asarray(x)
    batched_x = x if x.ndim == free.layers[0].ndim else x[None]
    if not np.array_equal(batched_x.astype(free.layers[0].dtype), free.layers[0]):
        raise ValueError("free state was not computed for this input")
    y = np.asarray(y, dtype=free.output.dtype).reshape(free.output.shape)
    free = free.with_clamped((True,) + (False,) * free.n_layers)
    if rule.kind is RuleKind.CL:
        second = perturbed_state(rule, params, free, y, 1.0)
        update, states = contrast(params, free, second, 1.0), (second,)
    elif rule.kind.sign in ("p", "n"):
        (beta,) = rule.nudgings
        second = perturbed_state(rule, params, free, y, beta)
        update, states = contrast(params, free, second, 1.0 / beta), (second,)
    else:
        minus = perturbed_state(rule, params, free, y, -rule.beta)
        plus = perturbed_state(rule, params, free, y, rule.beta)
        update, states = contrast(params, minus, plus, 1.0 / (2.0 * rule.beta)), (minus, plus)
    if return_states:
        return update, states
    return update


def signed(rule: UpdateRule, beta: float) -> UpdateRule:
    """Same rule family evaluated at a signed ``beta`` through the one-sided formula."""
    kind = RuleKind(("p-" if beta > 0 else "n-") + rule.kind.family)
    return replace(rule, kind=kind, beta=abs(beta))
