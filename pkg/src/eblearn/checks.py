"""Numerical self-checks shared by ``eblearn verify`` and the acceptance suite.

Every check returns :class:`CheckResult` rows: a name, a measured error, the
tolerance it is held to and whether it passed. Random problems are tiny
networks (one 4-channel conv layer on 8x8 inputs plus a dense output, under
a thousand parameters) in 64-bit precision.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .baselines import rbp_gradient, tbp_gradient
from .kernels import conv2d, conv2d_input_adjoint, conv2d_kernel_adjoint, maxpool2, \
    maxpool2_adjoint, maxpool2_gather
from .model import Architecture, Parameters, cost, one_hot
from .relaxation import PhaseSpec, Scheme, initial_state, relax
from .rules import UpdateRule, compute_update
from .theory import (
    augmented_min,
    fd_param_grad,
    quadratic_counterexample,
    relative_error,
    scalar_counterexample,
    surrogate_losses,
    update_theorem_errors,
)

__all__ = [
    "CheckResult",
    "TINY_ARCH",
    "random_problem",
    "bound_checks",
    "update_theorem_checks",
    "slope_checks",
    "counterexample_checks",
    "baseline_checks",
    "identity_checks",
    "scheme_checks",
    "adjoint_checks",
    "BenchTrace",
    "bench_relaxation",
    "run_tier",
]

TINY_ARCH = Architecture(in_channels=1, image_size=8, channels=(4,), n_out=10)
SLOPE_BETAS = (0.2, 0.1, 0.05, 0.025)
COUNTEREXAMPLE_BETAS = (-0.3, 0.5, 1.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    detail: str = ""

    @classmethod
    def at_most(cls, name: str, error: float, tolerance: float, detail: str = "") -> "CheckResult":
        return cls(name, float(error), tolerance, bool(error <= tolerance), detail)

    def row(self) -> list:
        return [self.name, f"{self.error:.3e}", f"{self.tolerance:.1e}",
                "PASS" if self.passed else "FAIL", self.detail]


def random_problem(rng: np.random.Generator, arch: Architecture = TINY_ARCH, batch: int = 1,
                   gain: float = 0.5, bias: float = 0.2):
    """Kaiming-uniform weights times ``gain``, uniform biases, Gaussian input, one-hot target.

    The default gain is the one the training presets use for every layer.
    """
    weights = []
    for shape in arch.weight_shapes:
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        c = gain / np.sqrt(fan_in)
        weights.append(rng.uniform(-c, c, size=shape))
    biases = [rng.uniform(-bias, bias, size=s) for s in arch.bias_shapes]
    x = rng.normal(size=(batch,) + arch.layer_shapes[0])
    y = one_hot(rng.integers(0, arch.n_out, size=batch), arch.n_out)
    return Parameters(weights, biases), x, y


def _problems(n: int, seed: int, **kw):
    rng = np.random.default_rng(seed)
    return [random_problem(rng, **kw) for _ in range(n)]


def bound_checks(n_nets: int = 20, betas=(0.1, 0.25), seed: int = 0) -> list:
    """``L(+beta) <= C(free) <= L(-beta)`` on every net; error is the worst violation."""
    out = []
    problems = _problems(n_nets, seed)
    for beta in betas:
        worst, converged = 0.0, True
        for params, x, y in problems:
            ev = surrogate_losses(params, x, y, beta)
            converged = converged and ev.converged
            worst = max(worst, ev.L_beta - ev.C_free, ev.C_free - ev.L_minus_beta)
        out.append(CheckResult(f"bounds[beta={beta}]", max(worst, 0.0), 0.0,
                               worst <= 0.0 and converged,
                               f"{n_nets} nets" + ("" if converged else ", not converged")))
    return out


def update_theorem_checks(n_nets: int = 20, beta: float = 0.25, tol: float = 1e-4,
                          seed: int = 1) -> list:
    """Each rule's update against minus the finite-difference gradient of its loss."""
    worst = {}
    for params, x, y in _problems(n_nets, seed):
        for name, err in update_theorem_errors(params, x, y, beta).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult.at_most(f"update-theorem[{name}]", err, tol, f"{n_nets} nets")
            for name, err in worst.items()]


def _slope(betas, gaps) -> float:
    return float(np.polyfit(np.log(betas), np.log(np.abs(gaps)), 1)[0])


def slope_checks(n_nets: int = 20, betas=SLOPE_BETAS, tol: float = 0.3, seed: int = 2) -> list:
    """Log-log slope of the surrogate gaps against beta (1 one-sided, 2 centered)."""
    slopes = {"plus": [], "minus": [], "centered": []}
    for params, x, y in _problems(n_nets, seed):
        free, f0, _ = augmented_min(params, x, y, 0.0)
        c = cost(free.output, y)
        plus, minus, centered = [], [], []
        for beta in betas:
            fp = augmented_min(params, x, y, beta, init=free)[1]
            fm = augmented_min(params, x, y, -beta, init=free)[1]
            plus.append((fp - f0) / beta - c)
            minus.append((f0 - fm) / beta - c)
            centered.append((fp - fm) / (2 * beta) - c)
        slopes["plus"].append(_slope(betas, plus))
        slopes["minus"].append(_slope(betas, minus))
        slopes["centered"].append(_slope(betas, centered))
    out = []
    for key, target in (("plus", 1.0), ("minus", 1.0), ("centered", 2.0)):
        values = np.array(slopes[key])
        err = float(np.abs(values - target).max())
        out.append(CheckResult.at_most(
            f"beta-slope[{key}]", err, tol,
            f"target {target:g}, slopes {values.min():.3f}..{values.max():.3f}"))
    return out


def counterexample_checks(eta: float = 1e-3, betas=COUNTEREXAMPLE_BETAS, tol: float = 1e-10,
                          stated: bool = True, derived: bool = True) -> list:
    """Coupled-learning counterexamples on the two analytic models.

    ``stated`` rows compare against the published closed forms (directional
    derivative ``eta``, step ``-eta (1 + 2 beta)``); ``derived`` rows compare
    against the forms obtained by differentiating the models directly
    (``2 eta`` and ``-eta (1 - 2 beta)``). The slope ``L1'(1) = -2`` is
    common to both.
    """
    out = []
    for beta in betas:
        q = quadratic_counterexample(eta, beta)
        s = scalar_counterexample(eta, beta, 1.0)
        measured = {"dir-deriv": q.directional_derivative, "step": s.delta_theta}
        if stated:
            for key, expected in (("dir-deriv", eta), ("step", -eta * (1 + 2 * beta))):
                out.append(CheckResult.at_most(
                    f"counterexample[{key},beta={beta},stated]", abs(measured[key] - expected), tol,
                    f"measured {measured[key]:.12g}, expected {expected:.12g}"))
        if derived:
            for key, expected in (("dir-deriv", 2 * eta), ("step", -eta * (1 - 2 * beta))):
                out.append(CheckResult.at_most(
                    f"counterexample[{key},beta={beta},derived]", abs(measured[key] - expected),
                    tol, f"measured {measured[key]:.12g}, expected {expected:.12g}"))
    s = scalar_counterexample(eta, 0.5, 1.0)
    out.append(CheckResult.at_most("counterexample[L1-slope]", abs(s.L1_prime + 2.0), tol,
                                   f"measured {s.L1_prime:.12g}, expected -2"))
    return out


def _converged_free(params, x):
    report = relax(params, initial_state(params, x), PhaseSpec.free(20000, tol=1e-13))
    return report.state


def baseline_checks(n_nets: int = 20, K: int = 200, tol: float = 1e-4, seed: int = 3) -> list:
    """TBP, RBP and finite differences of the free-state cost agree pairwise."""
    worst = {"tbp-fd": 0.0, "rbp-fd": 0.0, "tbp-rbp": 0.0}
    for params, x, y in _problems(n_nets, seed):
        free = _converged_free(params, x)

        def f(q):
            return cost(relax(q, free, PhaseSpec.free(20000, tol=1e-13)).state.output, y)

        fd = fd_param_grad(f, params, 1e-5).flatten()
        tbp = tbp_gradient(params, x, y, T=0, K=K, free=free).flatten()
        rbp = rbp_gradient(params, x, y, T=0, tol=1e-13, free=free).gradient.flatten()
        worst["tbp-fd"] = max(worst["tbp-fd"], relative_error(tbp, fd))
        worst["rbp-fd"] = max(worst["rbp-fd"], relative_error(rbp, fd))
        worst["tbp-rbp"] = max(worst["tbp-rbp"], relative_error(tbp, rbp))
    return [CheckResult.at_most(f"baselines[{k}]", v, tol, f"{n_nets} nets, K={K}")
            for k, v in worst.items()]


def identity_checks(n_nets: int = 5, beta: float = 0.25, tol: float = 1e-12, seed: int = 4) -> list:
    """CpL at beta = 1 equals CL; C-EP equals the mean of the two one-sided EP updates."""
    err_cl, err_c = 0.0, 0.0
    for params, x, y in _problems(n_nets, seed, batch=2):
        free = relax(params, initial_state(params, x), PhaseSpec.free(5000, tol=1e-13)).state

        def update(name, b):
            return compute_update(UpdateRule.from_name(name, beta=b, K=200), params, x, y, free)

        cl, cpl = update("cl", beta), update("p-cpl", 1.0)
        err_cl = max(err_cl, cl.max_abs_diff(cpl) / max(1.0, np.abs(cl.flatten()).max()))
        mean = (update("p-ep", beta) + update("n-ep", beta)).scale(0.5)
        c = update("c-ep", beta)
        err_c = max(err_c, c.max_abs_diff(mean) / max(1.0, np.abs(c.flatten()).max()))
    return [CheckResult.at_most("identity[cpl(1)=cl]", err_cl, tol, f"{n_nets} nets"),
            CheckResult.at_most("identity[c-ep=mean(p-ep,n-ep)]", err_c, tol, f"{n_nets} nets")]


def scheme_checks(n_nets: int = 20, residual: float = 1e-8, tol: float = 1e-5, seed: int = 5) -> list:
    """Synchronous and asynchronous fixed points agree entrywise."""
    worst, converged = 0.0, True
    for params, x, _ in _problems(n_nets, seed, batch=4):
        states = []
        for scheme in (Scheme.SYNC, Scheme.ASYNC):
            report = relax(params, initial_state(params, x),
                           PhaseSpec.free(20000, scheme, tol=residual))
            converged = converged and report.converged
            states.append(report.state)
        diff = max(float(np.abs(a - b).max()) for a, b in zip(states[0].layers, states[1].layers))
        worst = max(worst, diff)
    return [CheckResult("scheme-agreement", worst, tol, worst <= tol and converged,
                        f"{n_nets} nets" + ("" if converged else ", not converged"))]


def adjoint_checks(seed: int = 6, tol: float = 1e-12) -> list:
    """Dot-product tests ``<A u, v> == <u, A^T v>`` for the convolution and pooling kernels."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(5, 3, 3, 3))
    v = rng.normal(size=(2, 5, 8, 8))
    pooled, idx = maxpool2(rng.normal(size=(2, 5, 8, 8)))
    w = rng.normal(size=pooled.shape)
    z = rng.normal(size=(2, 5, 8, 8))

    def rel(a, b):
        return abs(a - b) / max(1.0, abs(a), abs(b))

    return [
        CheckResult.at_most("adjoint[conv-input]",
                            rel(np.vdot(conv2d(u, k), v), np.vdot(u, conv2d_input_adjoint(v, k))), tol),
        CheckResult.at_most("adjoint[conv-kernel]",
                            rel(np.vdot(conv2d(u, k), v), np.vdot(k, conv2d_kernel_adjoint(v, u))), tol),
        CheckResult.at_most("adjoint[maxpool]",
                            rel(np.vdot(maxpool2_gather(z, idx), w),
                                np.vdot(z, maxpool2_adjoint(w, idx))), tol),
    ]


@dataclass(frozen=True)
class BenchTrace:
    scheme: str
    precision: str
    residuals: list
    millis: list
    target: float

    @property
    def iterations_to_target(self):
        for i, r in enumerate(self.residuals):
            if r <= self.target:
                return i + 1
        return None

    def rows(self) -> list:
        return [[self.scheme, self.precision, i + 1, repr(float(r)), f"{ms:.3f}"]
                for i, (r, ms) in enumerate(zip(self.residuals, self.millis))]


def bench_relaxation(params: Parameters, x: np.ndarray, max_iters: int = 250,
                     target: float = 1e-6, schemes=("sync", "async"),
                     precisions=("f32", "f16")) -> list:
    """Residual and cumulative wall time per iteration for every scheme and precision.

    Relaxation runs one iteration at a time from the zero state and stops at
    ``max_iters`` or once the residual reaches ``target``.
    """
    from .kernels import Precision

    traces = []
    for precision in precisions:
        dtype = Precision(precision).dtype
        p, xs = params.astype(dtype), np.asarray(x, dtype=dtype)
        for scheme in schemes:
            state = initial_state(p, xs)
            residuals, millis = [], []
            tic = time.perf_counter()
            for _ in range(max_iters):
                report = relax(p, state, PhaseSpec.free(1, scheme))
                state = report.state
                residuals.append(report.residual)
                millis.append(1000 * (time.perf_counter() - tic))
                if report.residual <= target:
                    break
            traces.append(BenchTrace(scheme, precision, residuals, millis, target))
    return traces


def run_tier(tier: str = "fast") -> list:
    """All checks of a verification tier.

    ``fast`` uses fewer random nets and skips the beta-slope fits; ``full``
    runs every check at its acceptance size.
    """
    if tier not in ("fast", "full"):
        raise ValueError(f"unknown tier {tier!r}")
    n = 20 if tier == "full" else 3
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results += adjoint_checks()
        results += bound_checks(n)
        results += update_theorem_checks(n if tier == "full" else 2)
        if tier == "full":
            results += slope_checks(n)
        results += counterexample_checks()
        results += baseline_checks(n if tier == "full" else 2)
        results += identity_checks()
        results += scheme_checks(n)
    return results
