"""Training loop: free phase, rule-specific perturbed phases, SGD step.

Each mini-batch runs one free relaxation of ``T`` iterations, records the
prediction error and cost at the free state, computes the learning rule's
update from perturbed phases warm-started at the free state, and applies
one SGD step with momentum, weight decay and per-layer learning rates.
The learning rates follow a cosine schedule stepped once per epoch.
"""
from __future__ import annotations

import csv
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .baselines import rbp_gradient, tbp_gradient
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import DATASETS, NORMALIZATION, Dataset, augment_flip, batches, preprocess
from .exceptions import ShapeError
from .kernels import Precision
from .model import Architecture, NetworkState, Parameters, cost, one_hot
from .relaxation import PhaseSpec, Scheme, initial_state, relax
from .rules import RULE_NAMES, UpdateRule, compute_update

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "BatchMetrics",
    "EpochMetrics",
    "init_params",
    "sgd_step",
    "cosine_lr",
    "batch_update",
    "train_step",
    "evaluate",
    "fit",
    "MetricsLog",
    "BASELINES",
    "ALL_RULES",
]

BASELINES = ("tbp", "rbp")
ALL_RULES = tuple(RULE_NAMES) + BASELINES


@dataclass
class TrainConfig:
    """Hyperparameters of one training run (defaults: the comparative study)."""

    rule: str = "c-ep"
    beta: float = 0.25
    T: int = 60
    K: int = 15
    lrs: tuple = (0.0625, 0.0375, 0.025, 0.02, 0.0125)
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 128
    epochs: int = 100
    t_max: int = 100
    lr_min: float = 2e-6
    gains: tuple = (0.5, 0.5, 0.5, 0.5, 0.5)
    seed: int = 0
    precision: str = "f32"
    scheme: str = "async"
    channels: tuple = (128, 256, 512, 512)
    dataset: str = "mnist"
    workers: int = 1
    adjoint_iters: int = 100
    adjoint_tol: float = 1e-6

    def __post_init__(self):
        self.lrs = tuple(float(v) for v in self.lrs)
        self.gains = tuple(float(v) for v in self.gains)
        self.channels = tuple(int(v) for v in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.rule not in ALL_RULES:
            raise ValueError(f"unknown rule {self.rule!r}; choose from {list(ALL_RULES)}")
        n = len(self.channels) + 1
        if len(self.lrs) != n or len(self.gains) != n:
            raise ValueError(f"need {n} learning rates and gains for {len(self.channels)} conv layers")
        if min(self.lrs) < 0 or min(self.gains) < 0:
            raise ValueError("learning rates and gains must be non-negative")
        for name in ("T", "K", "epochs", "batch_size", "t_max", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("momentum must lie in [0, 1); weight decay and lr_min must be >= 0")
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        Precision(self.precision)
        Scheme(self.scheme)
        if self.rule not in BASELINES:
            self.update_rule()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def update_rule(self) -> UpdateRule:
        return UpdateRule.from_name(self.rule, beta=self.beta, K=self.K, scheme=self.scheme)

    def architecture(self) -> Architecture:
        in_channels, n_out, _, _ = DATASETS[self.dataset]
        return Architecture(in_channels, 32, self.channels, n_out)

    @property
    def master_dtype(self) -> np.dtype:
        """Dtype of the parameters the optimizer updates (16-bit runs keep 32-bit masters)."""
        return np.dtype(np.float64 if self.precision == "f64" else np.float32)

    @property
    def storage_dtype(self) -> np.dtype:
        return Precision(self.precision).dtype


@dataclass
class OptimizerState:
    velocity: Parameters
    step: int = 0

    @classmethod
    def zeros(cls, params: Parameters) -> "OptimizerState":
        return cls(params.zeros_like(), 0)


@dataclass
class BatchMetrics:
    errors: int
    cost: float
    size: int


@dataclass
class EpochMetrics:
    epoch: int
    train_error: float
    train_cost: float
    test_error: Optional[float]
    test_cost: Optional[float]
    seconds: float


def init_params(arch: Architecture, gains, seed: int, dtype=np.float32) -> Parameters:
    """Kaiming-uniform weights ``U(-c, c)``, ``c = gain / sqrt(fan_in)``; zero biases."""
    gains = tuple(gains)
    if len(gains) != arch.n_layers:
        raise ValueError(f"need {arch.n_layers} gains, got {len(gains)}")
    if min(gains) < 0:
        raise ValueError("gains must be non-negative")
    rng = np.random.default_rng(seed)
    weights = []
    for gain, shape in zip(gains, arch.weight_shapes):
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = gain / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
    biases = [np.zeros(s, dtype=dtype) for s in arch.bias_shapes]
    return Parameters(weights, biases)


def cosine_lr(t: float, eta0: float, eta_min: float, t_max: float) -> float:
    """Cosine annealing from ``eta0`` at ``t = 0`` to ``eta_min`` at ``t_max`` (held after)."""
    if t < 0:
        raise ValueError("epoch must be non-negative")
    if t >= t_max:
        return eta_min
    return eta_min + 0.5 * (eta0 - eta_min) * (1 + math.cos(math.pi * t / t_max))


def sgd_step(params: Parameters, update: Parameters, opt: OptimizerState, lrs, momentum: float,
             weight_decay: float, batch_size: int):
    """Apply one SGD step from a summed descent-direction ``update``.

    ``g = -update / batch_size + weight_decay * theta``; ``v = momentum * v + g``;
    ``theta -= lr_k * v`` with the learning rate of the parameter's layer.
    Returns new ``(params, opt)``.
    """
    if len(lrs) != params.n_layers:
        raise ShapeError(f"need {params.n_layers} learning rates, got {len(lrs)}")
    for a, u in zip(params.arrays(), update.arrays()):
        if a.shape != u.shape:
            raise ShapeError(f"update shape {u.shape} does not match parameter {a.shape}")
    n = params.n_layers
    new_arrays, new_velocity = [], []
    for i, (theta, u, v) in enumerate(zip(params.arrays(), update.arrays(), opt.velocity.arrays())):
        lr = lrs[i % n]
        g = -u.astype(theta.dtype) / batch_size + weight_decay * theta
        v = momentum * v + g
        new_velocity.append(v.astype(theta.dtype, copy=False))
        new_arrays.append((theta - lr * v).astype(theta.dtype, copy=False))
    return (Parameters.from_arrays(new_arrays),
            OptimizerState(Parameters.from_arrays(new_velocity), opt.step + 1))


def _compute_params(params: Parameters, config: TrainConfig) -> Parameters:
    dtype = config.storage_dtype
    return params if params.dtype == dtype else params.astype(dtype)


def batch_update(params: Parameters, x: np.ndarray, labels: np.ndarray, config: TrainConfig):
    """Free phase plus rule update for one chunk of a batch.

    ``params`` are in the storage dtype. Returns ``(update, metrics)`` where
    ``update`` is the summed descent direction.
    """
    scheme = Scheme(config.scheme)
    free = relax(params, initial_state(params, x), PhaseSpec.free(config.T, scheme)).state
    n_out = free.output.shape[1]
    out64 = free.output.astype(np.float64)
    y = one_hot(labels, n_out)
    errors = int((out64.argmax(axis=1) != labels).sum())
    metrics = BatchMetrics(errors, cost(out64, y), len(labels))
    if config.rule == "tbp":
        wide = params.astype(np.promote_types(params.dtype, np.float32))
        grad = tbp_gradient(wide, x, y, config.T, config.K, scheme, free=_widen(free, wide.dtype))
        return -grad, metrics
    if config.rule == "rbp":
        wide = params.astype(np.promote_types(params.dtype, np.float32))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = rbp_gradient(wide, x, y, config.T, config.adjoint_iters, config.adjoint_tol,
                                  free=_widen(free, wide.dtype), scheme=scheme)
        return -result.gradient, metrics
    update = compute_update(config.update_rule(), params, x, y.astype(free.output.dtype), free)
    return update, metrics


def _widen(state: NetworkState, dtype) -> NetworkState:
    return NetworkState([s.astype(dtype) for s in state.layers], state.clamped)


def _chunks(n: int, workers: int) -> list:
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def train_step(params: Parameters, opt: OptimizerState, x: np.ndarray, labels: np.ndarray,
               config: TrainConfig, lrs=None, pool: Optional[ThreadPoolExecutor] = None):
    """One mini-batch: free phase, perturbed phase(s), one optimizer step.

    ``params`` are the master parameters. With a thread ``pool`` the batch
    is split into contiguous chunks whose updates are summed in order.
    """
    lrs = config.lrs if lrs is None else lrs
    labels = np.asarray(labels)
    compute = _compute_params(params, config)
    x = np.asarray(x, dtype=config.storage_dtype)
    if pool is None or config.workers == 1:
        parts = [batch_update(compute, x, labels, config)]
    else:
        parts = list(pool.map(lambda s: batch_update(compute, x[s], labels[s], config),
                              _chunks(len(labels), config.workers)))
    update = parts[0][0].astype(params.dtype)
    for u, _ in parts[1:]:
        update = update + u.astype(params.dtype)
    metrics = BatchMetrics(sum(m.errors for _, m in parts), sum(m.cost for _, m in parts),
                           len(labels))
    params, opt = sgd_step(params, update, opt, lrs, config.momentum, config.weight_decay,
                           len(labels))
    return params, opt, metrics


def evaluate(params: Parameters, images: np.ndarray, labels: np.ndarray, T: int = 60,
             scheme=Scheme.ASYNC, batch_size: int = 256,
             transform: Optional[Callable] = None, dtype=None):
    """Error rate (percent) and mean cost of the argmax of the free output.

    ``transform`` maps a raw image batch to network inputs (identity when
    ``None``). Ties between output units go to the lowest class index.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    dtype = np.dtype(dtype or params.dtype)
    compute = params if params.dtype == dtype else params.astype(dtype)
    errors, total_cost = 0, 0.0
    for start in range(0, len(labels), batch_size):
        x = images[start:start + batch_size]
        x = transform(x) if transform is not None else x
        lab = labels[start:start + batch_size]
        free = relax(compute, initial_state(compute, np.asarray(x, dtype=dtype)),
                     PhaseSpec.free(T, scheme)).state
        out = free.output.astype(np.float64)
        errors += int((out.argmax(axis=1) != lab).sum())
        total_cost += cost(out, one_hot(lab, out.shape[1]))
    return 100.0 * errors / len(labels), total_cost / len(labels)


class MetricsLog:
    """Append-only CSV of ``epoch, split, error, cost, seconds`` rows."""

    HEADER = ["epoch", "split", "error", "cost", "seconds"]

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def write(self, epoch: int, split: str, error: float, cost_value: float, seconds: float):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([epoch, split, f"{error:.4f}", f"{cost_value:.6g}",
                                     f"{seconds:.3f}"])


def transform_for(dataset: str, dtype) -> Callable:
    norm = NORMALIZATION[dataset]
    pad = DATASETS[dataset][2]
    return lambda raw: preprocess(raw, norm, pad_to_32=pad, dtype=dtype)


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


def fit(config: TrainConfig, train: Dataset, test: Optional[Dataset] = None,
        out_dir=None, resume=None, progress: Optional[Callable] = None):
    """Train from scratch (or from a checkpoint) and return ``(params, history)``.

    With ``out_dir`` the metrics log ``metrics.csv`` and the checkpoint
    ``checkpoint.ebl`` (rewritten after every epoch) are written there.
    ``resume`` is a checkpoint path or :class:`Checkpoint`.
    """
    arch = config.architecture()
    if train.images.shape[1] != arch.in_channels:
        raise ShapeError(f"{config.dataset} expects {arch.in_channels} channels, "
                         f"data has {train.images.shape[1]}")
    transform = transform_for(config.dataset, config.storage_dtype)
    flip = DATASETS[config.dataset][3]
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, arch)
        params = ckpt.params.astype(config.master_dtype)
        velocity = ckpt.velocity if ckpt.velocity is not None else params.zeros_like()
        opt = OptimizerState(velocity.astype(config.master_dtype), ckpt.step)
        start = ckpt.epoch
    else:
        params = init_params(arch, config.gains, config.seed, config.master_dtype)
        opt = OptimizerState.zeros(params)
        start = 0
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_dir / "metrics.csv")
    history = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(start, config.epochs):
            tic = time.perf_counter()
            lrs = [cosine_lr(epoch, lr, config.lr_min, config.t_max) for lr in config.lrs]
            flip_rng = np.random.default_rng(_epoch_seed(config.seed, epoch, 1))
            errors, total_cost, seen = 0, 0.0, 0
            for raw, labels in batches(train, config.batch_size, _epoch_seed(config.seed, epoch, 0)):
                x = transform(raw)
                if flip:
                    x = augment_flip(x, flip_rng)
                params, opt, m = train_step(params, opt, x, labels, config, lrs, pool)
                errors, total_cost, seen = errors + m.errors, total_cost + m.cost, seen + m.size
                if progress is not None:
                    progress(epoch, seen, len(train))
            test_error = test_cost = None
            if test is not None:
                test_error, test_cost = evaluate(params, test.images, test.labels, config.T,
                                                 Scheme(config.scheme), transform=transform,
                                                 dtype=config.storage_dtype)
            seconds = time.perf_counter() - tic
            metrics = EpochMetrics(epoch + 1, 100.0 * errors / seen, total_cost / seen,
                                   test_error, test_cost, seconds)
            history.append(metrics)
            if log is not None:
                log.write(epoch + 1, "train", metrics.train_error, metrics.train_cost, seconds)
                if test is not None:
                    log.write(epoch + 1, "test", test_error, test_cost, seconds)
                save_checkpoint(out_dir / "checkpoint.ebl",
                                Checkpoint(arch, params, opt.velocity, opt.step, epoch + 1,
                                           config.to_dict()))
    finally:
        if pool is not None:
            pool.shutdown()
    return params, history
