import math

import numpy as np
import pytest

import eblearn.rules as rules_module
import eblearn.training as training_module
from eblearn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from eblearn.datasets import Dataset
from eblearn.exceptions import FormatError, ShapeError
from eblearn.model import Architecture, Parameters, cost, one_hot
from eblearn.relaxation import PhaseSpec, initial_state, relax
from eblearn.training import (
    MetricsLog,
    OptimizerState,
    TrainConfig,
    cosine_lr,
    evaluate,
    fit,
    init_params,
    sgd_step,
    train_step,
)
from nets import TINY, random_input, random_params

SMALL = dict(channels=(4,), lrs=(0.05, 0.02), gains=(0.5, 0.5), T=20, K=6, batch_size=8,
             epochs=1, t_max=10)


def toy_mnist(rng, n=24):
    """28x28 digits-shaped data whose class sets a bright row."""
    labels = np.arange(n) % 10
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        images[i, 2 + 2 * c] = 255
    return Dataset(images, labels, "mnist")


def ones_like(params, value=1.0):
    return params.map(lambda a: np.full_like(a, value))


class TestConfig:
    def test_defaults_are_comparative_column(self):
        c = TrainConfig()
        assert (c.beta, c.T, c.K) == (0.25, 60, 15)
        assert c.lrs == (0.0625, 0.0375, 0.025, 0.02, 0.0125)
        assert (c.momentum, c.weight_decay, c.batch_size, c.epochs) == (0.9, 3e-4, 128, 100)
        assert (c.t_max, c.lr_min) == (100, 2e-6)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("bad", [dict(rule="sgd"), dict(T=0), dict(epochs=0), dict(lrs=(1.0,)),
                                     dict(lrs=(-1, 1, 1, 1, 1)), dict(precision="f8"),
                                     dict(rule="p-ep", beta=-0.1), dict(dataset="imagenet")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_roundtrip(self):
        c = TrainConfig(rule="n-ep", **SMALL)
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestInit:
    def test_zero_gain(self):
        params = init_params(Architecture.full(), (0, 0, 0, 0, 0), seed=0)
        assert all(not a.any() for a in params.arrays())

    def test_bounds(self):
        arch = Architecture.full()
        params = init_params(arch, (0.5,) * 5, seed=1)
        bound = 0.5 / math.sqrt(128 * 9)
        w2 = params.weights[1]
        assert np.abs(w2).max() <= bound
        assert np.abs(w2).max() > 0.99 * bound
        assert abs(w2.mean()) < 0.01 * bound
        assert np.abs(params.weights[4]).max() <= 0.5 / math.sqrt(512 * 4)
        assert all(not b.any() for b in params.biases)

    def test_seeded(self):
        a = init_params(TINY, (1, 1), 3)
        b = init_params(TINY, (1, 1), 3)
        assert a.max_abs_diff(b) == 0.0


class TestSgd:
    def test_plain(self, rng):
        params = random_params(rng, TINY)
        upd = ones_like(params, -2.0)  # descent direction; g = 2 / batch
        new, opt = sgd_step(params, upd, OptimizerState.zeros(params), (0.1, 0.3), 0.0, 0.0, 4)
        np.testing.assert_allclose(new.weights[0], params.weights[0] - 0.1 * 0.5)
        np.testing.assert_allclose(new.biases[1], params.biases[1] - 0.3 * 0.5)
        assert opt.step == 1

    def test_zero_gradient_velocity_decays(self, rng):
        params = random_params(rng, TINY)
        opt = OptimizerState(ones_like(params), 0)
        new, opt2 = sgd_step(params, params.zeros_like(), opt, (0.0, 0.0), 0.5, 0.0, 1)
        assert new.max_abs_diff(params) == 0.0
        assert np.all(opt2.velocity.weights[0] == 0.5)

    def test_momentum_two_steps(self, rng):
        params = random_params(rng, TINY)
        upd = ones_like(params, -1.0)
        opt = OptimizerState.zeros(params)
        p1, opt = sgd_step(params, upd, opt, (0.1, 0.1), 0.9, 0.0, 1)
        p2, opt = sgd_step(p1, upd, opt, (0.1, 0.1), 0.9, 0.0, 1)
        np.testing.assert_allclose(p2.weights[0], params.weights[0] - 0.1 * (1 + 1.9))

    def test_weight_decay(self, rng):
        params = random_params(rng, TINY)
        new, _ = sgd_step(params, params.zeros_like(), OptimizerState.zeros(params), (1.0, 1.0),
                          0.0, 0.1, 1)
        np.testing.assert_allclose(new.weights[0], 0.9 * params.weights[0])

    def test_shape_mismatch(self, rng):
        params = random_params(rng, TINY)
        with pytest.raises(ShapeError):
            sgd_step(params, params, OptimizerState.zeros(params), (1.0,), 0.0, 0.0, 1)


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 0.1, 1e-3, 100) == pytest.approx(0.1)
        assert cosine_lr(100, 0.1, 1e-3, 100) == 1e-3
        assert cosine_lr(50, 0.1, 1e-3, 100) == pytest.approx((0.1 + 1e-3) / 2)

    def test_clamped(self):
        assert cosine_lr(150, 0.1, 1e-3, 100) == 1e-3

    def test_monotone(self):
        values = [cosine_lr(t, 1.0, 0.0, 20) for t in range(21)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestTrainStep:
    def config(self, **kw):
        return TrainConfig(**{**SMALL, "dataset": "mnist", "precision": "f64", **kw})

    def data(self, rng, n=4):
        arch = self.config().architecture()
        return rng.normal(size=(n, 1, 32, 32)), np.arange(n) % 10, arch

    def test_c_ep_zero_init_moves_output_bias_only(self, rng):
        config = self.config(rule="c-ep", weight_decay=0.0, momentum=0.0)
        x, labels, arch = self.data(rng)
        params = Parameters.zeros(arch)
        new, _, m = train_step(params, OptimizerState.zeros(params), x, labels, config)
        assert new.biases[-1].any()
        assert all(not a.any() for a in new.weights + new.biases[:-1])
        # the bias moves toward the mean one-hot target of the batch
        target = one_hot(labels, 10).mean(axis=0)
        assert np.corrcoef(new.biases[-1], target)[0, 1] > 0.99
        assert m.errors == 4 - int((labels == 0).sum())

    def test_zero_rates(self, rng):
        config = self.config(lrs=(0.0, 0.0))
        x, labels, arch = self.data(rng)
        params = init_params(arch, config.gains, 0, np.float64)
        new, _, m = train_step(params, OptimizerState.zeros(params), x, labels, config)
        assert new.max_abs_diff(params) == 0.0
        assert m.size == 4 and m.cost > 0

    @pytest.mark.parametrize("rule,phases", [("cl", 1), ("p-ep", 1), ("n-cpl", 1), ("c-ep", 2),
                                             ("c-cpl", 2)])
    def test_relaxation_and_optimizer_counts(self, rng, monkeypatch, rule, phases):
        config = self.config(rule=rule)
        x, labels, arch = self.data(rng)
        params = init_params(arch, config.gains, 0, np.float64)
        free_calls, perturbed_calls, steps = [], [], []
        real_relax, real_step = training_module.relax, training_module.sgd_step
        real_rule_relax = rules_module.relax
        monkeypatch.setattr(training_module, "relax",
                            lambda *a, **k: free_calls.append(1) or real_relax(*a, **k))
        monkeypatch.setattr(rules_module, "relax",
                            lambda *a, **k: perturbed_calls.append(1) or real_rule_relax(*a, **k))
        monkeypatch.setattr(training_module, "sgd_step",
                            lambda *a, **k: steps.append(1) or real_step(*a, **k))
        train_step(params, OptimizerState.zeros(params), x, labels, config)
        assert (len(free_calls), len(perturbed_calls), len(steps)) == (1, phases, 1)

    @pytest.mark.parametrize("rule", ["tbp", "rbp"])
    def test_baselines_descend(self, rng, rule):
        config = self.config(rule=rule, lrs=(1e-3, 1e-3), momentum=0.0, weight_decay=0.0, T=80, K=20)
        x, labels, arch = self.data(rng, 2)
        params = init_params(arch, (1.0, 1.0), 0, np.float64)
        before = self._cost(params, x, labels, config)
        new, _, _ = train_step(params, OptimizerState.zeros(params), x, labels, config)
        assert self._cost(new, x, labels, config) < before

    def _cost(self, params, x, labels, config):
        free = relax(params, initial_state(params, x), PhaseSpec.free(config.T)).state
        return cost(free.output, one_hot(labels, 10))

    def test_c_ep_decreases_batch_cost(self, rng):
        config = self.config(rule="c-ep", lrs=(1e-3, 1e-3), momentum=0.0, weight_decay=0.0,
                             T=200, K=30)
        x, labels, arch = self.data(rng, 4)
        params = init_params(arch, (0.5, 0.5), 0, np.float64)
        opt = OptimizerState.zeros(params)
        costs = [self._cost(params, x, labels, config)]
        for _ in range(20):
            params, opt, _ = train_step(params, opt, x, labels, config)
            costs.append(self._cost(params, x, labels, config))
        assert all(b < a for a, b in zip(costs, costs[1:]))

    def test_deterministic(self, rng):
        config = self.config(rule="n-ep", precision="f32")
        x, labels, arch = self.data(rng)
        runs = []
        for _ in range(2):
            params = init_params(arch, config.gains, 7)
            opt = OptimizerState.zeros(params)
            for _ in range(2):
                params, opt, _ = train_step(params, opt, x, labels, config)
            runs.append(params.flatten().tobytes())
        assert runs[0] == runs[1]

    def test_workers_match_single(self, rng):
        x, labels, arch = self.data(rng, 6)
        params = init_params(arch, (0.5, 0.5), 1, np.float64)
        outs = []
        for workers in (1, 3):
            config = self.config(workers=workers)
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(workers) as pool:
                new, _, _ = train_step(params, OptimizerState.zeros(params), x, labels, config,
                                       pool=pool)
            outs.append(new)
        assert outs[0].max_abs_diff(outs[1]) <= 1e-12

    def test_float16_storage(self, rng):
        config = self.config(precision="f16")
        x, labels, arch = self.data(rng)
        params = init_params(arch, config.gains, 0)
        new, _, _ = train_step(params, OptimizerState.zeros(params), x, labels, config)
        assert new.dtype == np.float32
        assert np.isfinite(new.flatten()).all()


class TestEvaluate:
    def test_zero_parameters_predict_class_zero(self, rng):
        arch = Architecture(1, 8, (2,), 10)
        labels = np.arange(50) % 10
        error, c = evaluate(Parameters.zeros(arch), rng.normal(size=(50, 1, 8, 8)), labels, T=5,
                            batch_size=16)
        assert error == pytest.approx(90.0)
        assert c == pytest.approx(1.0)

    def test_shift_invariance(self, rng):
        params = random_params(rng, TINY)
        x, labels = random_input(rng, TINY, batch=20), rng.integers(0, 10, 20)
        shifted = params.copy()
        shifted.biases[-1] += 3.0
        assert evaluate(params, x, labels, T=30)[0] == evaluate(shifted, x, labels, T=30)[0]

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(Parameters.zeros(TINY), np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        params = random_params(rng, TINY).astype(np.float32)
        ckpt = Checkpoint(TINY, params, params.scale(0.5), 3, 2, {"rule": "c-ep"}, {"note": 1})
        save_checkpoint(tmp_path / "a.ebl", ckpt)
        back = load_checkpoint(tmp_path / "a.ebl", TINY)
        for a, b in zip(params.arrays() + ckpt.velocity.arrays(),
                        back.params.arrays() + back.velocity.arrays()):
            assert a.tobytes() == b.tobytes() and a.dtype == b.dtype
        assert (back.step, back.epoch, back.config, back.extra) == (3, 2, {"rule": "c-ep"}, {"note": 1})
        save_checkpoint(tmp_path / "b.ebl", back)
        assert (tmp_path / "a.ebl").read_bytes() == (tmp_path / "b.ebl").read_bytes()

    def test_wrong_architecture(self, tmp_path, rng):
        save_checkpoint(tmp_path / "a.ebl", Checkpoint(TINY, random_params(rng, TINY)))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.ebl", Architecture(1, 8, (5,), 10))

    @pytest.mark.parametrize("where", [20, -10, -1])
    def test_corruption(self, tmp_path, rng, where):
        save_checkpoint(tmp_path / "a.ebl", Checkpoint(TINY, random_params(rng, TINY)))
        data = bytearray((tmp_path / "a.ebl").read_bytes())
        data[where] ^= 0xFF
        (tmp_path / "a.ebl").write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "a.ebl")

    def test_truncated_and_foreign(self, tmp_path, rng):
        save_checkpoint(tmp_path / "a.ebl", Checkpoint(TINY, random_params(rng, TINY)))
        (tmp_path / "b.ebl").write_bytes((tmp_path / "a.ebl").read_bytes()[:-9])
        (tmp_path / "c.ebl").write_bytes(b"hello world, not a checkpoint")
        for name in ("b.ebl", "c.ebl"):
            with pytest.raises(FormatError):
                load_checkpoint(tmp_path / name)


class TestFit:
    def test_log_checkpoint_and_resume(self, tmp_path, rng):
        train, test = toy_mnist(rng, 24), toy_mnist(rng, 10)
        config = TrainConfig(**{**SMALL, "epochs": 2, "rule": "c-ep"})
        straight, hist = fit(config, train, test, out_dir=tmp_path / "a")
        assert [h.epoch for h in hist] == [1, 2]
        rows = (tmp_path / "a" / "metrics.csv").read_text().strip().splitlines()
        assert rows[0] == "epoch,split,error,cost,seconds" and len(rows) == 5
        assert 0 <= hist[-1].test_error <= 100

        one = TrainConfig(**{**SMALL, "epochs": 1, "rule": "c-ep"})
        fit(one, train, test, out_dir=tmp_path / "b")
        resumed, _ = fit(config, train, test, out_dir=tmp_path / "b",
                         resume=tmp_path / "b" / "checkpoint.ebl")
        assert resumed.max_abs_diff(straight) == 0.0
        a = (tmp_path / "a" / "checkpoint.ebl").read_bytes()
        assert a == (tmp_path / "b" / "checkpoint.ebl").read_bytes()

    def test_channel_mismatch(self, rng):
        data = Dataset(np.zeros((4, 3, 32, 32), dtype=np.uint8), np.zeros(4), "cifar10")
        with pytest.raises(ShapeError):
            fit(TrainConfig(**SMALL), data)

    def test_learns_toy_task(self, rng):
        train = toy_mnist(rng, 60)
        config = TrainConfig(**{**SMALL, "epochs": 6, "batch_size": 10, "lrs": (0.05, 0.02),
                                "rule": "c-ep", "t_max": 6})
        _, hist = fit(config, train, train)
        assert hist[-1].test_error < 50.0


def test_metrics_log_appends(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    log.write(1, "train", 10.0, 0.5, 1.0)
    MetricsLog(tmp_path / "m.csv").write(2, "test", 9.0, 0.4, 1.0)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[2].startswith("2,test")
