import math

import numpy as np
import pytest

from mixres.errors import ConfigError
from mixres.optim import SGD, CosineSchedule, SgdConfig, cosine_lr, sgd_step
from mixres.tensor import Tensor


def param(values):
    p = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True)
    return p


class TestSgd:
    def test_vanilla_step(self):
        p = param([1.0])
        p.grad = np.array([2.0], dtype=np.float32)
        sgd_step([p], [np.zeros(1, dtype=np.float32)], SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.8, abs=1e-7)

    def test_zero_lr_leaves_params(self):
        p = param([1.0, -2.0])
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        before = p.data.copy()
        sgd_step([p], [np.zeros(2, dtype=np.float32)],
                 SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0), lr=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_momentum_hand_iteration(self):
        # m=0.9, wd=0, g=1, lr=1, w0=0: w after two steps = -(1) - (1.9) = -2.9
        p = param([0.0])
        v = [np.zeros(1, dtype=np.float32)]
        cfg = SgdConfig(lr=1.0, momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([1.0], dtype=np.float32)
            sgd_step([p], v, cfg)
        assert p.data[0] == pytest.approx(-2.9, abs=1e-6)

    def test_weight_decay_couples_into_gradient(self):
        p = param([2.0])
        p.grad = np.array([0.0], dtype=np.float32)
        sgd_step([p], [np.zeros(1, dtype=np.float32)],
                 SgdConfig(lr=0.5, momentum=0.0, weight_decay=0.1))
        # v = g + wd*w = 0.2; w' = 2 - 0.5*0.2
        assert p.data[0] == pytest.approx(1.9, abs=1e-6)

    def test_zero_grad_zero_state_is_noop(self):
        p = param([1.25, -0.5])
        p.grad = np.zeros(2, dtype=np.float32)
        before = p.data.copy()
        sgd_step([p], [np.zeros(2, dtype=np.float32)],
                 SgdConfig(lr=0.3, momentum=0.5, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_is_usage_error(self):
        p = param([1.0])
        opt = SGD([p], SgdConfig())
        with pytest.raises(ValueError, match="no gradient"):
            opt.step()

    def test_descent_on_quadratic(self):
        # loss = w^2: a small step must reduce it
        p = param([1.0])
        opt = SGD([p], SgdConfig(lr=1e-3, momentum=0.0, weight_decay=0.0))
        loss_before = float(p.data[0] ** 2)
        p.grad = 2.0 * p.data
        opt.step()
        assert float(p.data[0] ** 2) < loss_before

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SgdConfig(lr=0.0)
        with pytest.raises(ConfigError):
            SgdConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            SgdConfig(weight_decay=-1e-4)


class TestCosine:
    def test_table_values(self):
        sched = CosineSchedule(eta_max=0.05, t_max=200)
        assert cosine_lr(sched, 0) == pytest.approx(0.05, abs=1e-12)
        assert cosine_lr(sched, 100) == pytest.approx(0.025, abs=1e-12)
        assert cosine_lr(sched, 200) == pytest.approx(0.0, abs=1e-12)

    def test_ends_at_eta_min(self):
        sched = CosineSchedule(eta_max=0.1, t_max=50, eta_min=0.01)
        assert cosine_lr(sched, 50) == pytest.approx(0.01, abs=1e-12)

    def test_monotone_non_increasing(self):
        sched = CosineSchedule(eta_max=0.05, t_max=200)
        values = [cosine_lr(sched, t) for t in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_closed_form_everywhere(self):
        sched = CosineSchedule(eta_max=0.05, t_max=200)
        for t in range(201):
            expected = 0.5 * 0.05 * (1.0 + math.cos(math.pi * t / 200))
            assert abs(cosine_lr(sched, t) - expected) < 1e-12

    def test_out_of_range(self):
        sched = CosineSchedule(eta_max=0.05, t_max=10)
        with pytest.raises(ValueError):
            cosine_lr(sched, 11)
        with pytest.raises(ValueError):
            cosine_lr(sched, -1)

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            CosineSchedule(eta_max=0.01, t_max=10, eta_min=0.05)
        with pytest.raises(ConfigError):
            CosineSchedule(eta_max=0.05, t_max=0)
