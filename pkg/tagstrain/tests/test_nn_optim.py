import math
import unittest

import numpy as np

from tagstrain.errors import DomainError
from tagstrain.nn import optim
from tagstrain.nn.engine import Tensor
from tagstrain.nn.optim import Adam, StepSchedule


class StepScheduleTests(unittest.TestCase):
    def test_localizer_schedule(self):
        s = optim.LOCALIZER_SCHEDULE
        self.assertEqual(s.lr(0), 1e-3)
        self.assertEqual(s.lr(10), 1e-3)
        self.assertEqual(s.lr(14), 1e-3)
        self.assertAlmostEqual(s.lr(15), 1e-3 / math.sqrt(2), places=15)
        self.assertAlmostEqual(s.lr(20), 5e-4, places=15)

    def test_tracker_schedule(self):
        s = optim.TRACKER_SCHEDULE
        self.assertEqual(s.lr(9), 1e-4)
        self.assertAlmostEqual(s.lr(10), 1e-4 / math.sqrt(2), places=15)
        self.assertAlmostEqual(s.lr(25), 5e-5, places=15)

    def test_validation(self):
        with self.assertRaises(DomainError):
            StepSchedule(base_lr=0.0)
        with self.assertRaises(DomainError):
            StepSchedule(period_epochs=0)
        with self.assertRaises(DomainError):
            StepSchedule(decay_factor=1.5)


class AdamTests(unittest.TestCase):
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = Adam([p], StepSchedule())
        p.grad = np.zeros(3)
        opt.step(0)
        np.testing.assert_allclose(p.data, [1.0, -2.0, 3.0], atol=1e-12)

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.5, 0.5]), requires_grad=True)
        opt = Adam([p], StepSchedule(base_lr=0.01))
        p.grad = np.array([4.0, -0.1])
        lr = opt.step(0)
        self.assertEqual(lr, 0.01)
        np.testing.assert_allclose(p.data, [0.49, 0.51], atol=1e-8)
        self.assertEqual(opt.state_dict()["step"], 1)

    def test_minimizes_quadratic(self):
        target = np.array([1.5, -0.5, 2.0])
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([p], StepSchedule(base_lr=0.02, period_epochs=1000, start_epoch=0))
        for _ in range(1000):
            opt.zero_grad()
            diff = p - Tensor(target)
            (diff * diff).sum().backward()
            opt.step(0)
        np.testing.assert_allclose(p.data, target, atol=5e-2)

    def test_state_dict_records_schedule(self):
        opt = Adam([], optim.TRACKER_SCHEDULE)
        state = opt.state_dict()
        self.assertEqual(state["schedule"]["period_epochs"], 10)
        self.assertEqual(state["schedule"]["base_lr"], 1e-4)
        self.assertEqual(state["beta2"], 0.999)


if __name__ == "__main__":
    unittest.main()
