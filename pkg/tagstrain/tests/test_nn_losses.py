import math
import unittest

import numpy as np

from tagstrain import geometry, phantom
from tagstrain.errors import DegenerateGeometryError, DomainError, ShapeError
from tagstrain.nn import losses
from tagstrain.nn.engine import Tensor, check_gradients


def _truth(frames=4):
    spec = phantom.PhantomSpec(frames=frames, es_frame=2)
    return phantom.truth_points(spec)


class BoxLossTests(unittest.TestCase):
    def test_examples(self):
        truth = np.array([10.0, 20.0, 30.0, 40.0])
        self.assertEqual(losses.bbox_mse_loss(Tensor(truth), truth).item(), 0.0)
        self.assertEqual(losses.bbox_mse_loss(Tensor(truth + 1.0), truth).item(), 1.0)
        self.assertEqual(losses.bbox_mse_loss(Tensor(truth + np.array([2.0, 0, 0, 0])), truth).item(), 1.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            losses.bbox_mse_loss(Tensor(np.zeros(3)), np.zeros(3))

    def test_gradient(self):
        truth = np.random.default_rng(0).normal(size=(3, 4))
        pred = np.random.default_rng(1).normal(size=(3, 4))
        self.assertLess(check_gradients(lambda p: losses.bbox_mse_loss(p, truth), [pred]), 1e-6)


class CompositeLossTests(unittest.TestCase):
    def test_perfect_prediction(self):
        truth = _truth()
        out = losses.composite_tracking_loss(Tensor(truth), truth)
        self.assertAlmostEqual(out.total.item(), 0.0, places=12)

    def test_rigid_shift(self):
        truth = _truth()
        out = losses.composite_tracking_loss(Tensor(truth + np.array([3.0, 4.0])), truth)
        self.assertAlmostEqual(out.total.item(), 25.0, places=9)
        self.assertAlmostEqual(out.mse_position, 25.0, places=9)
        self.assertLess(out.radial_term, 1e-9)
        self.assertLess(out.circ_term, 1e-9)

    def test_rotation_only_changes_position_term(self):
        truth = _truth()
        noisy = truth + np.random.default_rng(2).normal(0, 0.3, truth.shape)
        base = losses.composite_tracking_loss(Tensor(noisy), truth)
        rotated = geometry.rotate_points(noisy, 0.4, geometry.Point2(100.0, 140.0))
        moved = losses.composite_tracking_loss(Tensor(rotated), truth)
        self.assertAlmostEqual(moved.radial_term, base.radial_term, places=9)
        self.assertAlmostEqual(moved.circ_term, base.circ_term, places=9)
        self.assertNotAlmostEqual(moved.mse_position, base.mse_position, places=3)

    def test_omega_zero_is_masked_mse(self):
        truth = _truth()
        noisy = truth + np.random.default_rng(3).normal(0, 0.5, truth.shape)
        mask = np.array([1.0, 1.0, 1.0, 0.0])
        out = losses.composite_tracking_loss(Tensor(noisy), truth, omega=0.0, frame_mask=mask)
        per_frame = ((noisy - truth) ** 2).sum(axis=(1, 2)) / 168
        self.assertAlmostEqual(out.total.item(), per_frame[:3].mean(), places=9)

    def test_frame_zero_cannot_be_masked(self):
        truth = _truth()
        with self.assertRaises(DomainError):
            losses.composite_tracking_loss(Tensor(truth), truth, frame_mask=np.array([0.0, 1, 1, 1]))

    def test_batched_breakdown(self):
        truth = np.stack([_truth(), _truth()])
        pred = truth + np.random.default_rng(4).normal(0, 0.2, truth.shape)
        out = losses.composite_tracking_loss(Tensor(pred), truth, omega=1.0)
        self.assertEqual(out.per_frame.shape, (4,))
        self.assertAlmostEqual(
            out.total.item(), out.mse_position + out.radial_term + out.circ_term, places=9
        )

    def test_gradient(self):
        truth = _truth(frames=3)
        pred = truth + np.random.default_rng(5).normal(0, 0.5, truth.shape)
        err = check_gradients(lambda p: losses.composite_tracking_loss(p, truth, omega=2.0).total, [pred])
        self.assertLess(err, 1e-4)

    def test_degenerate_prediction(self):
        truth = _truth()
        pred = np.array(truth)
        pred[0] = 0.0
        with self.assertRaises(DegenerateGeometryError) as ctx:
            losses.composite_tracking_loss(Tensor(pred), truth)
        self.assertIn("reference frame", str(ctx.exception))

    def test_shape_mismatch(self):
        truth = _truth()
        with self.assertRaises(ShapeError):
            losses.composite_tracking_loss(Tensor(truth[:, :100]), truth[:, :100])
        self.assertTrue(math.isfinite(losses.composite_tracking_loss(Tensor(truth), truth).total.item()))


if __name__ == "__main__":
    unittest.main()
