import math
import unittest

import numpy as np

from tagstrain import geometry
from tagstrain.errors import DomainError, ShapeError
from tagstrain.geometry import AnnulusSpec, BoundingBox, Point2


class BuildGridTests(unittest.TestCase):
    def test_spoke_zero_sits_on_contours(self):
        grid = geometry.build_grid(AnnulusSpec(center=Point2(128, 128), r_endo=20, r_epi=32))
        endo = grid.point(0, 0)
        epi = grid.point(6, 0)
        self.assertAlmostEqual(endo.x, 108.0, places=9)
        self.assertAlmostEqual(endo.y, 128.0, places=9)
        self.assertAlmostEqual(epi.x, 96.0, places=9)
        self.assertAlmostEqual(epi.y, 128.0, places=9)

    def test_quarter_turn_midwall(self):
        spec = AnnulusSpec(center=Point2(0, 0), r_endo=20, r_epi=32, theta_start=0.0)
        p = geometry.build_grid(spec).point(3, 6)
        self.assertAlmostEqual(p.x, 0.0, places=9)
        self.assertAlmostEqual(p.y, 26.0, places=9)

    def test_degenerate_wall_rejected(self):
        with self.assertRaises(DomainError):
            AnnulusSpec(r_endo=20, r_epi=20)

    def test_ring_gaps_are_equal(self):
        spec = AnnulusSpec(r_endo=17.5, r_epi=29.0, theta_start=1.0, orientation=-1)
        grid = geometry.build_grid(spec)
        center = np.array(spec.center)
        for spoke in range(geometry.SPOKES):
            radii = np.linalg.norm(grid.spoke(spoke) - center, axis=1)
            np.testing.assert_allclose(np.diff(radii), (29.0 - 17.5) / 6, atol=1e-9)

    def test_index_layout(self):
        self.assertEqual(geometry.index(2, 5), 53)
        with self.assertRaises(DomainError):
            geometry.index(7, 0)

    def test_grid_is_read_only(self):
        grid = geometry.build_grid(AnnulusSpec())
        with self.assertRaises(ValueError):
            grid.points[0, 0] = 1.0

    def test_grid_shape_checked(self):
        with self.assertRaises(ShapeError):
            geometry.LandmarkGrid(np.zeros((10, 2)))
        with self.assertRaises(DomainError):
            geometry.LandmarkSequence(np.zeros((1, 168, 2)))


class BoxTests(unittest.TestCase):
    def test_iou_examples(self):
        self.assertEqual(geometry.iou(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10)), 1.0)
        self.assertEqual(geometry.iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)), 0.0)
        self.assertAlmostEqual(geometry.iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)), 1 / 7)

    def test_iou_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a_lo, b_lo = rng.uniform(0, 100, 2), rng.uniform(0, 100, 2)
            a = BoundingBox(*a_lo, *(a_lo + rng.uniform(1, 50, 2)))
            b = BoundingBox(*b_lo, *(b_lo + rng.uniform(1, 50, 2)))
            v = geometry.iou(a, b)
            self.assertAlmostEqual(v, geometry.iou(b, a), places=12)
            self.assertGreaterEqual(v, 0.0)
            self.assertLessEqual(v, 1.0)

    def test_zero_extent_box_rejected(self):
        with self.assertRaises(DomainError):
            BoundingBox(5, 5, 5, 10)
        with self.assertRaises(DomainError):
            BoundingBox(0, 0, math.nan, 1)

    def test_expand_examples(self):
        expanded = geometry.expand_box(BoundingBox(50, 50, 150, 150), 0.6, 256, 256)
        self.assertEqual(expanded.as_list(), [20.0, 20.0, 180.0, 180.0])
        clamped = geometry.expand_box(BoundingBox(0, 0, 100, 100), 0.6, 256, 256)
        self.assertEqual(clamped.as_list(), [0.0, 0.0, 130.0, 130.0])
        box = BoundingBox(3.5, 4.25, 90, 100)
        self.assertEqual(geometry.expand_box(box, 0.0, 256, 256), box)

    def test_expand_preserves_center_and_scales_area(self):
        box = BoundingBox(80, 90, 120, 150)
        out = geometry.expand_box(box, 0.35, 1000, 1000)
        self.assertAlmostEqual(out.center.x, box.center.x, places=9)
        self.assertAlmostEqual(out.center.y, box.center.y, places=9)
        self.assertAlmostEqual(out.area / box.area, 1.35 ** 2, places=9)

    def test_negative_fraction_rejected(self):
        with self.assertRaises(DomainError):
            geometry.expand_box(BoundingBox(0, 0, 1, 1), -0.1, 10, 10)

    def test_landmarks_bbox(self):
        grid = geometry.build_grid(AnnulusSpec(r_endo=20, r_epi=30, theta_start=0.0))
        box = geometry.landmarks_bbox(grid)
        np.testing.assert_allclose(box.as_list(), [98, 98, 158, 158], atol=1e-9)
        moved = geometry.LandmarkGrid(geometry.translate_points(grid.points, 10, 0))
        np.testing.assert_allclose(geometry.landmarks_bbox(moved).as_list(), [108, 98, 168, 158], atol=1e-9)

    def test_landmarks_bbox_of_single_point_is_degenerate(self):
        grid = geometry.LandmarkGrid(np.full((168, 2), 40.0))
        with self.assertRaises(DomainError):
            geometry.landmarks_bbox(grid)


class MapCoordsTests(unittest.TestCase):
    def test_inverse_example(self):
        p = geometry.map_coords(Point2(64, 64), BoundingBox(20, 20, 180, 180), 128, 128, geometry.INVERSE)
        self.assertAlmostEqual(p.x, 100.0)
        self.assertAlmostEqual(p.y, 100.0)

    def test_box_corner_maps_to_origin(self):
        box = BoundingBox(12.5, 30, 99, 140)
        p = geometry.map_coords(Point2(12.5, 30), box, 64, 64)
        self.assertEqual((p.x, p.y), (0.0, 0.0))

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            lo = rng.uniform(-50, 200, 2)
            box = BoundingBox(*lo, *(lo + rng.uniform(1, 150, 2)))
            pts = rng.uniform(-100, 400, (1, 2))
            fwd = geometry.map_points(pts, box, 128, 96, geometry.FORWARD)
            back = geometry.map_points(fwd, box, 128, 96, geometry.INVERSE)
            np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_unknown_direction(self):
        with self.assertRaises(DomainError):
            geometry.map_points(np.zeros(2), BoundingBox(0, 0, 1, 1), 4, 4, "sideways")


if __name__ == "__main__":
    unittest.main()
