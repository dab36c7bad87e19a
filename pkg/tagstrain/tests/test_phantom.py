import math
import tempfile
import unittest
from collections import Counter
from pathlib import Path

import numpy as np

from tagstrain import geometry, phantom, strain
from tagstrain.errors import DomainError
from tagstrain.geometry import AnnulusSpec, Point2
from tagstrain.phantom import DatasetRanges, PhantomSpec, SplitFractions


def _small_spec(**overrides):
    params = dict(
        image_w=48,
        image_h=48,
        frames=5,
        es_frame=2,
        annulus=AnnulusSpec(center=Point2(24.0, 24.0), r_endo=8.0, r_epi=14.0),
        noise_sigma=0.0,
    )
    params.update(overrides)
    return PhantomSpec(**params)


class ActivationTests(unittest.TestCase):
    def test_profile(self):
        spec = PhantomSpec(es_frame=8)
        self.assertEqual(phantom.activation(0, spec), 0.0)
        self.assertAlmostEqual(phantom.activation(8, spec), 1.0)
        self.assertAlmostEqual(phantom.activation(4, spec), 0.5)
        self.assertAlmostEqual(phantom.activation(spec.frames - 1, spec), phantom.RELAXED_ACTIVATION)

    def test_monotone_rise(self):
        spec = PhantomSpec()
        values = [phantom.activation(t, spec) for t in range(spec.es_frame + 1)]
        self.assertTrue(all(b > a for a, b in zip(values, values[1:])))

    def test_out_of_range_frame(self):
        with self.assertRaises(DomainError):
            phantom.activation(20, PhantomSpec())

    def test_spec_validation(self):
        with self.assertRaises(DomainError):
            PhantomSpec(peak_endo_contraction=0.5)
        with self.assertRaises(DomainError):
            PhantomSpec(es_frame=20)
        with self.assertRaises(DomainError):
            PhantomSpec(region="septal")


class DeformTests(unittest.TestCase):
    def test_reference_frame_is_identity(self):
        spec = PhantomSpec()
        pts = np.random.default_rng(0).uniform(0, 256, (50, 2))
        np.testing.assert_array_equal(phantom.deform_points(pts, 0, spec), pts)

    def test_epicardial_radius_at_es(self):
        spec = PhantomSpec(peak_rotation=0.0)
        p = phantom.deform(Point2(158.0, 128.0), spec.es_frame, spec)
        self.assertAlmostEqual(math.hypot(p.x - 128.0, p.y - 128.0), math.sqrt(824), places=9)

    def test_far_field_unchanged(self):
        spec = PhantomSpec()
        p = Point2(128.0 + spec.annulus.r_epi + 20.0, 128.0)
        self.assertEqual(phantom.deform(p, spec.es_frame, spec), p)

    def test_area_between_material_radii_conserved(self):
        spec = PhantomSpec(peak_endo_contraction=0.3, peak_rotation=0.2)
        radii = np.linspace(20.0, 30.0, 11)
        ray = np.stack([128.0 + radii, np.full_like(radii, 128.0)], axis=-1)
        moved = phantom.deform_points(ray, spec.es_frame, spec)
        r = np.hypot(moved[:, 0] - 128.0, moved[:, 1] - 128.0)
        np.testing.assert_allclose(np.diff(r ** 2), np.diff(radii ** 2), rtol=1e-6)

    def test_inverse_round_trip(self):
        spec = PhantomSpec(peak_rotation=0.15)
        rng = np.random.default_rng(4)
        angles = rng.uniform(0, 2 * math.pi, 400)
        radii = rng.uniform(0.5, 45.0, 400)
        pts = np.stack([128 + radii * np.cos(angles), 128 + radii * np.sin(angles)], axis=-1)
        for t in (3, spec.es_frame, spec.frames - 1):
            back = phantom.inverse_deform_points(phantom.deform_points(pts, t, spec), t, spec)
            np.testing.assert_allclose(back, pts, atol=1e-8)


class RenderTests(unittest.TestCase):
    def test_zero_depth_has_no_tags(self):
        spec = _small_spec(tag_depth=0.0)
        image = phantom.render_frame(0, spec)
        levels = {np.float32(v) for v in (spec.blood_level, spec.background_level, spec.outside_level)}
        self.assertTrue(set(np.unique(image)) <= levels)

    def test_pixel_on_tag_line(self):
        spec = _small_spec(tag_spacing_mm=2.5, pixel_spacing_mm=1.0, tag_depth=0.7)
        image = phantom.render_frame(0, spec)
        # pixel (x=7, y=3) lies outside the annulus, x + 0.5 on the third tag line
        expected = spec.outside_level * (1 - 0.7) * (1 - 0.7 * math.cos(math.pi * 3.5 / 2.5) ** 2)
        self.assertAlmostEqual(float(image[3, 7]), expected, places=5)

    def test_same_seed_is_bit_identical(self):
        spec = _small_spec(noise_sigma=0.05, rng_seed=99)
        np.testing.assert_array_equal(phantom.render_frame(3, spec), phantom.render_frame(3, spec))
        other = _small_spec(noise_sigma=0.05, rng_seed=100)
        self.assertFalse(np.array_equal(phantom.render_frame(3, spec), phantom.render_frame(3, other)))

    def test_tags_fade(self):
        spec = PhantomSpec()
        self.assertAlmostEqual(phantom.tag_depth_at(0, spec), spec.tag_depth)
        final = phantom.tag_depth_at(spec.frames - 1, spec) / spec.tag_depth
        self.assertAlmostEqual(final, math.exp(-19 * 41 / 850))
        self.assertGreater(final, 0.35)
        self.assertLess(final, 0.45)


class GenerateCaseTests(unittest.TestCase):
    def test_static_phantom_has_zero_strain(self):
        case = phantom.generate_case(_small_spec(peak_endo_contraction=0.0, peak_rotation=0.0, fade_rate=0.0))
        np.testing.assert_allclose(case.truth_strain.to_array(), 0.0, atol=1e-12)
        np.testing.assert_allclose(case.truth_landmarks.points[-1], case.truth_landmarks.points[0], atol=1e-12)
        np.testing.assert_allclose(case.cine.frames[-1], case.cine.frames[0], atol=1e-6)

    def test_static_phantom_still_fades(self):
        case = phantom.generate_case(_small_spec(peak_endo_contraction=0.0, peak_rotation=0.0))
        self.assertLess(np.ptp(case.cine.frames[-1]), np.ptp(case.cine.frames[0]))

    def test_pure_rotation_has_zero_strain(self):
        case = phantom.generate_case(_small_spec(peak_endo_contraction=0.0, peak_rotation=0.2))
        np.testing.assert_allclose(case.truth_strain.to_array(), 0.0, atol=1e-12)

    def test_contraction_matches_closed_form(self):
        spec = PhantomSpec(noise_sigma=0.0)
        points = phantom.truth_points(spec)
        measured = strain.strain_curve(geometry.LandmarkSequence(points))
        self.assertEqual(measured.es_frame, spec.es_frame)
        self.assertAlmostEqual(measured.at_es.eps_R, 0.0730, places=3)
        self.assertAlmostEqual(measured.at_es.eps_C_midwall, -0.0608, places=3)
        for t in range(spec.frames):
            np.testing.assert_allclose(
                measured.per_frame[t].as_row(), phantom.analytic_strain(spec, t).as_row(), atol=1e-9
            )

    def test_case_shapes(self):
        spec = _small_spec()
        case = phantom.generate_case(spec, "c0")
        self.assertEqual(case.cine.frames.shape, (5, 48, 48))
        self.assertEqual(case.truth_landmarks.n_frames, 5)
        np.testing.assert_allclose(case.truth_bbox.as_list(), [10, 10, 38, 38], atol=1e-9)


class DatasetTests(unittest.TestCase):
    def test_split_counts(self):
        self.assertEqual(SplitFractions().counts(100), (72, 18, 10))
        self.assertEqual(SplitFractions(0.5, 0.5, 0.0).counts(3), (2, 1, 0))
        splits = phantom.assign_splits(100, SplitFractions(), seed=7)
        self.assertEqual(Counter(splits), {"train": 72, "val": 18, "test": 10})
        self.assertEqual(splits, phantom.assign_splits(100, SplitFractions(), seed=7))

    def test_bad_fractions(self):
        with self.assertRaises(DomainError):
            SplitFractions(0.5, 0.5, 0.5)

    def test_zero_ranges_reproduce_base(self):
        base = _small_spec()
        self.assertEqual(phantom.draw_spec(base, DatasetRanges.zero(), seed=7, case_index=0), base)

    def test_case_seeds_follow_index(self):
        base = _small_spec(rng_seed=10)
        specs = [phantom.draw_spec(base, DatasetRanges(), 3, i) for i in range(3)]
        self.assertEqual([s.rng_seed for s in specs], [10, 11, 12])
        self.assertNotEqual(specs[0].annulus, specs[1].annulus)

    def test_dataset_is_deterministic(self):
        base = _small_spec()
        ranges = DatasetRanges(center_x=(-2, 2), center_y=(-2, 2), r_endo=(-1, 1), r_epi=(-1, 1))
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a", Path(tmp) / "b"
            manifest = phantom.generate_dataset(a, 4, base, ranges, seed=7, threads=2)
            phantom.generate_dataset(b, 4, base, ranges, seed=7, threads=1)
            self.assertEqual(len(manifest.cases), 4)
            self.assertEqual((a / "manifest.json").read_bytes(), (b / "manifest.json").read_bytes())
            for case in manifest.cases:
                self.assertEqual((a / case["cine_path"]).read_bytes(), (b / case["cine_path"]).read_bytes())
                self.assertEqual(
                    (a / case["landmarks_path"]).read_bytes(), (b / case["landmarks_path"]).read_bytes()
                )

    def test_rejects_empty_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DomainError):
                phantom.generate_dataset(tmp, 0, _small_spec(), DatasetRanges.zero(), seed=0)


if __name__ == "__main__":
    unittest.main()
