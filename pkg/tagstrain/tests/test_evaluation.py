import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from tagstrain import __version__, evaluation, formats, phantom
from tagstrain.errors import DataError, DomainError
from tagstrain.formats import LandmarkFile
from tagstrain.geometry import BoundingBox, LandmarkSequence
from tagstrain.strain import COMPONENTS

try:
    from scipy import stats as scipy_stats
except ImportError:  # pragma: no cover
    scipy_stats = None


def _t4_two_sided(t):
    # closed form of the df=4 t distribution
    x = t * t
    cdf = 0.5 + 0.375 * (abs(t) / math.sqrt(1.0 + x / 4.0)) * (1.0 - x / (12.0 * (1.0 + x / 4.0)))
    return 2.0 * (1.0 - cdf)


class TDistributionTests(unittest.TestCase):
    def test_incomplete_beta_closed_forms(self):
        for x in (0.1, 0.37, 0.5, 0.9):
            self.assertAlmostEqual(evaluation.betainc_reg(1.0, 1.0, x), x, places=12)
            self.assertAlmostEqual(evaluation.betainc_reg(3.0, 1.0, x), x ** 3, places=12)
        self.assertEqual(evaluation.betainc_reg(2.0, 2.0, 0.0), 0.0)
        self.assertEqual(evaluation.betainc_reg(2.0, 2.0, 1.0), 1.0)
        with self.assertRaises(DomainError):
            evaluation.betainc_reg(0.0, 1.0, 0.5)

    def test_two_sided_p_closed_forms(self):
        for t in (0.0, 0.5, 1.0, 3.0, -7.5):
            cauchy = 1.0 - 2.0 / math.pi * math.atan(abs(t))
            self.assertAlmostEqual(evaluation.t_two_sided_p(t, 1), cauchy, places=10)
            df2 = 1.0 - abs(t) / math.sqrt(t * t + 2.0)
            self.assertAlmostEqual(evaluation.t_two_sided_p(t, 2), df2, places=10)
            self.assertAlmostEqual(evaluation.t_two_sided_p(t, 4), _t4_two_sided(t), places=10)
        self.assertEqual(evaluation.t_two_sided_p(math.inf, 3), 0.0)
        with self.assertRaises(DomainError):
            evaluation.t_two_sided_p(math.nan, 3)

    def test_cdf_and_ppf_invert(self):
        self.assertAlmostEqual(evaluation.t_cdf(0.0, 5), 0.5, places=12)
        for df in (1, 4, 30):
            for q in (0.025, 0.3, 0.975):
                self.assertAlmostEqual(evaluation.t_cdf(evaluation.t_ppf(q, df), df), q, places=9)
        self.assertAlmostEqual(evaluation.t_ppf(0.975, 4), 2.776445, places=5)
        with self.assertRaises(DomainError):
            evaluation.t_ppf(1.0, 4)

    @unittest.skipUnless(scipy_stats is not None, "scipy not installed")
    def test_matches_scipy(self):
        for df in range(1, 201):
            for t in (0.1, 1.0, 2.5, 6.0):
                expected = 2.0 * scipy_stats.t.sf(t, df)
                self.assertAlmostEqual(evaluation.t_two_sided_p(t, df), expected, delta=1e-6, msg=f"df={df} t={t}")
        for df in (2, 7.5, 40):
            self.assertAlmostEqual(evaluation.t_ppf(0.9, df), scipy_stats.t.ppf(0.9, df), places=6)

    def test_bonferroni(self):
        self.assertAlmostEqual(evaluation.bonferroni_threshold(), 0.05 / 15, places=15)
        self.assertAlmostEqual(evaluation.SIGNIFICANCE, 0.0033, places=4)
        with self.assertRaises(DomainError):
            evaluation.bonferroni_threshold(0.05, 0)


class AgreementTests(unittest.TestCase):
    def test_three_pair_example(self):
        result = evaluation.bland_altman([(-0.19, -0.20), (-0.20, -0.18), (-0.21, -0.21)])
        self.assertAlmostEqual(result.bias, -0.003333, delta=1e-6)
        self.assertAlmostEqual(result.precision, 0.015275, delta=1e-6)
        self.assertAlmostEqual(result.loa_low, -0.033272, delta=2e-6)
        self.assertAlmostEqual(result.loa_high, 0.026605, delta=2e-6)
        self.assertAlmostEqual(result.loa_high, result.bias + 1.96 * result.precision, places=12)
        self.assertEqual(result.n, 3)
        np.testing.assert_allclose(result.differences, [0.01, -0.02, 0.0], atol=1e-12)
        np.testing.assert_allclose(result.means, [-0.195, -0.19, -0.21], atol=1e-12)

    def test_equal_pairs(self):
        result = evaluation.bland_altman([(0.1, 0.1), (0.2, 0.2)])
        self.assertEqual((result.bias, result.precision, result.loa_low, result.loa_high), (0.0, 0.0, 0.0, 0.0))

    def test_needs_two_pairs(self):
        with self.assertRaises(DomainError):
            evaluation.bland_altman([(0.1, 0.2)])
        with self.assertRaises(DomainError):
            evaluation.bland_altman([0.1, 0.2, 0.3])


class TTestTests(unittest.TestCase):
    def test_one_sample_example(self):
        result = evaluation.t_test_one_sample([1.0, 2.0, 3.0])
        self.assertAlmostEqual(result.t, 2.0 * math.sqrt(3.0), places=12)
        self.assertEqual(result.df, 2)
        self.assertAlmostEqual(result.p, 1.0 - result.t / math.sqrt(result.t ** 2 + 2.0), places=10)
        self.assertAlmostEqual(result.p, 0.0742, places=4)
        self.assertFalse(result.significant)

    def test_one_sample_zero_variance(self):
        zero = evaluation.t_test_one_sample([0.0, 0.0, 0.0])
        self.assertEqual((zero.t, zero.p, zero.significant, zero.degenerate), (0.0, 1.0, False, True))
        offset = evaluation.t_test_one_sample([0.5, 0.5])
        self.assertEqual(offset.p, 0.0)
        self.assertTrue(offset.significant)
        self.assertTrue(offset.degenerate)
        self.assertIsNone(offset.as_dict()["t"])

    def test_one_sample_needs_two_values(self):
        with self.assertRaises(DomainError):
            evaluation.t_test_one_sample([1.0])

    def test_welch_example(self):
        result = evaluation.welch_t_test([-0.19, -0.20, -0.21], [-0.17, -0.18, -0.16])
        self.assertAlmostEqual(result.t, -3.6742, places=4)
        self.assertAlmostEqual(result.df, 4.0, places=9)
        self.assertAlmostEqual(result.p, _t4_two_sided(result.t), places=9)
        self.assertAlmostEqual(result.p, 0.0213, places=4)
        self.assertFalse(result.significant)
        self.assertAlmostEqual(result.mean_difference, -0.03, places=12)
        se = math.sqrt(2e-4 / 3.0)
        self.assertAlmostEqual(result.ci_high - result.mean_difference, 2.776445 * se, places=5)
        self.assertAlmostEqual(result.mean_difference - result.ci_low, 2.776445 * se, places=5)

    def test_welch_identical_samples(self):
        result = evaluation.welch_t_test([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
        self.assertEqual(result.t, 0.0)
        self.assertAlmostEqual(result.p, 1.0, places=12)
        self.assertFalse(result.degenerate)

    def test_welch_zero_variance(self):
        same = evaluation.welch_t_test([0.25, 0.25], [0.25, 0.25, 0.25])
        self.assertTrue(same.degenerate)
        self.assertEqual(same.p, 1.0)
        apart = evaluation.welch_t_test([0.5, 0.5], [0.25, 0.25])
        self.assertTrue(apart.degenerate)
        self.assertEqual(apart.p, 0.0)
        self.assertTrue(math.isinf(apart.t))

    def test_compare_groups_orders_difference(self):
        results = evaluation.compare_groups([0.0, 0.1, 0.2], {"b": [1.0, 1.1, 1.3], "a": [0.0, 0.1, 0.2]})
        self.assertEqual(list(results), ["a", "b"])
        self.assertGreater(results["b"].mean_difference, 0.0)
        self.assertEqual(results["a"].t, 0.0)


class MetricTests(unittest.TestCase):
    def test_rms_position_error(self):
        truth = np.zeros((168, 2))
        self.assertEqual(evaluation.rms_position_error(truth, truth), 0.0)
        shifted = truth + [1.0, 0.0]
        self.assertAlmostEqual(evaluation.rms_position_error(shifted, truth, 1.4), 1.4, places=12)
        with self.assertRaises(DomainError):
            evaluation.rms_position_error(np.zeros((167, 2)), truth)

    def test_iou_histogram(self):
        bins = evaluation.iou_histogram([0.02, 0.51, 0.97, 0.99, 1.0])
        self.assertEqual(len(bins), 20)
        self.assertEqual(bins[0], {"lo": 0.0, "hi": 0.05, "count": 1})
        self.assertEqual(bins[10]["count"], 1)
        self.assertEqual(bins[19], {"lo": 0.95, "hi": 1.0, "count": 3})
        self.assertEqual(sum(b["count"] for b in bins), 5)


def _landmarks(contraction, region="mid", group=None, shift=(0.0, 0.0)):
    spec = phantom.PhantomSpec(frames=6, es_frame=3, peak_endo_contraction=contraction, peak_rotation=0.0)
    points = phantom.truth_points(spec) + np.asarray(shift)
    extra = {} if group is None else {"group": group}
    return LandmarkFile(LandmarkSequence(points), pixel_spacing_mm=1.4, region=region, extra=extra)


class EvaluateRunTests(unittest.TestCase):
    def setUp(self):
        self.truth = {
            "c0": _landmarks(0.10, "mid", "reference"),
            "c1": _landmarks(0.12, "mid", "reference"),
            "c2": _landmarks(0.05, "apical", "infarct"),
            "c3": _landmarks(0.06, "apical", "infarct"),
        }

    def test_perfect_prediction(self):
        report = evaluation.evaluate_run(self.truth, self.truth)
        doc = report.to_dict()
        self.assertEqual(doc["format"], "tagstrain-report")
        self.assertEqual(doc["n_cases"], 4)
        self.assertNotIn("iou", doc)
        self.assertEqual(set(doc["strain_errors"]), {"all", "apical", "mid"})
        for component in COMPONENTS:
            row = doc["strain_errors"]["all"][component]
            self.assertEqual(row["error_mean"], 0.0)
            self.assertEqual(row["abs_error_mean"], 0.0)
            self.assertEqual(row["t_test"]["p"], 1.0)
        self.assertEqual(doc["position_error_mm"]["es"]["max"], 0.0)
        self.assertEqual(doc["worst_cases"], [])
        self.assertEqual(doc["bland_altman"]["all"]["eps_C_midwall"]["bias"], 0.0)

    def test_translation_moves_position_but_not_strain(self):
        contraction = {"c0": 0.10, "c1": 0.12, "c2": 0.05, "c3": 0.06}
        pred = {k: _landmarks(contraction[k], v.region, shift=(1.0, 0.0)) for k, v in self.truth.items()}
        report = evaluation.evaluate_run(pred, self.truth)
        self.assertAlmostEqual(report.summary["position_error_mm"]["ed"]["mean"], 1.4, places=9)
        for case in report.cases:
            self.assertEqual(case.es_frame, 3)
            for component in COMPONENTS:
                self.assertAlmostEqual(case.error(component), 0.0, places=9)

    def test_group_comparison(self):
        report = evaluation.evaluate_run(self.truth, self.truth)
        groups = report.summary["groups"]
        self.assertEqual(groups["reference"], "reference")
        infarct = groups["comparisons"]["infarct"]
        self.assertEqual(set(infarct), {"pred", "truth"})
        # weaker contraction means less negative circumferential strain
        self.assertGreater(infarct["truth"]["mean_difference"], 0.0)

    def test_boxes_and_review_flags(self):
        good = evaluation.truth_box(self.truth["c0"])
        far = good.translate(good.width * 0.9, 0.0)
        boxes = {k: (evaluation.truth_box(v), evaluation.truth_box(v)) for k, v in self.truth.items()}
        boxes["c0"] = (far, good)
        report = evaluation.evaluate_run(self.truth, self.truth, boxes=boxes, frames_per_second=250.0)
        self.assertEqual(report.summary["throughput_fps"], 250.0)
        self.assertEqual(len(report.iou_values), 4)
        self.assertEqual(report.summary["iou"]["max"], 1.0)
        flagged = report.summary["worst_cases"]
        self.assertEqual([f["case_id"] for f in flagged], ["c0"])
        self.assertTrue(flagged[0]["reasons"][0].startswith("iou"))

    def test_mismatched_ids(self):
        pred = dict(self.truth)
        del pred["c2"]
        with self.assertRaises(DataError) as ctx:
            evaluation.evaluate_run(pred, self.truth)
        self.assertIn("c2", str(ctx.exception))
        with self.assertRaises(DataError):
            evaluation.evaluate_run({}, {})

    def test_missing_boxes(self):
        with self.assertRaises(DataError):
            evaluation.evaluate_run(self.truth, self.truth, boxes={"c0": (BoundingBox(0, 0, 1, 1), BoundingBox(0, 0, 1, 1))})

    def test_write_report(self):
        boxes = {k: (evaluation.truth_box(v), evaluation.truth_box(v)) for k, v in self.truth.items()}
        report = evaluation.evaluate_run(self.truth, self.truth, boxes=boxes, config={"seed": 11})
        with tempfile.TemporaryDirectory() as tmp:
            written = evaluation.write_report(report, tmp)
            names = {p.name for p in written}
            self.assertIn("report.json", names)
            self.assertIn("bland_altman_eps_C_midwall.csv", names)
            self.assertIn("bland_altman_mid_eps_R.csv", names)
            self.assertIn("iou_histogram.csv", names)
            doc = formats.read_json(Path(tmp) / "report.json")
            self.assertEqual(len(doc["cases"]), 4)
            self.assertEqual(doc["iou"]["mean"], 1.0)
            lines = (Path(tmp) / "bland_altman_eps_R.csv").read_text().splitlines()
            self.assertEqual(lines[4], "mean,difference")
            self.assertEqual(len(lines), 5 + 4 + 2)
            histogram = (Path(tmp) / "iou_histogram.csv").read_text().splitlines()
            self.assertEqual(histogram[0], "lo,hi,count")
            self.assertEqual(histogram[-3], "0.95,1.0,4")
            for path in written:
                text = path.read_text()
                self.assertIn(__version__, text, path.name)
                self.assertIn('"seed"', text, path.name)
            self.assertEqual(histogram[-2:], [f"# tool_version={__version__}", '# config={"seed":11}'])


if __name__ == "__main__":
    unittest.main()
