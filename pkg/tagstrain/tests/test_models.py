import tempfile
import unittest
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import numpy as np

from tagstrain import formats, phantom
from tagstrain.errors import ConfigError, DataError, DegenerateBoxError, FormatError, ShapeError, StageError
from tagstrain.models import (
    Localizer,
    ModelCheckpoint,
    Pipeline,
    Tracker,
    full_pipeline,
    load_manifest,
    localize,
    train_localizer,
    train_tracker,
)
from tagstrain.models.data import load_case, tracker_sample
from tagstrain.models.localizer import LocalizerConfig, build_localizer
from tagstrain.models.pipeline import zero_motion_floor
from tagstrain.preprocess import Cine, PreprocConfig
from tagstrain.schema import to_dict
from tagstrain.tests import toy


def _fixed_box_checkpoint(corners, pad_to=256, input_size=32):
    """Localizer whose output ignores the image and always returns ``corners``."""
    cfg = LocalizerConfig(input_size=input_size, channels=(2,), fc_width=4)
    net = build_localizer(cfg, seed=0)
    net.output.weight.data[:] = 0.0
    net.output.bias.data[:] = np.array(corners, dtype=np.float32) / pad_to
    return ModelCheckpoint(
        kind="localizer",
        config=to_dict(cfg),
        preprocess=to_dict(PreprocConfig(pad_to=pad_to)),
        parameters=net.state_dict(),
    )


class ModelTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        toy.make_dataset(cls.root)
        cls.dataset = load_manifest(cls.root)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()


class DatasetTests(ModelTestCase):
    def test_manifest_splits(self):
        self.assertEqual(len(self.dataset.split("train")), 2)
        self.assertEqual(len(self.dataset.split("val")), 2)
        with self.assertRaises(DataError):
            self.dataset.split("test")
        self.assertEqual(self.dataset.split("test", required=False), [])

    def test_not_a_manifest(self):
        formats.write_json(self.root / "other.json", {"format": "something-else"})
        with self.assertRaises(FormatError):
            load_manifest(self.root / "other.json")

    def test_tracker_sample_targets(self):
        record = self.dataset.split("train")[0]
        sample = tracker_sample(self.dataset, record, toy.PRE)
        self.assertEqual(sample.frames.shape, (4, 16, 16))
        self.assertEqual(sample.target.shape, (4, 168, 2))
        self.assertTrue(np.all(sample.mask))
        self.assertTrue(np.all((sample.target > 0) & (sample.target < 1)))
        _cine, landmarks, _box = load_case(self.dataset, record)
        back = sample.transform.to_original(sample.target * toy.PRE.crop_to)
        np.testing.assert_allclose(back, landmarks.points, atol=1e-9)


class CheckpointTests(unittest.TestCase):
    def test_round_trip_is_byte_identical(self):
        ckpt = _fixed_box_checkpoint([50, 50, 150, 150])
        payload = ckpt.to_bytes()
        self.assertTrue(payload.startswith(b"TAGSTRAINCKPT"))
        again = ModelCheckpoint.from_bytes(payload)
        self.assertEqual(again.to_bytes(), payload)
        self.assertEqual(list(again.parameters), list(ckpt.parameters))

    def test_save_and_load(self):
        ckpt = _fixed_box_checkpoint([50, 50, 150, 150])
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "loc.ckpt"
            ckpt.save(path)
            loaded = ModelCheckpoint.load(path)
        frame = np.random.default_rng(0).normal(size=(256, 256))
        self.assertEqual(Localizer(loaded).predict_box(frame), Localizer(ckpt).predict_box(frame))

    def test_corrupt_payloads(self):
        payload = _fixed_box_checkpoint([50, 50, 150, 150]).to_bytes()
        with self.assertRaises(FormatError):
            ModelCheckpoint.from_bytes(b"X" + payload[1:])
        with self.assertRaises(FormatError):
            ModelCheckpoint.from_bytes(payload[:-4])
        with self.assertRaises(FormatError):
            ModelCheckpoint.from_bytes(payload + b"\0\0\0\0")
        with self.assertRaises(FormatError):
            ModelCheckpoint(kind="segmenter", config={}, preprocess={}, parameters=OrderedDict())


class LocalizerTests(ModelTestCase):
    def test_fixed_output_box_and_expansion(self):
        ckpt = _fixed_box_checkpoint([50, 50, 150, 150])
        frame = np.random.default_rng(1).normal(size=(256, 256))
        localizer = Localizer(ckpt)
        self.assertEqual(localizer.predict_box(frame).as_list(), [50.0, 50.0, 150.0, 150.0])
        self.assertEqual(localizer.localize(frame).as_list(), [20.0, 20.0, 180.0, 180.0])
        self.assertEqual(localize(ckpt, frame, pad_offsets=(3, 8)).as_list(), [12.0, 17.0, 172.0, 177.0])

    def test_degenerate_prediction(self):
        ckpt = _fixed_box_checkpoint([150, 50, 50, 150])
        with self.assertRaises(DegenerateBoxError):
            Localizer(ckpt).predict_box(np.zeros((256, 256)))

    def test_wrong_kind(self):
        ckpt = _fixed_box_checkpoint([50, 50, 150, 150])
        ckpt.kind = "tracker"
        with self.assertRaises(DataError):
            Localizer(ckpt)

    def test_training_is_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            metrics_path = Path(tmp) / "loc.metrics.jsonl"
            first = train_localizer(
                self.dataset, toy.LOCALIZER, toy.PRE, seed=3, metrics_path=metrics_path, config={"seed": 3}
            )
            second = train_localizer(self.dataset, toy.LOCALIZER, toy.PRE, seed=3, config={"seed": 3})
            logged, provenance = formats.read_metrics(metrics_path)
        self.assertEqual(first.metrics, second.metrics)
        self.assertEqual(first.checkpoint.to_bytes(), second.checkpoint.to_bytes())
        self.assertEqual(logged, first.metrics)
        self.assertEqual([r["split"] for r in logged], ["train", "val"] * 2)
        self.assertTrue(0.0 <= logged[-1]["mean_iou"] <= 1.0)
        self.assertEqual(provenance, formats.make_provenance({"seed": 3}))

    def test_inference_is_deterministic(self):
        result = train_localizer(self.dataset, toy.LOCALIZER, toy.PRE, seed=0, epochs=1)
        cine, _landmarks, _box = load_case(self.dataset, self.dataset.split("val")[0])
        localizer = Localizer(result.checkpoint)
        try:
            a = localizer.predict_box(cine.frames[0])
        except DegenerateBoxError:
            self.skipTest("one-epoch toy localizer produced a degenerate box")
        self.assertEqual(localizer.predict_box(cine.frames[0]), a)


class OverfitOneCaseTests(unittest.TestCase):
    """Both models drive the training loss on a single noise-free case below 1% of its start."""

    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        spec = replace(toy.SPEC, peak_endo_contraction=0.25, peak_rotation=0.1, noise_sigma=0.0)
        phantom.generate_dataset(
            cls._tmp.name, 1, spec, phantom.DatasetRanges.zero(), seed=3,
            fractions=phantom.SplitFractions(train=1.0, val=0.0, test=0.0), threads=1,
        )
        cls.dataset = load_manifest(cls._tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    @staticmethod
    def _train_losses(metrics):
        return [r["loss"] for r in metrics if r["split"] == "train"]

    def test_localizer(self):
        cfg = replace(toy.LOCALIZER, dropout_p=0.0, epochs=200, batch_size=1)
        with self.assertLogs("tagstrain.models", level="WARNING"):
            losses = self._train_losses(train_localizer(self.dataset, cfg, toy.PRE, seed=1).metrics)
        self.assertEqual(len(losses), 200)
        self.assertLess(losses[-1], 0.01 * losses[0])

    def test_tracker(self):
        cfg = replace(
            toy.TRACKER, channels=(4,), feature_dim=16, lstm_hidden=16, epochs=200, batch_size=1,
            base_lr=1e-2, lr_start_epoch=50, lr_period=6,
        )
        with self.assertLogs("tagstrain.models", level="WARNING"):
            losses = self._train_losses(train_tracker(self.dataset, cfg, toy.PRE, seed=1).metrics)
        self.assertEqual(len(losses), 200)
        self.assertLess(losses[-1], 0.01 * losses[0])


class TrackerTests(ModelTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.result = train_tracker(cls.dataset, toy.TRACKER, toy.PRE, seed=5)

    def test_metrics_rows(self):
        rows = self.result.metrics
        self.assertEqual([r["split"] for r in rows], ["train", "val"] * 2)
        for key in ("loss", "mse_position", "radial_term", "circ_term"):
            self.assertIn(key, rows[0])
        for key in ("es_eps_C_midwall_bias", "es_eps_C_midwall_precision", "es_eps_R_bias", "rms_ed_mm", "rms_es_mm"):
            self.assertIn(key, rows[1])

    def test_training_is_deterministic(self):
        again = train_tracker(self.dataset, toy.TRACKER, toy.PRE, seed=5)
        self.assertEqual(again.metrics, self.result.metrics)
        self.assertEqual(again.checkpoint.to_bytes(), self.result.checkpoint.to_bytes())

    def test_track_shape_and_determinism(self):
        tracker = Tracker(self.result.checkpoint)
        frames = np.random.default_rng(2).normal(size=(4, 16, 16)).astype(np.float32)
        a = tracker.track(Cine(frames=frames))
        self.assertEqual(a.points.shape, (4, 168, 2))
        np.testing.assert_array_equal(tracker.track(Cine(frames=frames)).points, a.points)

    def test_output_is_causal_in_time(self):
        tracker = Tracker(self.result.checkpoint)
        frames = np.random.default_rng(3).normal(size=(4, 16, 16)).astype(np.float32)
        changed = frames.copy()
        changed[-1] += 1.0
        a, b = tracker.predict(frames), tracker.predict(changed)
        np.testing.assert_array_equal(a[:-1], b[:-1])
        self.assertFalse(np.array_equal(a[-1], b[-1]))

    def test_frame_count_mismatch(self):
        with self.assertRaises(ShapeError):
            Tracker(self.result.checkpoint).predict(np.zeros((5, 16, 16)))

    def test_config_mismatches(self):
        with self.assertRaises(ConfigError):
            train_tracker(self.dataset, toy.TRACKER, replace(toy.PRE, crop_to=32))
        with self.assertRaises(ConfigError):
            train_tracker(self.dataset, replace(toy.TRACKER, teacher_forcing=False), toy.PRE)


class PipelineTests(ModelTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.localizer = train_localizer(cls.dataset, toy.LOCALIZER, toy.PRE, seed=0).checkpoint
        cls.tracker = train_tracker(cls.dataset, toy.TRACKER, toy.PRE, seed=0).checkpoint

    def _cine(self):
        cine, _landmarks, _box = load_case(self.dataset, self.dataset.split("val")[0])
        return cine

    def _fallback_localizer(self):
        ckpt = _fixed_box_checkpoint([20, 10, 10, 20], pad_to=32)
        ckpt.preprocess = to_dict(toy.PRE)
        return ckpt

    def test_end_to_end(self):
        cine = self._cine()
        result = full_pipeline(self.localizer, self.tracker, cine)
        again = full_pipeline(self.localizer, self.tracker, cine)
        self.assertEqual(result.landmarks.points.shape, (4, 168, 2))
        np.testing.assert_array_equal(result.landmarks.points, again.landmarks.points)
        self.assertEqual(len(result.curve), 4)
        self.assertGreater(result.frames_per_second, 0.0)
        self.assertGreaterEqual(zero_motion_floor(result), 0.0)

    def test_short_cine_is_truncated_to_valid_frames(self):
        cine = self._cine()
        short = Cine(frames=cine.frames[:3], pixel_spacing_mm=cine.pixel_spacing_mm, case_id="short")
        result = full_pipeline(self.localizer, self.tracker, short)
        self.assertEqual(result.landmarks.n_frames, 3)

    def test_single_frame_cine_is_rejected(self):
        cine = self._cine()
        for single in (
            Cine(frames=cine.frames[:1], case_id="one"),
            Cine(frames=cine.frames[:2], source_frames=1, case_id="one"),
        ):
            with self.assertRaises(DataError) as ctx:
                full_pipeline(self.localizer, self.tracker, single)
            self.assertIn("got 1", str(ctx.exception))

    def test_degenerate_box_falls_back_to_full_frame(self):
        result = Pipeline(self._fallback_localizer(), self.tracker).run(self._cine())
        self.assertTrue(result.fallback)
        self.assertEqual(result.crop_box.as_list(), [0.0, 0.0, 32.0, 32.0])

    def test_preprocess_mismatch(self):
        ckpt = self._fallback_localizer()
        ckpt.preprocess = to_dict(replace(toy.PRE, expand_fraction=0.5))
        with self.assertRaises(StageError) as ctx:
            Pipeline(ckpt, self.tracker)
        self.assertIsInstance(ctx.exception.__cause__, ConfigError)


if __name__ == "__main__":
    unittest.main()
