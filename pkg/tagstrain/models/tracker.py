"""Landmark tracker: a shared per-frame conv encoder feeding an LSTM.

Input is the cropped cine (B, T, S, S). Each frame is encoded to a feature
vector, the LSTM runs over time and a linear head regresses 168 (x, y) pairs
per frame, normalized to [0, 1] of the crop size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from tagstrain import formats
from tagstrain.errors import ConfigError, DataError, DomainError, NonFiniteError, ShapeError
from tagstrain.evaluation import rms_position_error
from tagstrain.geometry import N_LANDMARKS, LandmarkSequence
from tagstrain.models.checkpoint import ModelCheckpoint, TrainResult
from tagstrain.models.data import BoxFn, Dataset, TrackerSample, tracker_samples
from tagstrain.nn import (
    LSTM,
    Adam,
    BatchNorm2d,
    Conv2d,
    Flatten,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Module,
    Sequential,
    StepSchedule,
    Tensor,
    composite_tracking_loss,
    no_grad,
)
from tagstrain.nn.optim import SQRT_HALF
from tagstrain.preprocess import Cine, PreprocConfig
from tagstrain.schema import from_dict, to_dict
from tagstrain.strain import strain_curve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    input_size: int = 128
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    kernel_size: int = 3
    feature_dim: int = 1024
    lstm_hidden: int = 1024
    frames: int = 20
    leaky_alpha: float = 0.1
    head_init_gain: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 1e-4
    lr_start_epoch: int = 0
    lr_period: int = 10
    teacher_forcing: bool = True

    def __post_init__(self) -> None:
        if not self.channels:
            raise DomainError("tracker encoder needs at least one conv block")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise DomainError(f"input_size {self.input_size} must be divisible by 2^{len(self.channels)}")
        if self.frames < 2:
            raise DomainError(f"frames must be >= 2, got {self.frames}")
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.base_lr, SQRT_HALF, self.lr_period, self.lr_start_epoch)


class TrackerNet(Module):
    def __init__(self, cfg: TrackerConfig, rng: np.random.Generator):
        super().__init__()
        blocks: List[Module] = []
        in_channels = 1
        for width in cfg.channels:
            blocks += [Conv2d(in_channels, width, cfg.kernel_size, rng), BatchNorm2d(width), LeakyReLU(cfg.leaky_alpha), MaxPool2d()]
            in_channels = width
        side = cfg.input_size // 2 ** len(cfg.channels)
        self.encoder = Sequential(
            *blocks,
            Flatten(),
            Linear(in_channels * side * side, cfg.feature_dim, rng),
            LeakyReLU(cfg.leaky_alpha),
        )
        self.lstm = LSTM(cfg.feature_dim, cfg.lstm_hidden, rng)
        self.head = Linear(cfg.lstm_hidden, 2 * N_LANDMARKS, rng, gain=cfg.head_init_gain)
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"tracker expects (B, T, S, S) input, got {x.shape}")
        b, t, h, w = x.shape
        features = self.encoder(x.reshape(b * t, 1, h, w)).reshape(b, t, self.cfg.feature_dim)
        hidden = self.lstm(features).reshape(b * t, self.cfg.lstm_hidden)
        return self.head(hidden).reshape(b, t, N_LANDMARKS, 2)


def build_tracker(cfg: TrackerConfig, seed: int) -> TrackerNet:
    return TrackerNet(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0])))


def _batch(samples: List[TrackerSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames = np.stack([s.frames for s in samples]).astype(np.float32)
    targets = np.stack([s.target for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    return frames, targets, masks


def _predict(model: TrackerNet, frames: np.ndarray, batch_size: int) -> np.ndarray:
    model.eval()
    with no_grad():
        out = [model(Tensor(frames[i:i + batch_size])).data for i in range(0, len(frames), batch_size)]
    return np.concatenate(out).astype(np.float64)


def validation_metrics(samples: List[TrackerSample], pred: np.ndarray, crop_to: int) -> Dict[str, float]:
    """ES strain errors and ED/ES RMS position error in original image space."""
    d_circ, d_rad, rms_ed, rms_es = [], [], [], []
    for sample, p in zip(samples, pred):
        n = int(sample.mask.sum())
        pred_orig = sample.transform.to_original(p[:n] * crop_to)
        truth = sample.truth_original[:n]
        truth_curve = strain_curve(LandmarkSequence(truth))
        pred_curve = strain_curve(LandmarkSequence(pred_orig))
        es = truth_curve.es_frame
        d_circ.append(pred_curve.per_frame[es].eps_C_midwall - truth_curve.at_es.eps_C_midwall)
        d_rad.append(pred_curve.per_frame[es].eps_R - truth_curve.at_es.eps_R)
        rms_ed.append(rms_position_error(pred_orig[0], truth[0], sample.pixel_spacing_mm))
        rms_es.append(rms_position_error(pred_orig[es], truth[es], sample.pixel_spacing_mm))
    return {
        "es_eps_C_midwall_bias": float(np.mean(d_circ)),
        "es_eps_C_midwall_precision": float(np.std(d_circ, ddof=1)) if len(d_circ) > 1 else 0.0,
        "es_eps_R_bias": float(np.mean(d_rad)),
        "rms_ed_mm": float(np.mean(rms_ed)),
        "rms_es_mm": float(np.mean(rms_es)),
    }


def train_tracker(
    dataset: Dataset,
    cfg: TrackerConfig,
    pre: PreprocConfig,
    omega: float = 1.0,
    seed: int = 0,
    epochs: Optional[int] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    config: Optional[Dict[str, Any]] = None,
    box_fn: Optional[BoxFn] = None,
) -> TrainResult:
    """Train end to end on the composite position + strain loss.

    With ``cfg.teacher_forcing`` the crops come from expanded truth boxes;
    otherwise ``box_fn`` (typically a trained localizer) supplies them.
    """
    if pre.crop_to != cfg.input_size:
        raise ConfigError(f"preprocess.crop_to ({pre.crop_to}) must equal tracker.input_size ({cfg.input_size})")
    if pre.target_frames != cfg.frames:
        raise ConfigError(f"preprocess.target_frames ({pre.target_frames}) must equal tracker.frames ({cfg.frames})")
    if not cfg.teacher_forcing and box_fn is None:
        raise ConfigError("tracker.teacher_forcing is off but no localizer was supplied for crop boxes")
    epochs = cfg.epochs if epochs is None else epochs
    crop_boxes = None if cfg.teacher_forcing else box_fn

    train = tracker_samples(dataset, dataset.split("train"), pre, crop_boxes)
    val = tracker_samples(dataset, dataset.split("val", required=False), pre, crop_boxes)
    if not val:
        logger.warning("no validation cases; reporting training-set strain errors")
        val = train
    train_x, train_y, train_m = _batch(train)
    val_x, val_y, val_m = _batch(val)

    model = build_tracker(cfg, seed)
    model.head.bias.data[:] = train_y[:, 0].mean(axis=0).reshape(-1)
    optimizer = Adam(model.parameters(), cfg.schedule)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    metrics: List[Dict[str, Any]] = []
    n = len(train)
    lr = cfg.schedule.lr(0)

    for epoch in range(epochs):
        model.train()
        order = order_rng.permutation(n)
        parts: List[Dict[str, float]] = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            breakdown = composite_tracking_loss(model(Tensor(train_x[idx])), train_y[idx], omega, train_m[idx])
            value = breakdown.total.item()
            if not math.isfinite(value):
                raise NonFiniteError("tracker loss is not finite", epoch, step)
            breakdown.total.backward()
            lr = optimizer.step(epoch)
            parts.append(breakdown.as_dict())

        pred = _predict(model, val_x, cfg.batch_size)
        with no_grad():
            val_loss = composite_tracking_loss(Tensor(pred.astype(np.float32)), val_y, omega, val_m).as_dict()
        val_row = {"epoch": epoch, "split": "val", "lr": lr, **val_loss}
        val_row.update(validation_metrics(val, pred, pre.crop_to))
        train_row = {"epoch": epoch, "split": "train", "lr": lr}
        train_row.update({k: float(np.mean([p[k] for p in parts])) for k in parts[0]})
        metrics += [train_row, val_row]
        logger.info(
            "tracker epoch %d: train loss %.6f, val loss %.6f, ES eps_C midwall bias %.4f",
            epoch, train_row["loss"], val_row["loss"], val_row["es_eps_C_midwall_bias"],
        )

    if metrics_path is not None:
        formats.write_jsonl(metrics_path, metrics, provenance=formats.make_provenance(config))
    checkpoint = ModelCheckpoint(
        kind="tracker",
        config=to_dict(cfg),
        preprocess=to_dict(pre),
        parameters=model.state_dict(),
        epoch=epochs,
        seed=seed,
        optimizer=optimizer.state_dict(),
        provenance=formats.make_provenance(config),
    )
    return TrainResult(checkpoint, metrics)


class Tracker:
    def __init__(self, checkpoint: ModelCheckpoint):
        if checkpoint.kind != "tracker":
            raise DataError(f"expected a tracker checkpoint, got {checkpoint.kind!r}")
        self.cfg = from_dict(TrackerConfig, checkpoint.config, "tracker")
        self.pre = from_dict(PreprocConfig, checkpoint.preprocess, "preprocess")
        self.model = build_tracker(self.cfg, checkpoint.seed)
        self.model.load_state_dict(checkpoint.parameters)
        self.model.eval()

    def predict(self, frames: np.ndarray) -> np.ndarray:
        """Normalized (T, 168, 2) output for one cropped cine."""
        frames = np.asarray(frames, dtype=np.float32)
        expected = (self.cfg.frames, self.cfg.input_size, self.cfg.input_size)
        if frames.shape != expected:
            raise ShapeError(f"tracker expects a {expected} cine, got {frames.shape}")
        with no_grad():
            return self.model(Tensor(frames[None])).data[0].astype(np.float64)

    def track(self, cropped: Cine) -> LandmarkSequence:
        """Landmarks in crop pixels; map with the crop transform for original space."""
        return LandmarkSequence(self.predict(cropped.frames) * self.cfg.input_size)


def track(checkpoint: ModelCheckpoint, cropped: Cine) -> LandmarkSequence:
    return Tracker(checkpoint).track(cropped)
