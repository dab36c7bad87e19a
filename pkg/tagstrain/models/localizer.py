"""ROI localizer: a conv-BN-ReLU-pool stack regressing the ED bounding box.

The network predicts the tight landmark box as corners (x_min, y_min, x_max,
y_max) normalized by the padded frame size. Expansion by the configured
fraction happens only at inference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from tagstrain import formats
from tagstrain.errors import DataError, DegenerateBoxError, DomainError, NonFiniteError
from tagstrain.geometry import BoundingBox, expand_box, iou
from tagstrain.models.checkpoint import ModelCheckpoint, TrainResult
from tagstrain.models.data import Dataset, localizer_arrays, localizer_input
from tagstrain.nn import (
    Adam,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
    StepSchedule,
    Tensor,
    bbox_mse_loss,
    no_grad,
)
from tagstrain.nn.optim import SQRT_HALF
from tagstrain.preprocess import PreprocConfig
from tagstrain.schema import from_dict, to_dict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalizerConfig:
    input_size: int = 256
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    kernel_size: int = 3
    fc_width: int = 256
    dropout_p: float = 0.2
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    lr_start_epoch: int = 10
    lr_period: int = 5

    def __post_init__(self) -> None:
        if not self.channels:
            raise DomainError("localizer needs at least one conv block")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise DomainError(
                f"input_size {self.input_size} must be divisible by 2^{len(self.channels)} for {len(self.channels)} pooling blocks"
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.base_lr, SQRT_HALF, self.lr_period, self.lr_start_epoch)


class LocalizerNet(Module):
    def __init__(self, cfg: LocalizerConfig, rng: np.random.Generator):
        super().__init__()
        blocks: List[Module] = []
        in_channels = 1
        for width in cfg.channels:
            blocks += [Conv2d(in_channels, width, cfg.kernel_size, rng), BatchNorm2d(width), ReLU(), MaxPool2d()]
            in_channels = width
        side = cfg.input_size // 2 ** len(cfg.channels)
        self.features = Sequential(*blocks)
        self.head = Sequential(
            Flatten(),
            Linear(in_channels * side * side, cfg.fc_width, rng),
            ReLU(),
            Dropout(cfg.dropout_p, rng),
            Linear(cfg.fc_width, 4, rng, gain=0.01),
        )

    @property
    def output(self) -> Linear:
        return list(self.head._children.values())[-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


def build_localizer(cfg: LocalizerConfig, seed: int) -> LocalizerNet:
    return LocalizerNet(cfg, np.random.default_rng(np.random.SeedSequence([seed, 0])))


def boxes_from_output(values: np.ndarray, pad_to: int) -> List[Optional[BoundingBox]]:
    boxes: List[Optional[BoundingBox]] = []
    for row in np.asarray(values, dtype=np.float64) * pad_to:
        x0, y0, x1, y1 = (float(v) for v in row)
        boxes.append(BoundingBox(x0, y0, x1, y1) if x0 < x1 and y0 < y1 and np.all(np.isfinite(row)) else None)
    return boxes


def mean_iou(pred: np.ndarray, truth: np.ndarray, pad_to: int) -> Tuple[float, List[float]]:
    scores = []
    for p, t in zip(boxes_from_output(pred, pad_to), boxes_from_output(truth, pad_to)):
        scores.append(0.0 if p is None or t is None else iou(p, t))
    return float(np.mean(scores)), scores


def _predict(model: Module, x: np.ndarray, batch_size: int) -> np.ndarray:
    model.eval()
    with no_grad():
        out = [model(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def train_localizer(
    dataset: Dataset,
    cfg: LocalizerConfig,
    pre: PreprocConfig,
    seed: int = 0,
    epochs: Optional[int] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    config: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """Fit the box regressor on the train split; report val loss and IoU per epoch."""
    epochs = cfg.epochs if epochs is None else epochs
    train_x, train_y = localizer_arrays(dataset, dataset.split("train"), pre, cfg.input_size)
    val_records = dataset.split("val", required=False)
    if val_records:
        val_x, val_y = localizer_arrays(dataset, val_records, pre, cfg.input_size)
    else:
        logger.warning("no validation cases; reporting training-set IoU")
        val_x, val_y = train_x, train_y

    model = build_localizer(cfg, seed)
    model.output.bias.data[:] = train_y.mean(axis=0)
    optimizer = Adam(model.parameters(), cfg.schedule)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    metrics: List[Dict[str, Any]] = []
    n = len(train_x)
    lr = cfg.schedule.lr(0)

    for epoch in range(epochs):
        model.train()
        order = order_rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = bbox_mse_loss(model(Tensor(train_x[idx])), train_y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError("localizer loss is not finite", epoch, step)
            loss.backward()
            lr = optimizer.step(epoch)
            losses.append(value)
        pred = _predict(model, val_x, cfg.batch_size)
        val_loss = float(np.mean((pred - val_y) ** 2))
        val_iou, _ = mean_iou(pred, val_y, pre.pad_to)
        metrics.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr})
        metrics.append({"epoch": epoch, "split": "val", "loss": val_loss, "mean_iou": val_iou, "lr": lr})
        logger.info("localizer epoch %d: train loss %.6f, val loss %.6f, val IoU %.4f", epoch, np.mean(losses), val_loss, val_iou)

    if metrics_path is not None:
        formats.write_jsonl(metrics_path, metrics, provenance=formats.make_provenance(config))
    checkpoint = ModelCheckpoint(
        kind="localizer",
        config=to_dict(cfg),
        preprocess=to_dict(pre),
        parameters=model.state_dict(),
        epoch=epochs,
        seed=seed,
        optimizer=optimizer.state_dict(),
        provenance=formats.make_provenance(config),
    )
    return TrainResult(checkpoint, metrics)


class Localizer:
    """Eval-mode localizer restored from a checkpoint."""

    def __init__(self, checkpoint: ModelCheckpoint):
        if checkpoint.kind != "localizer":
            raise DataError(f"expected a localizer checkpoint, got {checkpoint.kind!r}")
        self.cfg = from_dict(LocalizerConfig, checkpoint.config, "localizer")
        self.pre = from_dict(PreprocConfig, checkpoint.preprocess, "preprocess")
        self.model = build_localizer(self.cfg, checkpoint.seed)
        self.model.load_state_dict(checkpoint.parameters)
        self.model.eval()

    def predict_box(self, padded_frame: np.ndarray) -> BoundingBox:
        """Tight box in padded coordinates."""
        x = localizer_input(padded_frame, self.cfg.input_size)[None]
        with no_grad():
            out = self.model(Tensor(x)).data[0]
        (box,) = boxes_from_output(out[None], self.pre.pad_to)
        if box is None:
            raise DegenerateBoxError(f"localizer predicted a degenerate box {list(out * self.pre.pad_to)}")
        frame = BoundingBox(0.0, 0.0, float(self.pre.pad_to), float(self.pre.pad_to))
        if box.intersection_area(frame) == 0.0:
            raise DegenerateBoxError(f"localizer predicted a box outside the frame: {box.as_list()}")
        return box

    def localize(self, padded_frame: np.ndarray) -> BoundingBox:
        box = self.predict_box(padded_frame)
        return expand_box(box, self.pre.expand_fraction, self.pre.pad_to, self.pre.pad_to)


def localize(checkpoint: ModelCheckpoint, ed_frame: np.ndarray, pad_offsets: Tuple[int, int] = (0, 0)) -> BoundingBox:
    """Expanded ROI box for a padded ED frame, in original-image coordinates."""
    box = Localizer(checkpoint).localize(ed_frame)
    return box.translate(-pad_offsets[1], -pad_offsets[0])
