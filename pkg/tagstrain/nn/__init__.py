from tagstrain.nn.engine import Tensor, check_gradients, detect_anomaly, no_grad, stack
from tagstrain.nn.layers import (
    LSTM,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    LeakyReLU,
    Linear,
    LSTMCell,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
)
from tagstrain.nn.losses import LossBreakdown, bbox_mse_loss, composite_tracking_loss
from tagstrain.nn.optim import LOCALIZER_SCHEDULE, TRACKER_SCHEDULE, Adam, StepSchedule, adam_step

__all__ = [
    "Tensor",
    "check_gradients",
    "detect_anomaly",
    "no_grad",
    "stack",
    "LSTM",
    "BatchNorm2d",
    "Conv2d",
    "Dropout",
    "Flatten",
    "LeakyReLU",
    "Linear",
    "LSTMCell",
    "MaxPool2d",
    "Module",
    "ReLU",
    "Sequential",
    "LossBreakdown",
    "bbox_mse_loss",
    "composite_tracking_loss",
    "LOCALIZER_SCHEDULE",
    "TRACKER_SCHEDULE",
    "Adam",
    "StepSchedule",
    "adam_step",
]
