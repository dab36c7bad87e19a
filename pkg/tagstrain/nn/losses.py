"""Training objectives: box corner MSE and the composite position + strain loss.

The tracking loss for frame t is

    MSE_t + omega * |eps_R'(t) - eps_R(t)| + omega * |eps_C'(t) - eps_C(t)|

where MSE_t sums squared x and y errors over the 168 landmarks and divides by
168, eps_R is the mean Green strain of the 24 endo-to-epi chords and eps_C the
mean Green strain of the midwall ring. Predicted strain is measured against the
predicted frame 0, truth strain against the truth frame 0. Frames are combined
by a mask-weighted mean so zero-padded frames do not contribute.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from tagstrain.errors import DegenerateGeometryError, DomainError, ShapeError
from tagstrain.geometry import MIDWALL_RING, N_LANDMARKS, RINGS, SPOKES
from tagstrain.nn.engine import Tensor
from tagstrain.strain import radial_sq_lengths, ring_sq_lengths

_NEXT = np.roll(np.arange(SPOKES), -1)
_ENDO = slice(0, SPOKES)
_EPI = slice((RINGS - 1) * SPOKES, RINGS * SPOKES)
_MID = slice(MIDWALL_RING * SPOKES, (MIDWALL_RING + 1) * SPOKES)


@dataclass
class LossBreakdown:
    total: Tensor
    mse_position: float
    radial_term: float
    circ_term: float
    omega: float
    per_frame: np.ndarray
    frame_mask: np.ndarray

    def as_dict(self) -> dict:
        return {
            "loss": float(self.total.item()),
            "mse_position": self.mse_position,
            "radial_term": self.radial_term,
            "circ_term": self.circ_term,
        }


def bbox_mse_loss(pred: Tensor, truth: Union[Tensor, np.ndarray]) -> Tensor:
    target = truth.data if isinstance(truth, Tensor) else np.asarray(truth, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ShapeError(f"bbox loss needs matching (..., 4) inputs, got {pred.shape} and {target.shape}")
    diff = pred - Tensor(target.astype(pred.dtype))
    return (diff * diff).mean()


def _pred_green(cur_sq: Tensor, ref_sq: Tensor) -> Tensor:
    return ((cur_sq / ref_sq - 1.0) * 0.5).mean(axis=-1)


def _truth_green(cur_sq: np.ndarray, what: str) -> np.ndarray:
    ref = cur_sq[:, 0:1, :]
    if np.any(ref <= 0):
        raise DegenerateGeometryError(f"zero-length {what} segment in the truth reference frame")
    return np.mean(0.5 * (cur_sq / ref - 1.0), axis=-1)


def composite_tracking_loss(
    pred: Tensor,
    truth: np.ndarray,
    omega: float = 1.0,
    frame_mask: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """Loss for (B, T, 168, 2) predictions; (T, 168, 2) is treated as B = 1."""
    target = np.asarray(truth, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-2:] != (N_LANDMARKS, 2):
        raise ShapeError(f"tracking loss needs matching (B, T, {N_LANDMARKS}, 2) inputs, got {pred.shape} and {target.shape}")
    if pred.ndim == 3:
        pred = pred.reshape((1,) + pred.shape)
        target = target[None]
    b, t = pred.shape[:2]
    mask = np.ones((b, t), dtype=pred.dtype) if frame_mask is None else np.broadcast_to(
        np.asarray(frame_mask, dtype=pred.dtype), (b, t)
    )
    if np.any(mask[:, 0] == 0):
        raise DomainError("frame 0 is the strain reference and must not be masked")

    diff = pred - Tensor(target)
    mse_t = (diff * diff).sum(axis=(2, 3)) * (1.0 / N_LANDMARKS)

    chord = pred[:, :, _EPI, :] - pred[:, :, _ENDO, :]
    radial_sq = (chord * chord).sum(axis=-1)
    ring = pred[:, :, _MID, :]
    seg = ring[:, :, _NEXT, :] - ring
    ring_sq = (seg * seg).sum(axis=-1)
    if np.any(radial_sq.data[:, 0] <= 0) or np.any(ring_sq.data[:, 0] <= 0):
        raise DegenerateGeometryError("zero-length segment in the predicted reference frame")

    eps_r_pred = _pred_green(radial_sq, radial_sq[:, 0:1, :])
    eps_c_pred = _pred_green(ring_sq, ring_sq[:, 0:1, :])
    eps_r_true = _truth_green(radial_sq_lengths(target), "radial")
    eps_c_true = _truth_green(ring_sq_lengths(target, MIDWALL_RING), "circumferential")

    err_r = (eps_r_pred - Tensor(eps_r_true.astype(pred.dtype))).abs()
    err_c = (eps_c_pred - Tensor(eps_c_true.astype(pred.dtype))).abs()
    loss_t = mse_t + err_r * omega + err_c * omega

    weights = Tensor(mask)
    denom = float(mask.sum())
    total = (loss_t * weights).sum() * (1.0 / denom)

    def masked_mean(values: np.ndarray) -> float:
        return float((values * mask).sum() / denom)

    return LossBreakdown(
        total=total,
        mse_position=masked_mean(mse_t.data),
        radial_term=masked_mean(err_r.data),
        circ_term=masked_mean(err_c.data),
        omega=float(omega),
        per_frame=(loss_t.data * mask).sum(axis=0) / np.maximum(mask.sum(axis=0), 1),
        frame_mask=np.asarray(mask),
    )
