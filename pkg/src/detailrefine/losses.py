"""Region-weighted reconstruction loss."""

from __future__ import annotations

import numpy as np
import torch

from .errors import EmptyRegionError, ShapeError
from .imaging import RegionMask


def weight_matrix(mask: RegionMask) -> np.ndarray:
    """Per-pixel weights: ``H*W / |region|`` inside the region, 1 elsewhere.

    Computed from the background-polarity mask (0 inside the region), i.e.
    ``|region| = sum(1 - M)``.
    """
    m = mask.background_polarity()
    inside = float((1.0 - m).sum())
    if inside == 0:
        raise EmptyRegionError("weight matrix of an empty region (division by zero)")
    h, w = m.shape
    return np.where(m == 0, (h * w) / inside, 1.0)


def masked_loss(pred, truth, weights):
    """``mean_p W(p) * mean_c (pred - truth)^2`` for ``(H, W, C)`` or batched ``(B, H, W, C)`` inputs.

    Batched inputs return one loss per row.  Works on numpy arrays and torch tensors.
    """
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if tuple(weights.shape) != tuple(pred.shape[-3:-1]) and tuple(weights.shape) != tuple(pred.shape[:-1]):
        raise ShapeError(f"weights {tuple(weights.shape)} do not match image {tuple(pred.shape)}")
    per_pixel = ((pred - truth) ** 2).mean(-1) * weights
    if isinstance(per_pixel, torch.Tensor):
        return per_pixel.mean(dim=(-2, -1))
    return per_pixel.mean(axis=(-2, -1))
