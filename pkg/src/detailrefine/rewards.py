"""Rewards on refined images: masked pixel error, patch perceptual distance, and their blend."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .embedder import FrozenEmbedder
from .errors import EmptyRegionError, ShapeError
from .imaging import PatchSet, RegionMask, tile_region


@dataclass
class RewardBreakdown:
    r_ds: float
    r_mm: float
    total: float
    K: int
    per_patch: list[float] = field(default_factory=list)


def reward_mm(pred: np.ndarray, truth: np.ndarray, mask: RegionMask) -> float:
    """Negative mean squared error over the region (channels averaged per pixel)."""
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    if mask.area == 0:
        raise EmptyRegionError("masked reward over an empty region")
    err = ((np.asarray(pred) - np.asarray(truth)) ** 2).mean(axis=2)
    return -float(err[mask.bits].sum() / mask.area)


def reward_ds(pred: np.ndarray, truth: np.ndarray, patches: PatchSet, f: FrozenEmbedder) -> tuple[float, list[float]]:
    """Negative mean embedding distance over the patch windows."""
    if len(patches) == 0:
        raise EmptyRegionError("perceptual reward needs at least one patch")
    pred_t = torch.as_tensor(np.asarray(pred), dtype=torch.float64)
    truth_t = torch.as_tensor(np.asarray(truth), dtype=torch.float64)
    # windows of equal size are embedded together
    by_size: dict[tuple[int, int], list[int]] = {}
    for i, w in enumerate(patches.windows):
        by_size.setdefault((w.height, w.width), []).append(i)
    dists = [0.0] * len(patches)
    with torch.no_grad():
        for idx in by_size.values():
            a = torch.stack([pred_t[patches.windows[i].slices()] for i in idx])
            b = torch.stack([truth_t[patches.windows[i].slices()] for i in idx])
            d = (f.features(a) - f.features(b)).norm(dim=1)
            for i, di in zip(idx, d.tolist()):
                dists[i] = di
    return -float(np.mean(dists)), dists


def reward_total(r_ds: float, r_mm: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * r_ds + lam * r_mm


def score(pred: np.ndarray, truth: np.ndarray, mask: RegionMask, f: FrozenEmbedder, patch_size: int, lam: float) -> RewardBreakdown:
    patches = tile_region(mask, patch_size)
    ds, per_patch = reward_ds(pred, truth, patches, f)
    mm = reward_mm(pred, truth, mask)
    return RewardBreakdown(ds, mm, reward_total(ds, mm, lam), len(patches), per_patch)
