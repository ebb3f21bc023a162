import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from detailrefine.embedder import FrozenEmbedder
from detailrefine.errors import EmptyRegionError, ShapeError
from detailrefine.imaging import Rect, RegionMask, tile_region
from detailrefine.rewards import reward_ds, reward_mm, reward_total, score


@pytest.fixture(scope="module")
def embedder():
    return FrozenEmbedder(1234)


def test_embedder_is_seeded_and_unit_norm(embedder):
    patch = np.random.default_rng(0).uniform(size=(8, 8, 3))
    a, b = embedder(patch), FrozenEmbedder(1234)(patch)
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.allclose(a, FrozenEmbedder(99)(patch))
    assert embedder.distance(patch, patch) == 0.0


def test_embedder_matches_loop_oracle(embedder):
    rng = np.random.default_rng(1)
    for shape in [(8, 8, 3), (3, 5, 3), (1, 1, 3)]:
        patch = rng.uniform(size=shape)
        np.testing.assert_allclose(embedder(patch), oracles.embed(patch, embedder), rtol=1e-10, atol=1e-13)


def test_embedder_rejects_wrong_channels(embedder):
    with pytest.raises(ShapeError):
        embedder.features(torch.zeros(1, 4, 4, 2, dtype=torch.float64))


def test_reward_mm_example():
    bits = np.zeros((4, 4), bool)
    bits[:2, :2] = True
    pred = np.zeros((4, 4, 3))
    truth = np.zeros((4, 4, 3))
    truth[:2, :2] = 1.0
    truth[3, 3] = 5.0
    assert reward_mm(pred, truth, RegionMask(bits)) == -1.0


def test_reward_total_example():
    assert reward_total(-0.8, -0.5, 0.5) == pytest.approx(-0.65)
    assert reward_total(-0.8, -0.5, 0.0) == -0.8
    with pytest.raises(ValueError):
        reward_total(0.0, 0.0, 1.5)


def test_reward_errors(embedder):
    z = np.zeros((4, 4, 3))
    with pytest.raises(EmptyRegionError):
        reward_mm(z, z, RegionMask(np.zeros((4, 4), bool)))
    with pytest.raises(ShapeError):
        reward_mm(z, np.zeros((4, 5, 3)), RegionMask.full(4, 4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rewards_match_oracles(seed):
    emb = FrozenEmbedder(7, dim=8, widths=(4, 6))
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 12, size=2)
    top, left = rng.integers(0, h), rng.integers(0, w)
    rect = Rect(int(top), int(left), int(rng.integers(1, h - top + 1)), int(rng.integers(1, w - left + 1)))
    mask = RegionMask.from_rect(int(h), int(w), rect)
    pred, truth = rng.uniform(size=(2, h, w, 3))
    patch = int(rng.integers(2, 6))
    lam = float(rng.uniform())
    rb = score(pred, truth, mask, emb, patch, lam)
    want_mm = oracles.reward_mm(pred.tolist(), truth.tolist(), mask.bits.tolist())
    want_ds = oracles.reward_ds(pred, truth, tile_region(mask, patch).windows, emb)
    assert oracles.rel_err(rb.r_mm, want_mm) <= 1e-9
    assert oracles.rel_err(rb.r_ds, want_ds) <= 1e-9
    assert oracles.rel_err(rb.total, oracles.reward_total(want_ds, want_mm, lam)) <= 1e-9
    assert rb.K == len(tile_region(mask, patch))


def test_perfect_prediction_scores_zero(embedder):
    truth = np.random.default_rng(2).uniform(size=(16, 16, 3))
    mask = RegionMask.from_rect(16, 16, Rect(2, 3, 9, 10))
    rb = score(truth, truth, mask, embedder, 8, 0.5)
    assert rb.r_mm == 0.0 and rb.r_ds == 0.0 and rb.total == 0.0


def test_reward_ds_needs_patches(embedder):
    from detailrefine.imaging import PatchSet

    z = np.zeros((4, 4, 3))
    with pytest.raises(EmptyRegionError):
        reward_ds(z, z, PatchSet(4, ()), embedder)
