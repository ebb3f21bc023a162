import struct

import numpy as np
import pytest
import torch

from detailrefine import checkpoint as ckpt_io
from detailrefine import model as mdl
from detailrefine.errors import CheckpointError

from conftest import random_params


def _ckpt(cfg, seed=0, **kw):
    return ckpt_io.Checkpoint(cfg, random_params(cfg, seed), step=7, meta={"stage": "test"}, **kw)


def test_round_trip_bit_exact(tiny_cfg, tmp_path):
    rng = np.random.default_rng(0)
    ck = _ckpt(tiny_cfg, rng_state=rng.bit_generator.state)
    ck.adam_m = {k: torch.full_like(v, 0.5) for k, v in ck.params.items()}
    ck.adam_v = {k: torch.full_like(v, 0.25) for k, v in ck.params.items()}
    ck.adam_step = 7
    digest = ckpt_io.save(tmp_path / "m.ckpt", ck)
    assert digest == ckpt_io.file_hash(tmp_path / "m.ckpt")
    back = ckpt_io.load(tmp_path / "m.ckpt", tiny_cfg)
    assert back.config == tiny_cfg and back.step == 7 and back.adam_step == 7
    assert back.meta == {"stage": "test"}
    for group in ("params", "adam_m", "adam_v"):
        a, b = getattr(ck, group), getattr(back, group)
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) for k in a)
    rng2 = np.random.default_rng()
    rng2.bit_generator.state = back.rng_state
    assert rng2.random() == rng.random()
    assert ckpt_io.to_bytes(back) == ckpt_io.to_bytes(ck)


def test_layout_header(tiny_cfg):
    data = ckpt_io.to_bytes(_ckpt(tiny_cfg))
    assert data[:8] == ckpt_io.MAGIC
    (n,) = struct.unpack("<Q", data[8:16])
    n_floats = sum(v.numel() for v in random_params(tiny_cfg, 0).values())
    assert len(data) == 16 + n + 8 * n_floats


def test_config_mismatch_rejected(tiny_cfg, tmp_path):
    ckpt_io.save(tmp_path / "m.ckpt", _ckpt(tiny_cfg))
    other = mdl.ModelConfig(**{**tiny_cfg.to_dict(), "pe_mode": "clone"})
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "m.ckpt", other)


def test_corrupt_files_rejected(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "missing.ckpt")


def test_adapter_presence_must_match_rank(tiny_cfg):
    cfg = mdl.ModelConfig(**{**tiny_cfg.to_dict(), "adapter_rank": 2})
    with pytest.raises(CheckpointError):
        ckpt_io.to_bytes(ckpt_io.Checkpoint(cfg, random_params(tiny_cfg, 0)))
    params = {**random_params(tiny_cfg, 0), **mdl.init_adapter(cfg, 1)}
    back = ckpt_io.from_bytes(ckpt_io.to_bytes(ckpt_io.Checkpoint(cfg, params)))
    assert sum(mdl.is_adapter(k) for k in back.params) == 2 * len(mdl.ADAPTED) * cfg.blocks
