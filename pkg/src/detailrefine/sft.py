"""Supervised flow-matching fine-tuning with the region-weighted loss."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import model as mdl
from .errors import NumericalError
from .flow import fm_target
from .losses import masked_loss, weight_matrix
from .optim import NamedAdam, trainable_names
from .synth import encode_tokens, load_corpus

log = logging.getLogger(__name__)

LOSS_MODES = ("weighted_mask", "plain")
# Training times are drawn from U(T_MIN, 1): the 10-step sampler never
# evaluates the model below t = 0.1, so capacity spent there is wasted.
T_MIN = 0.1


@dataclass
class SftConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    init_seed: int = 0
    adapter_rank: int = 0
    pe_mode: str = "offset"
    loss_mode: str = "weighted_mask"
    image_size: int = 32
    token_patch: int = 4
    model_dim: int = 64
    heads: int = 4
    blocks: int = 4

    def __post_init__(self):
        if self.steps < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError("steps, lr must be non-negative and batch_size positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def model_config(self) -> mdl.ModelConfig:
        return mdl.ModelConfig(
            image_size=self.image_size,
            token_patch=self.token_patch,
            model_dim=self.model_dim,
            heads=self.heads,
            blocks=self.blocks,
            pe_mode=self.pe_mode,
            adapter_rank=self.adapter_rank,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SftConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    truth: torch.Tensor
    input: torch.Tensor
    refs: list
    instrs: list
    weights: torch.Tensor

    def __len__(self) -> int:
        return self.truth.shape[0]


class Dataset:
    """In-memory quadruples with precomputed weight maps."""

    def __init__(self, quads, loss_mode: str = "weighted_mask"):
        self.quads = list(quads)
        if not self.quads:
            raise ValueError("empty dataset")
        self.truth = torch.from_numpy(np.stack([q.truth for q in self.quads]))
        self.input = torch.from_numpy(np.stack([q.input for q in self.quads]))
        self.refs = [q.reference for q in self.quads]
        self.instrs = [encode_tokens(q.instruction) for q in self.quads]
        if loss_mode == "plain":
            w = np.ones((len(self.quads),) + self.quads[0].truth.shape[:2])
        else:
            w = np.stack([weight_matrix(q.mask) for q in self.quads])
        self.weights = torch.from_numpy(w)

    def __len__(self) -> int:
        return len(self.quads)

    def batch(self, idx) -> Batch:
        idx = [int(i) for i in idx]
        t = torch.as_tensor(idx)
        return Batch(self.truth[t], self.input[t], [self.refs[i] for i in idx], [self.instrs[i] for i in idx], self.weights[t])


def sft_loss(params, cfg: mdl.ModelConfig, batch: Batch, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Batch-mean weighted loss between predicted and target velocity."""
    x_t, v_star = fm_target(batch.truth, eps, t)
    v = mdl.forward(params, cfg, x_t, batch.input, batch.refs, batch.instrs, t)
    return masked_loss(v, v_star, batch.weights).mean()


def draw(rng: np.random.Generator, n_data: int, batch_size: int, shape, t_min: float = T_MIN) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    """Batch indices, times and noise for one step, in a fixed draw order."""
    idx = rng.integers(0, n_data, size=batch_size)
    t = torch.from_numpy(rng.uniform(t_min, 1.0, size=batch_size))
    eps = torch.from_numpy(rng.standard_normal((batch_size,) + tuple(shape)))
    return idx, t, eps


def sft_step(params, opt: NamedAdam, cfg: mdl.ModelConfig, batch: Batch, rng: np.random.Generator, step: int = 0, t=None, eps=None) -> float:
    """One Adam update on a batch; parameters in ``params`` are updated in place."""
    if t is None:
        t = torch.from_numpy(rng.uniform(T_MIN, 1.0, size=len(batch)))
    if eps is None:
        eps = torch.from_numpy(rng.standard_normal(tuple(batch.truth.shape)))
    opt.zero_grad()
    try:
        loss = sft_loss(params, cfg, batch, t, eps)
    except NumericalError as exc:
        raise NumericalError(f"SFT forward failed: {exc}", step=step) from exc
    if not torch.isfinite(loss):
        raise NumericalError("non-finite SFT loss", step=step)
    loss.backward()
    opt.step()
    return float(loss.detach())


def fmt(x: float) -> str:
    return repr(float(x))


def train_sft(
    manifest,
    cfg: SftConfig,
    out_path=None,
    log_path=None,
    init=None,
    resume=None,
    quads=None,
) -> ckpt_io.Checkpoint:
    """Train from scratch (or ``init`` / ``resume`` checkpoint) for ``cfg.steps`` total steps.

    Writes the checkpoint to ``out_path`` and a ``step,loss`` CSV to ``log_path``
    when given.  ``quads`` may be passed instead of loading ``manifest``.
    """
    torch.set_num_threads(1)
    mcfg = cfg.model_config()
    data = Dataset(quads if quads is not None else load_corpus(manifest), cfg.loss_mode)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    losses: list[tuple[int, float]] = []
    if resume is not None:
        state = resume if isinstance(resume, ckpt_io.Checkpoint) else ckpt_io.load(resume, mcfg)
        params = {k: v.clone() for k, v in state.params.items()}
        start = state.step
        rng.bit_generator.state = state.rng_state
        losses = [tuple(x) for x in state.meta.get("losses", [])]
    elif init is not None:
        state = init if isinstance(init, ckpt_io.Checkpoint) else ckpt_io.load(init)
        params = {k: v.clone() for k, v in state.params.items() if not mdl.is_adapter(k)}
        if mcfg.adapter_rank:
            params.update(mdl.init_adapter(mcfg, cfg.init_seed + 1))
        state = None
    else:
        params = mdl.init_params(mcfg, cfg.init_seed)
        state = None
    opt = NamedAdam(params, trainable_names(params, mcfg.adapter_rank), cfg.lr)
    if state is not None:
        opt.load_state_tensors(state.adam_m, state.adam_v, state.adam_step)
    shape = data.truth.shape[1:]
    for step in range(start, cfg.steps):
        idx, t, eps = draw(rng, len(data), cfg.batch_size, shape)
        loss = sft_step(params, opt, mcfg, data.batch(idx), rng, step, t, eps)
        losses.append((step + 1, loss))
        if (step + 1) % 100 == 0:
            log.info("sft step %d loss %.5f", step + 1, loss)
    m, v, adam_step = opt.state_tensors()
    result = ckpt_io.Checkpoint(
        mcfg,
        {k: p.detach().clone() for k, p in params.items()},
        cfg.steps,
        m,
        v,
        adam_step,
        rng.bit_generator.state,
        {"stage": "sft", "train_config": asdict(cfg), "losses": [[s, l] for s, l in losses]},
    )
    if out_path is not None:
        ckpt_io.save(out_path, result)
    if log_path is not None:
        write_log(log_path, ["step", "loss"], [(s, fmt(l)) for s, l in losses])
    return result


def write_log(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
