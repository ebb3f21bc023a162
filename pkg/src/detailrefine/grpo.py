"""Group-relative policy optimisation over stochastic sampling trajectories.

For each prompt a group of ``G`` trajectories is sampled with the SDE
sampler under a frozen snapshot of the current parameters.  Each terminal
image is composited into the input over the region and scored; rewards are
standardised within the group to advantages.  The update ascends::

    mean_{i,t} min(r * A, clip(r, 1 - eps, 1 + eps) * A) - beta * KL(current || reference)

where ``r`` is the per-step transition probability ratio against the
rollout snapshot and the KL is the per-step Gaussian divergence from the
frozen reference (SFT) policy, averaged per dimension, over steps and over
rollouts.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import model as mdl
from .embedder import FrozenEmbedder
from .errors import DegenerateDensityError, NumericalError
from .flow import Condition, NoiseSchedule, Trajectory, gaussian_log_prob, rollout_group, sde_std, step_means
from .imaging import composite_masked
from .optim import NamedAdam, trainable_names
from .rewards import RewardBreakdown, score
from .sft import fmt, write_log
from .synth import load_corpus

log = logging.getLogger(__name__)

REWARD_LOG_HEADER = ["step", "mean_r_ds", "mean_r_mm", "mean_total", "kl", "clip_frac"]


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.01
    lam: float = 0.5
    eta: float = 0.2
    sample_steps: int = 10
    steps: int = 200
    prompts_per_step: int = 1
    lr: float = 1e-4
    std_floor: float = 1e-6
    reward_patch: int = 8
    embedder_seed: int = 1234
    adapter_rank: int = 0
    shared_noise: bool = False
    prompt_pool: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.eta <= 0:
            raise ValueError("GRPO needs stochastic rollouts (eta > 0)")

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sample_steps, self.eta)

    @classmethod
    def from_dict(cls, d: dict) -> "GrpoConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def advantages(rewards, std_floor: float = 1e-6) -> np.ndarray:
    """Standardise rewards within a group (population std, floored)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least 2 rewards")
    return (r - r.mean()) / max(r.std(), std_floor)


def clipped_surrogate(ratio, adv, eps: float):
    """``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``, elementwise; numpy or torch."""
    if isinstance(ratio, torch.Tensor):
        return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def gaussian_kl_shared_std(mu_p, mu_q, std: float):
    """Per-dimension mean of ``KL(N(mu_p, s^2) || N(mu_q, s^2))`` over all but the leading axis."""
    if std == 0:
        raise DegenerateDensityError("KL between zero-variance transitions")
    lead = mu_p.shape[0] if mu_p.dim() > 1 else 1
    diff = (mu_p - mu_q).reshape(lead, -1)
    return (diff**2).mean(dim=1) / (2.0 * std * std)


def kl_from_means(means, ref_means, schedule: NoiseSchedule) -> torch.Tensor:
    """Average per-step KL for means shaped ``(G, T, ...)``."""
    cols = []
    for k, (t, dt) in enumerate(schedule.transitions()):
        cols.append(gaussian_kl_shared_std(means[:, k], ref_means[:, k], sde_std(t, dt, schedule.eta)))
    return torch.stack(cols, 1).mean()


def kl_penalty(params, ref_params, cfg: mdl.ModelConfig, cond: Condition, trajectories: list[Trajectory]) -> torch.Tensor:
    schedule = trajectories[0].schedule
    means = step_means(params, cfg, cond, trajectories)
    with torch.no_grad():
        ref = step_means(ref_params, cfg, cond, trajectories)
    return kl_from_means(means, ref, schedule)


@dataclass
class Group:
    """One prompt's rollouts with their scores."""

    cond: Condition
    trajectories: list[Trajectory]
    rewards: list[RewardBreakdown]


def group_objective(params, ref_means, cfg: mdl.ModelConfig, group: Group, gcfg: GrpoConfig) -> tuple[torch.Tensor, dict]:
    """GRPO objective for one group (to be maximised) and its diagnostics."""
    trs = group.trajectories
    schedule = trs[0].schedule
    adv = torch.from_numpy(advantages([r.total for r in group.rewards], gcfg.std_floor))
    means = step_means(params, cfg, group.cond, trs)
    nxt = torch.stack([tr.states[1:] for tr in trs])
    cols = []
    for k, (t, dt) in enumerate(schedule.transitions()):
        cols.append(gaussian_log_prob(nxt[:, k], means[:, k], sde_std(t, dt, schedule.eta)))
    new_lp = torch.stack(cols, 1)
    old_lp = torch.stack([tr.log_probs for tr in trs])
    ratio = torch.exp(new_lp - old_lp)
    surr = clipped_surrogate(ratio, adv[:, None], gcfg.clip_eps).mean()
    kl = kl_from_means(means, ref_means, schedule) if ref_means is not None else means.new_zeros(())
    objective = surr - gcfg.beta * kl
    with torch.no_grad():
        clipped = ((ratio < 1 - gcfg.clip_eps) | (ratio > 1 + gcfg.clip_eps)).to(torch.float64).mean()
    stats = {"ratio": float(ratio.detach().mean()), "clip_frac": float(clipped), "kl": float(kl.detach()), "surrogate": float(surr.detach())}
    return objective, stats


def grpo_update(params, opt: NamedAdam, ref_params, cfg: mdl.ModelConfig, groups: list[Group], gcfg: GrpoConfig, step: int = 0) -> dict:
    """One gradient step on ``-objective`` averaged over the prompt groups."""
    opt.zero_grad()
    agg = {"ratio": 0.0, "clip_frac": 0.0, "kl": 0.0, "surrogate": 0.0}
    for group in groups:
        ref_means = None
        if gcfg.beta:
            with torch.no_grad():
                ref_means = step_means(ref_params, cfg, group.cond, group.trajectories)
        obj, stats = group_objective(params, ref_means, cfg, group, gcfg)
        if not torch.isfinite(obj):
            raise NumericalError(f"non-finite GRPO objective: {stats}", step=step)
        (-obj / len(groups)).backward()
        for k in agg:
            agg[k] += stats[k] / len(groups)
    opt.step()
    rewards = [r for g in groups for r in g.rewards]
    agg["mean_r_ds"] = float(np.mean([r.r_ds for r in rewards]))
    agg["mean_r_mm"] = float(np.mean([r.r_mm for r in rewards]))
    agg["mean_total"] = float(np.mean([r.total for r in rewards]))
    return agg


def score_group(cond: Condition, quad, trajectories, embedder, gcfg: GrpoConfig) -> list[RewardBreakdown]:
    out = []
    for tr in trajectories:
        pred = np.clip(tr.terminal.numpy(), 0.0, 1.0)
        refined = composite_masked(pred, quad.input, quad.mask)
        out.append(score(refined, quad.truth, quad.mask, embedder, gcfg.reward_patch, gcfg.lam))
    return out


def collect(params, cfg: mdl.ModelConfig, quad, gcfg: GrpoConfig, embedder, seed: int) -> Group:
    cond = Condition.from_quadruple(quad)
    trs = rollout_group(params, cfg, cond, gcfg.schedule, gcfg.group_size, seed, gcfg.shared_noise)
    return Group(cond, trs, score_group(cond, quad, trs, embedder, gcfg))


def train_grpo(init, manifest, gcfg: GrpoConfig, out_path=None, log_path=None, quads=None) -> ckpt_io.Checkpoint:
    """RL fine-tuning starting from (and KL-anchored to) an SFT checkpoint."""
    torch.set_num_threads(1)
    sft = init if isinstance(init, ckpt_io.Checkpoint) else ckpt_io.load(init)
    data = list(quads) if quads is not None else load_corpus(manifest)
    ref_params = {k: v.detach().clone() for k, v in mdl.apply_adapter(sft.params, None, sft.config.adapter_rank).items()}
    base_cfg = mdl.ModelConfig(**{**sft.config.to_dict(), "adapter_rank": 0})
    if gcfg.adapter_rank:
        cfg = mdl.ModelConfig(**{**base_cfg.to_dict(), "adapter_rank": gcfg.adapter_rank})
        params = {k: v.clone() for k, v in ref_params.items()}
        params.update(mdl.init_adapter(cfg, gcfg.seed + 1))
    else:
        cfg = base_cfg
        params = {k: v.clone() for k, v in ref_params.items()}
    opt = NamedAdam(params, trainable_names(params, cfg.adapter_rank), gcfg.lr)
    embedder = FrozenEmbedder(gcfg.embedder_seed)
    rng = np.random.default_rng(gcfg.seed)
    pool = None
    if gcfg.prompt_pool:
        pool = [int(i) for i in rng.choice(len(data), size=min(gcfg.prompt_pool, len(data)), replace=False)]
    rows = []
    for step in range(gcfg.steps):
        if pool is None:
            idx = rng.integers(0, len(data), size=gcfg.prompts_per_step)
        else:
            idx = [pool[(step * gcfg.prompts_per_step + j) % len(pool)] for j in range(gcfg.prompts_per_step)]
        seeds = rng.integers(0, 2**63 - 1, size=gcfg.prompts_per_step)
        snapshot = {k: v.detach().clone() for k, v in params.items()}
        groups = [collect(snapshot, cfg, data[int(i)], gcfg, embedder, int(s)) for i, s in zip(idx, seeds)]
        stats = grpo_update(params, opt, ref_params, cfg, groups, gcfg, step)
        rows.append((step + 1, stats["mean_r_ds"], stats["mean_r_mm"], stats["mean_total"], stats["kl"], stats["clip_frac"]))
        if (step + 1) % 20 == 0:
            log.info("grpo step %d reward %.5f kl %.3g", step + 1, stats["mean_total"], stats["kl"])
    m, v, adam_step = opt.state_tensors()
    result = ckpt_io.Checkpoint(
        cfg,
        {k: p.detach().clone() for k, p in params.items()},
        gcfg.steps,
        m,
        v,
        adam_step,
        rng.bit_generator.state,
        {"stage": "grpo", "train_config": asdict(gcfg), "init_step": sft.step, "rewards": [list(r) for r in rows]},
    )
    if out_path is not None:
        ckpt_io.save(out_path, result)
    if log_path is not None:
        write_log(log_path, REWARD_LOG_HEADER, [(r[0],) + tuple(fmt(x) for x in r[1:]) for r in rows])
    return result
