"""Flow-matching targets, Euler ODE sampling and the stochastic (SDE) sampler.

Convention: ``x_t = (1 - t) * x0 + t * eps`` with target velocity
``v* = eps - x0``; ``t = 1`` is pure noise, ``t = 0`` is data.  Sampling runs
from ``t = 1`` down to ``t = 0`` on a uniform grid.

The stochastic step keeps the ODE marginals by adding a score correction
to the Euler mean and Gaussian noise of standard deviation
``eta * sqrt(dt * t)``::

    x0_hat = x - t * v
    mean   = x - dt * v - (eta**2 * dt / (2 * t)) * (x - (1 - t) * x0_hat)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as mdl
from .errors import DegenerateDensityError, NumericalError, ShapeError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 10
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    def times(self) -> np.ndarray:
        """Strictly decreasing grid ``1 = t_T > ... > t_0 = 0``."""
        return np.linspace(1.0, 0.0, self.steps + 1)

    def transitions(self) -> list[tuple[float, float]]:
        ts = self.times()
        return [(float(ts[k]), float(ts[k] - ts[k + 1])) for k in range(self.steps)]


def fm_target(x0, eps, t):
    """Interpolant and target velocity; ``t`` may be a scalar or per-row ``(B,)``."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    if isinstance(t, torch.Tensor) and t.dim() == 1 and x0.dim() > 1:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    elif isinstance(t, np.ndarray) and t.ndim == 1 and x0.ndim > 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1 - t) * x0 + t * eps, eps - x0


def ode_step(x, v, t: float, dt: float):
    if dt <= 0 or t - dt < -1e-12:
        raise ValueError(f"invalid Euler step t={t}, dt={dt}")
    return x - dt * v


def sde_std(t: float, dt: float, eta: float) -> float:
    return eta * math.sqrt(dt * t)


def sde_mean(x, v, t: float, dt: float, eta: float):
    """Mean of the stochastic transition; equals the Euler step when ``eta = 0``."""
    if eta == 0:
        return x - dt * v
    x0_hat = x - t * v
    c = eta * eta * dt / (2.0 * t)
    return x - dt * v - c * (x - (1.0 - t) * x0_hat)


def gaussian_log_prob(x, mean, std: float):
    """Log-density of ``x`` under ``N(mean, std^2 I)``, summed over all but the leading axis.

    ``std = 0`` is a point mass: the log-probability is 0 by convention when
    ``x == mean`` and undefined otherwise.
    """
    lead = x.shape[0] if x.dim() > 1 else 1
    diff = (x - mean).reshape(lead, -1)
    if std == 0:
        if torch.any(diff != 0):
            raise DegenerateDensityError("zero-variance transition with sample away from its mean")
        return diff.new_zeros(lead)
    d = diff.shape[1]
    return -(diff**2).sum(dim=1) / (2.0 * std * std) - d * (math.log(std) + LOG_SQRT_2PI)


@dataclass
class SdeStep:
    t: float
    dt: float
    mean: torch.Tensor
    std: float
    sample: torch.Tensor
    log_prob: torch.Tensor


def sde_step(x, v, t: float, dt: float, eta: float, rng: np.random.Generator | None = None, noise=None) -> SdeStep:
    """One stochastic transition from ``t`` to ``t - dt`` for a batch ``(B, ...)``."""
    if not 0 < t <= 1:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    mean = sde_mean(x, v, t, dt, eta)
    std = sde_std(t, dt, eta)
    if std == 0:
        return SdeStep(t, dt, mean, 0.0, mean, mean.new_zeros(mean.shape[0]))
    if noise is None:
        noise = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    sample = mean + std * noise.to(mean.dtype)
    return SdeStep(t, dt, mean, std, sample, gaussian_log_prob(sample, mean, std))


# -- trajectories ------------------------------------------------------------------


@dataclass
class Condition:
    """Conditioning shared by all rollouts of one prompt."""

    input: np.ndarray
    reference: np.ndarray
    instruction: list[int]

    @classmethod
    def from_quadruple(cls, quad) -> "Condition":
        from .synth import encode_tokens

        return cls(quad.input, quad.reference, encode_tokens(quad.instruction))

    def repeat(self, n: int):
        inp = torch.as_tensor(self.input, dtype=mdl.DTYPE).unsqueeze(0).expand(n, *self.input.shape)
        return inp, [self.reference] * n, [list(self.instruction)] * n


@dataclass
class Trajectory:
    """A sampled path; ``states[0]`` is the initial noise, ``states[k + 1]`` the sample after step ``k``."""

    schedule: NoiseSchedule
    states: torch.Tensor  # (T + 1, H, W, C)
    means: torch.Tensor  # (T, H, W, C)
    stds: list[float]
    log_probs: torch.Tensor  # (T,)
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def initial_noise(self) -> torch.Tensor:
        return self.states[0]

    @property
    def terminal(self) -> torch.Tensor:
        return self.states[-1]

    @property
    def steps(self) -> list[SdeStep]:
        return [
            SdeStep(t, dt, self.means[k], self.stds[k], self.states[k + 1], self.log_probs[k])
            for k, (t, dt) in enumerate(self.schedule.transitions())
        ]


@torch.no_grad()
def sample_batch(params, cfg, cond: Condition, noise: torch.Tensor, schedule: NoiseSchedule, rng=None):
    """Integrate a batch of noises; returns ``(states, means, stds, log_probs)`` stacked over steps."""
    n = noise.shape[0]
    inp, refs, instrs = cond.repeat(n)
    x = noise
    states, means, stds, lps = [x], [], [], []
    for k, (t, dt) in enumerate(schedule.transitions()):
        try:
            v = mdl.forward(params, cfg, x, inp, refs, instrs, torch.full((n,), t, dtype=mdl.DTYPE))
        except NumericalError as exc:
            raise NumericalError(f"rollout failed: {exc}", step=k) from exc
        step = sde_step(x, v, t, dt, schedule.eta, rng)
        x = step.sample
        states.append(x)
        means.append(step.mean)
        stds.append(step.std)
        lps.append(step.log_prob)
    return torch.stack(states, 1), torch.stack(means, 1), stds, torch.stack(lps, 1)


def initial_noise(shape, seed: int) -> torch.Tensor:
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(tuple(shape)))


def rollout_group(params, cfg, cond: Condition, schedule: NoiseSchedule, group: int, seed: int, shared_noise: bool = False) -> list[Trajectory]:
    """Sample ``group`` trajectories for one prompt from a single seeded generator.

    With ``shared_noise`` every trajectory starts from the same initial noise,
    so the group differs only through the stochastic transitions.
    """
    rng = np.random.default_rng(seed)
    h, w, c = cond.input.shape
    if shared_noise:
        noise = torch.from_numpy(rng.standard_normal((1, h, w, c))).expand(group, h, w, c).clone()
    else:
        noise = torch.from_numpy(rng.standard_normal((group, h, w, c)))
    states, means, stds, lps = sample_batch(params, cfg, cond, noise, schedule, rng)
    return [Trajectory(schedule, states[i], means[i], list(stds), lps[i], seed) for i in range(group)]


def rollout(params, cfg, quad, schedule: NoiseSchedule, eta: float | None = None, seed: int = 0) -> Trajectory:
    if eta is not None and eta != schedule.eta:
        schedule = NoiseSchedule(schedule.steps, eta)
    cond = quad if isinstance(quad, Condition) else Condition.from_quadruple(quad)
    if cond.input.shape[0] != cfg.image_size or cond.input.shape[1] != cfg.image_size:
        raise ShapeError(f"quadruple size {cond.input.shape[:2]} does not match model image_size {cfg.image_size}")
    return rollout_group(params, cfg, cond, schedule, 1, seed)[0]


def step_means(params, cfg, cond: Condition, trajectories: list[Trajectory]) -> torch.Tensor:
    """Recompute transition means for every (trajectory, step) under ``params``; shape ``(G, T, H, W, C)``.

    Differentiable with respect to ``params``.
    """
    schedule = trajectories[0].schedule
    trans = schedule.transitions()
    g, steps = len(trajectories), len(trans)
    x = torch.stack([tr.states[:-1] for tr in trajectories])  # (G, T, H, W, C)
    flat = x.reshape(g * steps, *x.shape[2:])
    ts = torch.tensor([t for t, _ in trans] * g, dtype=mdl.DTYPE)
    inp, refs, instrs = cond.repeat(g * steps)
    v = mdl.forward(params, cfg, flat, inp, refs, instrs, ts).reshape(x.shape)
    out = []
    for k, (t, dt) in enumerate(trans):
        out.append(sde_mean(x[:, k], v[:, k], t, dt, schedule.eta))
    return torch.stack(out, 1)


def log_prob_under(params, cfg, cond: Condition, trajectories, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Per-step log-densities ``(G, T)`` of the recorded transitions under ``params``."""
    single = isinstance(trajectories, Trajectory)
    trs = [trajectories] if single else list(trajectories)
    sched = trs[0].schedule
    if schedule is not None and schedule != sched:
        raise ValueError(f"schedule mismatch: trajectory {sched}, requested {schedule}")
    if sched.eta <= 0:
        raise ValueError("log-probabilities need a stochastic trajectory (eta > 0)")
    means = step_means(params, cfg, cond, trs)
    nxt = torch.stack([tr.states[1:] for tr in trs])
    cols = []
    for k, (t, dt) in enumerate(sched.transitions()):
        cols.append(gaussian_log_prob(nxt[:, k], means[:, k], sde_std(t, dt, sched.eta)))
    lp = torch.stack(cols, 1)
    return lp[0] if single else lp
