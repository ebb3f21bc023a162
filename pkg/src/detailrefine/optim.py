"""Thin wrapper around ``torch.optim.Adam`` over a named parameter dict."""

from __future__ import annotations

import torch

from .model import is_adapter


def trainable_names(params: dict, adapter_rank: int) -> list[str]:
    """Adapter factors only when an adapter is configured, otherwise every tensor."""
    if adapter_rank:
        return sorted(k for k in params if is_adapter(k))
    return sorted(params)


class NamedAdam:
    def __init__(self, params: dict, names: list[str], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        for k in params:
            params[k].requires_grad_(k in self.names)
        self.opt = torch.optim.Adam([params[k] for k in self.names], lr=lr, betas=betas, eps=eps, foreach=False)

    @property
    def step_count(self) -> int:
        states = [self.opt.state.get(self.params[k]) for k in self.names]
        return int(states[0]["step"]) if states and states[0] else 0

    def zero_grad(self) -> None:
        self.opt.zero_grad(set_to_none=True)

    def step(self) -> None:
        self.opt.step()

    def state_tensors(self) -> tuple[dict, dict, int]:
        m, v = {}, {}
        for k in self.names:
            st = self.opt.state.get(self.params[k])
            if st:
                m[k] = st["exp_avg"].detach().clone()
                v[k] = st["exp_avg_sq"].detach().clone()
        return m, v, self.step_count

    def load_state_tensors(self, m: dict, v: dict, step: int) -> None:
        if not m:
            return
        for k in self.names:
            p = self.params[k]
            self.opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": m[k].clone().to(p.dtype),
                "exp_avg_sq": v[k].clone().to(p.dtype),
            }
