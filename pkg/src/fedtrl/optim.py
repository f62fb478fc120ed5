"""Adapter around ``torch.optim.Adam`` that takes gradients as a name->tensor
mapping and exposes its moment buffers for checkpointing."""

from __future__ import annotations

from collections import OrderedDict

import torch


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = OrderedDict(params)
        self.opt = torch.optim.Adam(
            list(self.params.values()), lr=lr, betas=betas, eps=eps, foreach=False
        )

    @property
    def t(self) -> int:
        states = [self.opt.state.get(p) for p in self.params.values()]
        return int(states[0]["step"]) if states and states[0] else 0

    def step(self, grads) -> None:
        for k, p in self.params.items():
            p.grad = grads[k]
        self.opt.step()
        for p in self.params.values():
            p.grad = None

    def state_tensors(self, prefix="adam"):
        out = OrderedDict()
        for k, p in self.params.items():
            st = self.opt.state.get(p)
            out[f"{prefix}.m.{k}"] = st["exp_avg"] if st else torch.zeros_like(p)
            out[f"{prefix}.v.{k}"] = st["exp_avg_sq"] if st else torch.zeros_like(p)
        return out

    def load_state_tensors(self, tensors, t: int, prefix="adam") -> None:
        self.opt.state.clear()
        if t == 0:
            return
        for k, p in self.params.items():
            self.opt.state[p] = {
                "step": torch.tensor(float(t)),
                "exp_avg": tensors[f"{prefix}.m.{k}"].clone(),
                "exp_avg_sq": tensors[f"{prefix}.v.{k}"].clone(),
            }
