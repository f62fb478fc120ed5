"""Training objectives for the local update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_dom: float = 0.1
    lambda_align: float = 0.1
    grl_lambda: float = 1.0
    nll_beta: float = 0.0
    nu: float = 5.0

    def __post_init__(self):
        for name in ("lambda_dom", "lambda_align", "grl_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.nll_beta <= 1.0:
            raise ValueError("nll_beta must lie in [0, 1]")
        if self.nu <= 2:
            raise ValueError("nu must exceed 2")


@dataclass(frozen=True)
class WarmupSchedule:
    warm_rounds: int = 0
    anneal_rounds: int = 1

    def __post_init__(self):
        if self.warm_rounds < 0 or self.anneal_rounds < 1:
            raise ValueError("need warm_rounds >= 0 and anneal_rounds >= 1")


def beta_schedule(round_idx: int, schedule: WarmupSchedule) -> float:
    """0 during warm-up, then a linear ramp reaching exactly 1."""
    if round_idx < schedule.warm_rounds:
        return 0.0
    frac = (round_idx - schedule.warm_rounds) / schedule.anneal_rounds
    return min(1.0, max(0.0, frac))


def student_t_nll(y, mu, sigma, nu: float = 5.0):
    """Mean of ``0.5 log(pi (nu-2) sigma^2) + (nu+1)/2 log(1 + r^2 / ((nu-2) sigma^2))``.

    The Gamma-function normaliser is left out; with ``nu`` fixed it is an
    additive constant. ``sigma`` is the standard deviation of the distribution.
    """
    if nu <= 2:
        raise ValueError("nu must exceed 2")
    if (torch.as_tensor(sigma) <= 0).any():
        raise ValueError("sigma must be strictly positive")
    y, mu, sigma = (torch.as_tensor(v, dtype=torch.float64) for v in (y, mu, sigma))
    scale2 = (nu - 2.0) * sigma**2
    nll = 0.5 * torch.log(math.pi * scale2) + 0.5 * (nu + 1.0) * torch.log1p((y - mu) ** 2 / scale2)
    return nll.mean()


def student_t_log_normalizer(nu: float) -> float:
    """``log Gamma((nu+1)/2) - log Gamma(nu/2)``: full NLL = student_t_nll - this."""
    return math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2)


def mse(y, yhat):
    return ((y - yhat) ** 2).mean()


def task_loss(y, xhat, mu, sigma, nu: float = 5.0, beta: float = 0.0):
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    shapes = {tuple(t.shape) for t in (y, xhat, mu, sigma)}
    if len(shapes) != 1:
        raise ValueError(f"task_loss shape mismatch: {sorted(shapes)}")
    loss = mse(y, xhat)
    if beta > 0.0:
        loss = loss + beta * student_t_nll(y, mu, sigma, nu)
    return loss


def domain_loss(logits, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"sub-domain label outside [0, {C})")
    return F.cross_entropy(logits, labels)


def align_loss(proto, global_proto):
    """Squared distance to the broadcast global prototype (treated as a constant)."""
    global_proto = torch.as_tensor(global_proto, dtype=proto.dtype).detach()
    if proto.shape[-1] != global_proto.shape[-1]:
        raise ValueError("prototype dimension mismatch")
    return ((proto - global_proto) ** 2).sum(-1).mean()


def total_loss(task, dom, align, weights: LossWeights):
    return task + weights.lambda_dom * dom + weights.lambda_align * align
