"""Differentiation primitives shared by every training objective.

Reverse mode is delegated to torch autograd in float64. This module adds the
gradient reversal node, a checked ``backward`` that names the offending
parameter when something goes non-finite, and an independent central
difference oracle used by the test-suite.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch

DTYPE = torch.float64


class NonFiniteGradientError(FloatingPointError):
    pass


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def gradient_reversal(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-lam``."""
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return _GradReverse.apply(x, lam)


class GradientReversal(torch.nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        if lam < 0:
            raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")
        self.lam = float(lam)

    def forward(self, x):
        return gradient_reversal(x, self.lam)


def backward(
    output: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    retain_graph: bool = False,
) -> dict[str, torch.Tensor]:
    """Return d(output)/d(param) for every named parameter.

    Parameters that do not influence ``output`` get an all-zero gradient.
    Raises ``ValueError`` for non-scalar output and ``NonFiniteGradientError``
    naming the first non-finite node encountered.
    """
    if output.numel() != 1:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    if not torch.isfinite(output).all():
        raise NonFiniteGradientError(f"non-finite output value {output.item()}")
    names = list(params)
    tensors = [params[n] for n in names]
    if not output.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(
        output.reshape(()), tensors, retain_graph=retain_graph, allow_unused=True
    )
    out = {}
    for name, t, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient at parameter '{name}'")
        out[name] = g
    return out


def finite_difference_oracle(
    f: Callable[[Sequence[torch.Tensor]], torch.Tensor | float],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
) -> list[torch.Tensor]:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate.

    ``f`` receives a list of detached parameter copies and must be deterministic.
    A scalar ``f`` gives one tensor shaped like each parameter; a vector ``f``
    of length ``m`` gives tensors of shape ``(*p.shape, m)``, one column per
    output, at no extra evaluations.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [p.detach().clone() for p in params]
    grads = []
    with torch.no_grad():
        out_shape = torch.as_tensor(f(base), dtype=torch.float64).shape
        for i, p in enumerate(base):
            g = torch.zeros(p.numel(), *out_shape, dtype=torch.float64)
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                fp = torch.as_tensor(f(base), dtype=torch.float64)
                flat[j] = orig - step
                fm = torch.as_tensor(f(base), dtype=torch.float64)
                flat[j] = orig
                g[j] = (fp - fm) / (2 * step)
            grads.append(g.reshape(*p.shape, *out_shape))
    return grads


def max_relative_deviation(
    analytic: Sequence[torch.Tensor],
    numeric: Sequence[torch.Tensor],
    zero_threshold: float = 1e-3,
) -> tuple[float, float]:
    """(max relative error over |g| >= threshold, max absolute error elsewhere).

    The default threshold is where a 1e-4 relative and a 1e-7 absolute
    tolerance coincide.
    """
    rel, ab = 0.0, 0.0
    for a, n in zip(analytic, numeric):
        a = a.detach().reshape(-1)
        n = n.detach().reshape(-1)
        big = n.abs() >= zero_threshold
        if big.any():
            rel = max(rel, ((a[big] - n[big]).abs() / n[big].abs()).max().item())
        if (~big).any():
            ab = max(ab, (a[~big] - n[~big]).abs().max().item())
    return rel, ab
