"""Central finite-difference gradient checks for scalar torch functions."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def numeric_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-5):
    """Central differences of ``fn(*inputs)`` w.r.t. every element of every input."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn(*inputs))
                flat[i] = orig - h
                down = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if not out.requires_grad:
        # constant in every input: autograd has no graph to walk
        return [torch.zeros_like(x) for x in leaves]
    return list(torch.autograd.grad(out, leaves, allow_unused=True))


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), floor)
    return num / den


def check_gradient(fn, inputs: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Largest relative error between autograd and central differences over all inputs."""
    inputs = [x.detach().clone().double() for x in inputs]
    num = numeric_grad(fn, inputs, h)
    ana = analytic_grad(fn, inputs)
    worst = 0.0
    for a, n in zip(ana, num):
        a = torch.zeros_like(n) if a is None else a
        worst = max(worst, relative_error(a, n))
    return worst
