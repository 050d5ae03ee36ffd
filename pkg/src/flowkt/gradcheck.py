"""Central finite-difference gradient checks for scalar losses."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def finite_difference_grads(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            eps: float = 1e-6) -> list[torch.Tensor]:
    """Central differences of ``fn()`` w.r.t. each element of ``params`` (perturbed in place)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def autodiff_grads(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    out = fn()
    grads = torch.autograd.grad(out, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def relative_error(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over the concatenated gradients."""
    va = torch.cat([x.reshape(-1) for x in a])
    vb = torch.cat([x.reshape(-1) for x in b])
    scale = max(float(va.norm()), float(vb.norm()), 1e-30)
    return float((va - vb).norm()) / scale


def check_gradients(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                    eps: float = 1e-6) -> float:
    """Relative error between autodiff and central-difference gradients."""
    return relative_error(autodiff_grads(fn, params), finite_difference_grads(fn, params, eps))
