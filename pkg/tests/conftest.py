import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    np.random.seed(0)


def finite_difference_grads(loss_fn, params, eps=1e-6):
    """Central finite differences of loss_fn() w.r.t. each tensor in params."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_relative_grad_error(loss_fn, params, eps=1e-6):
    """Max relative error between analytic and finite-difference gradients.

    Relative error is |a - n| / max(1, |a|, |n|) per element, so tiny
    gradients are compared absolutely.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    numeric = finite_difference_grads(loss_fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1.0)
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst
