"""Shared test helpers: finite differences and scalar oracles."""

import numpy as np
import torch


def finite_difference_check(loss_fn, module: torch.nn.Module,
                            eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    loss_fn() must evaluate the scalar loss from the module's current
    parameters. The module should be in double precision. The error per
    parameter tensor is ||g_a - g_n|| / max(||g_a||, ||g_n||, 1e-8).
    """
    params = [p for p in module.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for p in params]

    worst = 0.0
    with torch.no_grad():
        for p, grad_a in zip(params, analytic):
            grad_n = torch.zeros_like(p)
            flat = p.view(-1)
            flat_n = grad_n.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                hi = loss_fn().item()
                flat[i] = original - eps
                lo = loss_fn().item()
                flat[i] = original
                flat_n[i] = (hi - lo) / (2 * eps)
            denom = max(grad_a.norm().item(), grad_n.norm().item(), 1e-8)
            worst = max(worst, (grad_a - grad_n).norm().item() / denom)
    return worst


def scalar_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-python cosine with the zero-norm-gives-zero convention."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    num = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(a, b):
        num += x * y
        norm_a += x * x
        norm_b += y * y
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return num / (np.sqrt(norm_a) * np.sqrt(norm_b))


def scalar_distance_score(fx: np.ndarray, fc: np.ndarray, alpha: float,
                          lam: float) -> float:
    """Loop oracle for the distance-head probability on (d, r, r) grids.

    Flattened-map cosine and pooled-vector cosine mixed by alpha, then the
    sharp logistic.
    """
    fx = np.asarray(fx, dtype=np.float64)
    fc = np.asarray(fc, dtype=np.float64)
    vx = np.array([fx[c].mean() for c in range(fx.shape[0])])
    vc = np.array([fc[c].mean() for c in range(fc.shape[0])])
    combined = (1 - alpha) * scalar_cosine(fx.reshape(-1), fc.reshape(-1)) \
        + alpha * scalar_cosine(vx, vc)
    return 1.0 / (1.0 + np.exp(-lam * combined))
