"""Central finite-difference oracle for verifying analytic gradients."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, zero_grad

__all__ = ["grad_check"]


def grad_check(f, params: list[Tensor], eps: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar functional against central differences.

    ``f`` takes no arguments, closes over ``params`` and rebuilds the graph on
    every call. Returns the maximum over all parameter elements of
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)`` where ``fd`` is the
    central difference ``(f(x+eps) - f(x-eps)) / (2*eps)``.
    """
    zero_grad(params)
    out = f()
    if out.data.size != 1 or not np.all(np.isfinite(out.data)):
        raise ValueError("grad_check requires a finite scalar forward value")
    out.backward()
    analytic = [
        (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    ]

    max_rel = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(an_flat[i] - fd) / max(abs(an_flat[i]), abs(fd), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
