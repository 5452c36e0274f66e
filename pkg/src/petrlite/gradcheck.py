"""Central finite-difference checks for ``DiffArray`` computations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffarray import DiffArray, Tape, backward, no_grad


@dataclass
class GradcheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    ok: bool


def numeric_grad(fn: Callable[[], DiffArray], x: DiffArray, h: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
    return out


def analytic_grads(fn: Callable[[], DiffArray], params: Sequence[DiffArray]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape():
        backward(fn())
    return [p.grad.copy() for p in params]


def gradcheck(
    fn: Callable[[], DiffArray],
    params: Sequence[DiffArray],
    rtol: float = 1e-4,
    atol: float = 1e-8,
    h: float = 1e-5,
    names: Sequence[str] | None = None,
) -> list[GradcheckResult]:
    """Compare analytic and numeric gradients of scalar ``fn`` w.r.t. ``params``.

    A component passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``.
    """
    analytic = analytic_grads(fn, params)
    results = []
    for k, (p, a) in enumerate(zip(params, analytic)):
        n = numeric_grad(fn, p, h)
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = err / np.maximum(scale, 1e-300)
        ok = bool(np.all(err <= atol + rtol * scale))
        name = names[k] if names else (p.name or f"param{k}")
        results.append(GradcheckResult(name, float(err.max(initial=0.0)),
                                       float(np.where(err > atol, rel, 0.0).max(initial=0.0)), ok))
    return results
