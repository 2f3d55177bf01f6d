"""Central finite-difference verification of the tape's gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    """|a - b| relative to the larger magnitude, never dividing by less than ``floor``."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` is called with no arguments and must rebuild the scalar loss from
    the current contents of ``params`` (which are perturbed in place). When
    ``max_coords`` is given, at most that many coordinates per parameter are
    probed, chosen by ``rng``. ``floor`` bounds the denominator of the
    relative error so that gradients near zero, which a central difference
    resolves only to about ``eps * |loss| / h``, are compared absolutely.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
        p.requires_grad = True
    loss = f()
    again = f()
    if loss.data.tobytes() != again.data.tobytes():
        raise ValueError("function under test is not deterministic")
    backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[i]), numeric, floor))
    return worst
