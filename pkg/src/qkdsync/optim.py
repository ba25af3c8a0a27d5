"""Small deterministic 1-D search used by period recovery and the parameter optimiser."""

from __future__ import annotations

import math
from typing import Callable

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float, max_iter: int = 200) -> float:
    """Minimise a unimodal ``f`` on ``[a, b]`` until the bracket is narrower than ``tol``."""
    if a > b:
        a, b = b, a
    c = b - INVPHI * (b - a)
    d = a + INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INVPHI * (b - a)
            fd = f(d)
    return c if fc <= fd else d
