"""Finite-difference gradient oracle.

Central differences against the tape gradient, elementwise, with the
relative-error denominator max(|a|, |b|, 1e-8). Meaningful only with
float64 parameters; callers build their model in float64 for checks.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .errors import NumericError


def finite_diff_check(f, params, h: float = 1e-5) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar loss Tensor; it must
    be deterministic and must read the Parameter objects in ``params`` (they
    are perturbed in place). ``f`` is evaluated once under a tape for the
    analytic gradients and twice per parameter element for the differences.
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradient check: loss is not finite")
    grad_map = tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = grad_map.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(f(), p)
            flat[i] = orig - h
            down = _scalar(f(), p)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = float(aflat[i])
            err = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            if err > worst:
                worst = err
    return worst


def _scalar(loss: Tensor, param) -> float:
    v = float(loss.data)
    if not np.isfinite(v):
        raise NumericError(f"gradient check: non-finite loss while perturbing {param!r}")
    return v
