"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor, no_graph


class NonDeterministicError(ValueError):
    """Two forward evaluations at the same point disagreed."""


@dataclass
class GradCheckReport:
    coords: np.ndarray          # flat indices that were probed
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray      # NaN for excluded coordinates
    excluded: np.ndarray        # flat indices flagged as non-smooth
    tol: float

    @property
    def checked(self) -> int:
        return int(np.isfinite(self.rel_errors).sum())

    @property
    def max_error(self) -> float:
        finite = self.rel_errors[np.isfinite(self.rel_errors)]
        return float(finite.max()) if finite.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def relative_error(a, n, floor: float = 1e-8):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _scalar(f, x: np.ndarray) -> float:
    with no_graph():
        return float(np.asarray(f(Tensor(x)).data).sum())


def grad_check(f: Callable[[Tensor], Tensor], x0, step: float = 1e-5, tol: float = 1e-4,
               coords: Optional[Sequence[int]] = None, n_samples: Optional[int] = None,
               seed: int = 0, floor: Optional[float] = None) -> GradCheckReport:
    """Compare ``d f / d x`` from autodiff against central differences at ``x0``.

    ``f`` must build a scalar from its single Tensor argument and be a pure
    function of it. Coordinates where the one-sided differences at steps
    ``h`` and ``2h`` disagree in the way a kink does (the jump does not scale
    with the step) are reported in ``excluded`` and left out of the maximum.

    The relative error divides by ``max(|analytic|, |numeric|, floor)``. The
    default floor, ``1e-6·max(1, |f(x0)|)``, sits above the round-off of a
    float64 central difference (about ``eps·|f|/h``), so gradients far
    below the function's own scale are judged on that scale.
    """
    x0 = np.array(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    f0 = _scalar(f, x0)
    if _scalar(f, x0) != f0:
        raise NonDeterministicError("f returned different values for identical inputs")
    if floor is None:
        floor = 1e-6 * max(1.0, abs(f0))

    x = Tensor(x0.copy(), requires_grad=True)
    with Graph() as g:
        out = f(x)
        if out.size != 1:
            raise ValueError(f"f must return a scalar, got shape {out.shape}")
        g.backward(out)
    grad = x.grad.reshape(-1)

    if coords is None:
        total = x0.size
        if n_samples is None or n_samples >= total:
            coords = np.arange(total)
        else:
            coords = np.random.default_rng(seed).choice(total, size=n_samples, replace=False)
    coords = np.asarray(coords, dtype=np.int64)

    numeric = np.empty(len(coords))
    rel = np.empty(len(coords))
    excluded = []
    flat = x0.reshape(-1)
    for i, c in enumerate(coords):
        vals = {}
        for m in (-2, -1, 1, 2):
            xp = flat.copy()
            xp[c] += m * step
            vals[m] = _scalar(f, xp.reshape(x0.shape))
        numeric[i] = (vals[1] - vals[-1]) / (2 * step)
        fwd1, bwd1 = (vals[1] - f0) / step, (f0 - vals[-1]) / step
        fwd2, bwd2 = (vals[2] - f0) / (2 * step), (f0 - vals[-2]) / (2 * step)
        d1, d2 = fwd1 - bwd1, fwd2 - bwd2
        scale = max(abs(fwd1), abs(bwd1), 1.0)
        # smooth: d2 ≈ 2·d1 (both O(h·f'')); a kink gives d2 ≈ d1 (jump)
        if abs(d1) > 1e-4 * scale and not 1.5 < d2 / d1 < 2.5:
            excluded.append(int(c))
            rel[i] = np.nan
        else:
            rel[i] = relative_error(grad[c], numeric[i], floor)
    return GradCheckReport(coords=coords, analytic=grad[coords], numeric=numeric,
                           rel_errors=rel, excluded=np.asarray(excluded, dtype=np.int64),
                           tol=tol)
