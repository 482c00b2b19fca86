"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GradTape, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    mean_rel_error: float
    checked: int
    skipped_kinks: int
    worst: Optional[tuple] = None  # (param index, flat index, analytic, numeric)
    per_param: list = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = 24,
    seed: int = 0,
    floor: float = 1e-6,
    kink_tol: float = 1e-5,
) -> GradCheckResult:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must read the current values of ``params`` each time it is called.
    At most ``max_coords`` coordinates per parameter are checked, chosen by a
    ``numpy.random.default_rng(seed)`` permutation (all of them when ``None``).

    Coordinates near a kink (ReLU at 0, max-pool ties) are counted as
    skipped rather than checked.  Two tests find them, neither of which looks
    at the analytic gradient:

    * the forward and backward one-sided differences disagree by more than
      ``1e-3 * max(1, |central|)`` (a kink right at the point), or
    * the central differences at ``eps`` and ``eps / 2`` differ by more than
      ``kink_tol * max(|central|, floor)``.  On a smooth stretch they agree to
      O(eps^2), so this catches a kink anywhere inside the interval.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"gradient checks need double precision, got {p.dtype} for {p.name or 'parameter'}")
        p.requires_grad = True

    with GradTape() as tape:
        loss = f()
    analytic = tape.gradient(loss, params)

    f0 = float(loss.data)

    def central(p: Tensor, base: np.ndarray, k: int, h: float) -> tuple[float, float]:
        plus = base.copy()
        plus.reshape(-1)[k] += h
        minus = base.copy()
        minus.reshape(-1)[k] -= h
        p.data = plus
        fp = float(f().data)
        p.data = minus
        fm = float(f().data)
        p.data = base
        return (fp - fm) / (2 * h), abs((fp - f0) - (f0 - fm)) / h

    rng = np.random.default_rng(seed)
    errors: list[float] = []
    skipped = 0
    worst = None
    per_param = []
    for pi, p in enumerate(params):
        flat_size = p.data.size
        idx = np.arange(flat_size)
        if max_coords is not None and flat_size > max_coords:
            idx = np.sort(rng.permutation(flat_size)[:max_coords])
        p_errors = []
        base = p.data
        for k in idx:
            numeric, one_sided_gap = central(p, base, k, eps)
            half, _ = central(p, base, k, eps / 2)
            at_kink = one_sided_gap > 1e-3 * max(1.0, abs(numeric))
            if at_kink or abs(numeric - half) > kink_tol * max(abs(numeric), floor):
                skipped += 1
                continue
            a = float(analytic[pi].reshape(-1)[k])
            err = relative_error(a, numeric, floor)
            p_errors.append(err)
            if worst is None or err > worst[0]:
                worst = (err, pi, int(k), a, numeric)
        errors.extend(p_errors)
        per_param.append(max(p_errors) if p_errors else 0.0)

    return GradCheckResult(
        max_rel_error=max(errors) if errors else 0.0,
        mean_rel_error=float(np.mean(errors)) if errors else 0.0,
        checked=len(errors),
        skipped_kinks=skipped,
        worst=None if worst is None else worst[1:],
        per_param=per_param,
    )
