"""Central finite-difference oracle for the tape ops (float64 only).

A difference quotient is only meaningful if the function is smooth between
x - h and x + h. Each evaluation therefore records the discrete branch
choices of the ops (pool argmaxes, PReLU signs); points whose two probes
disagree straddle a kink and are discarded rather than compared.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import BranchRecorder, GradTape, Tensor

REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _probe(loss_fn, flat, pos, value) -> tuple[float, BranchRecorder]:
    flat[pos] = value
    with BranchRecorder() as rec:
        out = float(loss_fn().data)
    return out, rec


def numeric_grad(loss_fn: Callable[[], Tensor], arr: np.ndarray, pos: int, h: float = 1e-5) -> Optional[float]:
    """Central difference of the scalar ``loss_fn()`` w.r.t. ``arr.flat[pos]``.

    Returns None when the two probes took different branches.
    """
    flat = arr.reshape(-1)
    orig = flat[pos]
    try:
        fp, rp = _probe(loss_fn, flat, pos, orig + h)
        fm, rm = _probe(loss_fn, flat, pos, orig - h)
    finally:
        flat[pos] = orig
    if not rp.same_as(rm):
        return None
    return (fp - fm) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_points: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the loss from the current contents of
    ``tensors``. Every entry is checked unless ``max_points`` is given, in
    which case that many entries are drawn uniformly (redrawing for entries
    that straddle a kink, up to 10x the budget).
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run on float64 tensors")
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    sizes = [t.data.size for t in tensors]
    offsets = np.cumsum([0] + sizes)

    if max_points is None:
        candidates = iter(range(int(offsets[-1])))
        budget = int(offsets[-1])
    else:
        rng = rng or np.random.default_rng(0)
        candidates = iter(rng.integers(0, offsets[-1], size=10 * max_points))
        budget = max_points

    worst, checked, skipped = 0.0, 0, 0
    for flat_pos in candidates:
        if checked >= budget:
            break
        ti = int(np.searchsorted(offsets, flat_pos, side="right") - 1)
        pos = int(flat_pos - offsets[ti])
        num = numeric_grad(loss_fn, tensors[ti].data, pos, h)
        if num is None:
            skipped += 1
            continue
        ana = analytic[ti].reshape(-1)[pos]
        worst = max(worst, float(relative_error(np.array(ana), np.array(num))))
        checked += 1
    return GradCheckResult(worst, checked, skipped)
