"""Structure/texture decomposition by interval-gradient rescaling.

An image I is split as I = S + T. S comes from repeated separable 1-D
passes: along each row (then each column) the forward differences are
rescaled against the interval gradient, re-integrated from the line's
first sample, tonally corrected and blended into the running estimate.
T is then defined as I - S, after S has been adjusted so that S + T
reproduces I exactly in floating point (see :func:`_exact_split`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d, uniform_filter1d

from . import kernels as _k

SMOOTHING_EPS_BAND = (0.01**2, 0.03**2)


@dataclass(frozen=True)
class DecompositionConfig:
    """Filter parameters.

    window_radius: half-window of the interval gradient, in pixels.
    eps_s: stabiliser inside the rescaling weight.
    smoothing_eps: intensity-variance scale below which removed detail is
        only partly blended out; must lie in [0.01**2, 0.03**2].
    iterations: number of row+column rounds.
    """

    window_radius: int = 3
    eps_s: float = 1e-4
    smoothing_eps: float = 4e-4
    iterations: int = 4

    def __post_init__(self):
        if int(self.window_radius) != self.window_radius or self.window_radius < 1:
            raise ValueError(f"window_radius must be a positive integer, got {self.window_radius}")
        if not self.eps_s > 0:
            raise ValueError(f"eps_s must be positive, got {self.eps_s}")
        lo, hi = SMOOTHING_EPS_BAND
        if not (lo - 1e-15 <= self.smoothing_eps <= hi + 1e-15):
            raise ValueError(f"smoothing_eps must lie in [{lo:g}, {hi:g}], got {self.smoothing_eps}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")


@dataclass
class DecompositionResult:
    structure: np.ndarray
    texture: np.ndarray


def interval_gradient(signal, r: int) -> np.ndarray:
    """Interval gradient of a 1-D signal; entry p sits between samples p and p+1.

    It is the Gaussian-weighted mean of the samples right of p (p+1 .. p+1+r)
    minus that of the samples left of it (p-r .. p), sigma = r/2, with the
    weights renormalised where the window runs off either end.
    """
    sig = np.ascontiguousarray(signal, dtype=np.float64)
    if sig.ndim != 1 or sig.size < 2:
        raise ValueError("interval_gradient needs a 1-D signal of length >= 2")
    if int(r) != r or r < 1:
        raise ValueError(f"window radius must be a positive integer, got {r}")
    return _k.interval_gradient_lines(sig[None, :], int(r))[0]


def rescale_weight(grad, igrad, eps_s: float) -> np.ndarray:
    """Grayscale weight min(1, (|igrad| + eps_s) / (|grad| + eps_s))."""
    grad = np.asarray(grad, dtype=np.float64)
    igrad = np.asarray(igrad, dtype=np.float64)
    return np.minimum(1.0, (np.abs(igrad) + eps_s) / (np.abs(grad) + eps_s))


def rescale_weight_color(grads, igrads, eps_s: float) -> np.ndarray:
    """Shared weight for three channels from summed gradient magnitudes.

    ``grads`` and ``igrads`` are [3, ...]. The stabiliser is scaled by the
    channel count, so three identical channels give the grayscale weight.
    """
    grads = np.asarray(grads, dtype=np.float64)
    igrads = np.asarray(igrads, dtype=np.float64)
    if grads.ndim < 1 or grads.shape[0] != 3 or igrads.shape != grads.shape:
        raise ValueError(f"color weight needs matching [3, ...] gradient stacks, got {grads.shape} and {igrads.shape}")
    num = np.abs(igrads[0]) + np.abs(igrads[1]) + np.abs(igrads[2])
    den = np.abs(grads[0]) + np.abs(grads[1]) + np.abs(grads[2])
    return np.minimum(1.0, (num + 3 * eps_s) / (den + 3 * eps_s))


def gate(grad, igrad, weight) -> np.ndarray:
    """grad * weight where grad and igrad share a sign, else 0."""
    grad = np.asarray(grad, dtype=np.float64)
    return np.where(np.sign(grad) == np.sign(igrad), grad * weight, 0.0)


def rescale_gradients(signal, r: int, eps_s: float = 1e-4) -> np.ndarray:
    """Rescaled forward differences of a 1-D signal (length len(signal) - 1)."""
    sig = np.ascontiguousarray(signal, dtype=np.float64)
    if sig.ndim != 1 or sig.size < 2:
        raise ValueError("rescale_gradients needs a 1-D signal of length >= 2")
    rescaled, _ = _k.rescale_lines(sig[None, None, :], int(r), float(eps_s))
    return rescaled[0, 0]


def _filter_lines(lines: np.ndarray, cfg: DecompositionConfig, on_weights=None) -> np.ndarray:
    """One 1-D pass over [C, M, L] lines; returns the updated lines."""
    r = int(cfg.window_radius)
    rescaled, weight = _k.rescale_lines(np.ascontiguousarray(lines), r, float(cfg.eps_s))
    if not (np.all(weight >= 0.0) and np.all(weight <= 1.0)):
        raise AssertionError("rescaling weight left [0, 1]")
    if on_weights is not None:
        on_weights(weight)
    integrated = np.empty_like(lines)
    integrated[..., :1] = lines[..., :1]
    integrated[..., 1:] = lines[..., :1] + np.cumsum(rescaled, axis=-1)
    # the re-integrated line drifts wherever gradients were shrunk; pull its
    # local mean back onto the input's
    drift = lines - integrated
    corrected = integrated + gaussian_filter1d(drift, sigma=float(r), axis=-1, mode="nearest")
    removed = lines - corrected
    energy = uniform_filter1d((removed * removed).mean(axis=0), size=2 * r + 1, axis=-1, mode="nearest")
    blend = energy / (energy + cfg.smoothing_eps)
    return lines + blend[None] * (corrected - lines)


def dyadic_grid(values: np.ndarray) -> float:
    """Largest power of two (at most 1) that divides every entry of ``values``."""
    v = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    v = v[v > 0]
    if v.size == 0:
        return 1.0
    mant, exp = np.frexp(v)
    ints = (mant * 2.0**53).astype(np.int64)
    low = ints & -ints
    lowest = np.log2(low.astype(np.float64)).astype(np.int64) + exp.astype(np.int64) - 53
    return float(2.0 ** min(int(lowest.min()), 0))


def _exact_split(structure: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Nudge S so that the floating-point sum S + (I - S) reproduces I.

    On a common grid no finer than 2**-53 every difference of two values in
    [0, 1] is exact, so S is rounded onto the input's grid. Finer inputs
    (general float64 data) are repaired pixel by pixel: S is rounded to the
    ulp of I there, which is exact while |I - S| < 2**(e + 1) for
    I in [2**e, 2**(e + 1)); past that S is capped at 2 I, and as a last
    resort set to I.
    """
    grid = dyadic_grid(image)
    if grid >= 2.0**-53:
        return np.round(structure / grid) * grid
    out = structure.copy()
    bad = (out + (image - out)) != image
    if not bad.any():
        return out
    img = image[bad]
    ulp = np.spacing(img)
    # subnormal ulps overflow the division; the NaNs fail the check and fall through
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.round(out[bad] / ulp) * ulp
        for fallback in (lambda v: np.round(np.minimum(v, 2.0 * img) / ulp) * ulp, lambda v: img):
            still = (s + (img - s)) != img
            if not still.any():
                break
            s = np.where(still, fallback(s), s)
    out[bad] = s
    return out


def decompose(
    image,
    cfg: Optional[DecompositionConfig] = None,
    on_weights: Optional[Callable[[np.ndarray], None]] = None,
) -> DecompositionResult:
    """Split a grayscale [H, W] or color [H, W, 3] image in [0, 1] into S and T.

    ``on_weights`` is called with the rescaling-weight array of every 1-D
    pass (rows and columns, every iteration).
    """
    cfg = cfg or DecompositionConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        planes = img[None]
    elif img.ndim == 3 and img.shape[2] == 3:
        planes = np.moveaxis(img, 2, 0)
    else:
        raise ValueError(f"expected an [H, W] or [H, W, 3] image, got shape {img.shape}")
    if planes.shape[1] < 4 or planes.shape[2] < 4:
        raise ValueError(f"image must be at least 4x4, got {img.shape[:2]}")
    if not np.all(np.isfinite(planes)):
        raise ValueError("image contains non-finite values")

    est = np.ascontiguousarray(planes)
    for _ in range(int(cfg.iterations)):
        est = _filter_lines(est, cfg, on_weights)
        est = np.ascontiguousarray(
            _filter_lines(np.ascontiguousarray(est.transpose(0, 2, 1)), cfg, on_weights).transpose(0, 2, 1)
        )
    structure = np.clip(est, 0.0, 1.0)
    if img.ndim == 3:
        structure = np.moveaxis(structure, 0, 2)
    else:
        structure = structure[0]
    structure = np.ascontiguousarray(_exact_split(structure, img))
    return DecompositionResult(structure=structure, texture=img - structure)
