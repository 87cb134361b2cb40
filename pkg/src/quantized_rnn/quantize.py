"""
Weight rounding methods.

Four families, each a pure function of the input matrix (and an explicit
random generator for the stochastic variants):

- binarization to {-1, +1} (stochastic via hard-sigmoid probability, or by sign)
- ternarization to {-1, 0, +1} (stochastic via |2w|, or with thresholds +-0.5)
- pow2-ternarization, fixed-point Qm.f rounding (deterministic only)
- exponential quantization to signed powers of two

Fresh samples are drawn on every call; callers decide how often to resample.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from .numerics import hard_sigmoid
from .models import QuantizerSpec
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


def _require_rng(rng: Optional[np.random.Generator], method: str) -> np.random.Generator:
    if rng is None:
        raise ConfigurationError(f"{method} needs a random generator", field="rng")
    return rng


def _to_pair(signs: np.ndarray, values: Tuple[float, float], dtype) -> np.ndarray:
    low, high = values
    if (low, high) == (-1.0, 1.0):
        return signs.astype(dtype)
    return np.where(signs > 0, high, low).astype(dtype)


def binarize_stoch(w: np.ndarray, rng: np.random.Generator,
                   values: Tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """+1 with probability hard_sigmoid(w), else -1 (then mapped onto ``values``)."""
    w = np.asarray(w)
    p = hard_sigmoid(w)
    u = rng.random(w.shape)
    return _to_pair(np.where(u < p, 1.0, -1.0), values, w.dtype)


def binarize_det(w: np.ndarray, values: Tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """+1 where w >= 0, -1 otherwise (then mapped onto ``values``)."""
    w = np.asarray(w)
    return _to_pair(np.where(w >= 0, 1.0, -1.0), values, w.dtype)


def ternarize_stoch(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """sign(w) * Bernoulli(clip(|2w|, 0, 1)); sign(0) is 0 and zeros are never negative."""
    w = np.asarray(w)
    p = np.clip(np.abs(2.0 * w), 0.0, 1.0)
    u = rng.random(w.shape)
    return _positive_zero((np.sign(w) * (u < p)).astype(w.dtype))


def ternarize_det(w: np.ndarray) -> np.ndarray:
    """+1 if w > 0.5, -1 if w <= -0.5, else 0."""
    w = np.asarray(w)
    return np.where(w > 0.5, 1.0, np.where(w <= -0.5, -1.0, 0.0)).astype(w.dtype)


def _positive_zero(q: np.ndarray) -> np.ndarray:
    # -0.0 + 0.0 is +0.0; zeros must pack and compare bit-exactly
    return q + 0.0


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pow2_ternarize(w: np.ndarray, m: int = 1, f: int = 1, ternary_clamp: bool = True) -> np.ndarray:
    """Clip to the Qm.f range, then round to a multiple of 2^-f.

    With ``ternary_clamp`` the clip range is [-2^-f, 2^-f], so Q1.1 yields
    exactly {-0.5, 0, 0.5}; without it the range is [-2^m, 2^m].
    """
    w = np.asarray(w)
    bound = 2.0 ** (-f) if ternary_clamp else 2.0 ** m
    clipped = np.clip(w, -bound, bound)
    step = 2.0 ** f
    return _positive_zero((round_half_away(clipped * step) / step).astype(w.dtype))


def exp_quantize(w: np.ndarray, variant: str = "stochastic", e_min: int = -8, e_max: int = 0,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Round |w| to a power of two 2^e, e_min <= e <= e_max, keeping the sign.

    Between two powers the upper exponent is taken with probability
    p = |w| / 2^floor(log2|w|) - 1 (stochastic) or when p > 0.5
    (deterministic). Magnitudes at or above 2^e_max saturate; magnitudes
    below 2^e_min go to 2^e_min with probability |w| / 2^e_min, else 0.
    """
    w = np.asarray(w)
    stochastic = variant == "stochastic"
    if stochastic:
        u = _require_rng(rng, "stochastic exp_quantize").random(w.shape)

    a = np.abs(w).astype(np.float64)
    sign = np.sign(w).astype(np.float64)
    out = np.zeros(w.shape, dtype=np.float64)

    top = 2.0 ** e_max
    bottom = 2.0 ** e_min

    saturated = a >= top
    out[saturated] = top

    underflow = (a > 0) & (a < bottom)
    p_under = a / bottom
    take_under = (u < p_under) if stochastic else (p_under > 0.5)
    out[underflow & take_under] = bottom

    inside = (a >= bottom) & ~saturated
    mantissa, exponent = np.frexp(a)
    lower = exponent - 1
    # a / 2^lower = 2 * mantissa exactly
    p = 2.0 * mantissa - 1.0
    go_up = (u < p) if stochastic else (p > 0.5)
    chosen = np.where(go_up, lower + 1, lower)
    out[inside] = np.ldexp(1.0, chosen[inside])

    return _positive_zero((sign * out).astype(w.dtype))


def quantize(w: np.ndarray, spec: Optional[QuantizerSpec], rng: Optional[np.random.Generator] = None,
             deterministic: bool = False) -> np.ndarray:
    """Apply ``spec`` to ``w``.

    Args:
        w: Master weights
        spec: Quantizer; None and the identity method return ``w`` itself
        rng: Generator for stochastic variants
        deterministic: Force the deterministic variant (evaluation)
    """
    if spec is None or spec.method == "identity":
        return w

    stochastic = spec.stochastic and not deterministic

    if spec.method == "binary":
        if stochastic:
            return binarize_stoch(w, _require_rng(rng, "binarize_stoch"), spec.binary_values)
        return binarize_det(w, spec.binary_values)

    if spec.method == "ternary":
        if stochastic:
            return ternarize_stoch(w, _require_rng(rng, "ternarize_stoch"))
        return ternarize_det(w)

    if spec.method == "pow2ternary":
        return pow2_ternarize(w, spec.m, spec.f, spec.ternary_clamp)

    if spec.method == "expquant":
        return exp_quantize(w, "stochastic" if stochastic else "deterministic", spec.e_min, spec.e_max, rng)

    raise ConfigurationError(f"unknown quantizer method '{spec.method}'", field="method")


def in_value_set(q: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Boolean mask of entries of ``q`` that lie in the allowed set of ``spec``."""
    q = np.asarray(q, dtype=np.float64)

    if spec.method == "identity":
        return np.isfinite(q)

    if spec.method == "binary":
        low, high = spec.binary_values
        return (q == low) | (q == high)

    if spec.method == "ternary":
        return (q == -1.0) | (q == 0.0) | (q == 1.0)

    if spec.method == "pow2ternary":
        step = 2.0 ** (-spec.f)
        if spec.ternary_clamp:
            return (q == -step) | (q == 0.0) | (q == step)
        scaled = q / step
        bound = 2.0 ** spec.m
        return np.isfinite(q) & (scaled == np.round(scaled)) & (np.abs(q) <= bound)

    if spec.method == "expquant":
        a = np.abs(q)
        mantissa, exponent = np.frexp(a)
        power = (mantissa == 0.5) & (exponent - 1 >= spec.e_min) & (exponent - 1 <= spec.e_max)
        return (q == 0.0) | power

    raise ConfigurationError(f"unknown quantizer method '{spec.method}'", field="method")


def clips_master(spec: Optional[QuantizerSpec]) -> bool:
    """Whether masters of a group with this quantizer are clipped after updates."""
    return spec is not None and spec.method in ("binary", "ternary")
