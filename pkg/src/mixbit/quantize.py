"""Uniform k-bit fake quantization of weights and activations.

Weights are squashed through tanh, normalized by the layer-wide max magnitude
into [0, 1], snapped to the uniform grid and mapped back to [-1, 1].
Activations are clamped to [0, 1] and snapped in place. Quantized values stay
float (reals lying on the grid); the round step trains with a straight-through
gradient while every smooth factor keeps its analytic derivative.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor, clamp01, mul, round_half_away, ste_round_grid, tanh

# Sentinel bit width for layers left unquantized (forward uses the latent
# weights directly). The numeric value 32 doubles as the cost-model width.
FULL_PRECISION = 32

ArrayLike = Union[float, np.ndarray]


@dataclass
class QuantizedLayerState:
    """Per-layer quantization state: the trainable full-precision shadow weight
    plus the bit width it is snapped to in the forward pass."""

    bit_width: int
    latent_weight: Tensor
    exempt: bool = False

    def __post_init__(self):
        if self.exempt and self.bit_width != FULL_PRECISION:
            raise ValueError("exempt layers must carry the FULL_PRECISION sentinel")
        if not self.exempt and not 1 <= self.bit_width <= 8:
            raise ValueError(f"bit_width must be in [1,8], got {self.bit_width}")


def _check_bits(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= int(k) <= 8:
        raise ValueError(f"bit width must be an integer in [1,8], got {k!r}")


def quantize_uniform(v: ArrayLike, k: int) -> ArrayLike:
    """Snap values in [0,1] to the uniform grid {0, 1/(2^k-1), ..., 1}.

    Ties round half-away-from-zero. Inputs outside [0,1] are rejected; callers
    quantizing activations clamp first.
    """
    _check_bits(k)
    arr = np.asarray(v)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("quantize_uniform input must lie in [0,1]")
    levels = float(2 ** int(k) - 1)
    q = round_half_away(arr * levels) / levels
    if np.isscalar(v) or arr.ndim == 0:
        return float(q)
    return q.astype(arr.dtype, copy=False)


def quantize_weights(w: Union[Tensor, np.ndarray], bits: int):
    """DoReFa-style weight quantization onto a symmetric [-1, 1] grid.

    The normalizing max |tanh(w)| is taken over the whole layer tensor and
    treated as a constant in the backward pass; tanh and the affine map keep
    their analytic gradients and the round step is straight-through.

    A Tensor input returns a Tensor wired into the graph; a plain array
    returns a plain array (used by plan analysis and inference paths).
    """
    _check_bits(bits)
    if isinstance(w, Tensor):
        scale = float(np.max(np.abs(np.tanh(w.data))))
        if scale == 0.0:
            warnings.warn("quantize_weights: all-zero layer, returning it unchanged",
                          RuntimeWarning, stacklevel=2)
            return w
        t = tanh(w)
        unit = mul(t, Tensor(np.asarray(0.5 / scale, dtype=w.data.dtype))) + 0.5
        return ste_round_grid(unit, bits) * 2.0 - 1.0
    arr = np.asarray(w)
    if not np.all(np.isfinite(arr)):
        raise ValueError("quantize_weights requires finite weights")
    t = np.tanh(arr)
    scale = float(np.max(np.abs(t)))
    if scale == 0.0:
        warnings.warn("quantize_weights: all-zero layer, returning it unchanged",
                      RuntimeWarning, stacklevel=2)
        return arr.copy()
    unit = t / (2.0 * scale) + 0.5
    return (2.0 * quantize_uniform(unit, bits) - 1.0).astype(arr.dtype, copy=False)


def quantize_activations(a: Union[Tensor, np.ndarray], bits: int):
    """Clamp to [0,1], then snap to the uniform grid.

    The clamp contributes zero gradient outside [0,1]; the round step is
    straight-through.
    """
    _check_bits(bits)
    if isinstance(a, Tensor):
        return ste_round_grid(clamp01(a), bits)
    arr = np.asarray(a)
    return quantize_uniform(np.clip(arr, 0.0, 1.0), bits)


def ste_gradient(upstream: np.ndarray, saturation_mask: np.ndarray) -> np.ndarray:
    """Straight-through backward rule for the quantization round step.

    The round contributes identity; positions saturated by the clamp (mask 0)
    contribute nothing. This is the rule the graph ops apply internally,
    exposed for direct use and testing.
    """
    up = np.asarray(upstream)
    mask = np.asarray(saturation_mask)
    if up.shape != mask.shape:
        raise ValueError(f"shape mismatch: {up.shape} vs {mask.shape}")
    return up * mask
