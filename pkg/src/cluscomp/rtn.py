"""Symmetric uniform round-to-nearest (RTN) baseline, per tensor or per input group.

The grid follows the textbook formula literally::

    s   = max(|W_min|, |W_max|) / (2**b - 1)
    W_q = clamp(round(W / s), -2**(b-1), 2**(b-1) - 1)

Note the scale spreads ``2**b - 1`` steps over ``[0, max|W|]`` while the clamp
keeps only ``2**b`` levels around zero, so values above roughly half the range
saturate. Rounding is half-away-from-zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .codec import BitReport
from .core import FLOAT, as_matrix
from .errors import InvalidArgument

SCALE_BITS = 16


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _levels(bits: int, scale_rule: str) -> int:
    if scale_rule == "literal":
        return 2**bits - 1
    if scale_rule == "full":
        return max(2 ** (bits - 1) - 1, 1)
    raise InvalidArgument(f"unknown scale rule {scale_rule!r}")


def rtn_grid(values: np.ndarray, bits: int, scale_rule: str = "literal"):
    """Integer grid values and the scale for one quantization group (float64).

    ``scale_rule="literal"`` divides the peak by ``2**b - 1``; ``"full"``
    divides by ``2**(b-1) - 1`` so the peak lands on the last positive level
    and nothing saturates.
    """
    values = np.asarray(values, dtype=np.float64)
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    levels = _levels(bits, scale_rule)
    if peak == 0.0:
        scale = 1.0
        q = np.zeros_like(values)
    else:
        scale = peak / levels
        # values * levels / peak rather than values / scale: exact on grid points
        q = round_half_away(values * levels / peak)
    q = np.clip(q, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    return q, scale


@dataclass(frozen=True)
class RtnLayer:
    q_values: np.ndarray  # int8/int16 grid values, shape (d_in, d_out)
    scales: np.ndarray  # float64, shape (n_groups, d_out) or (1, 1) per tensor
    bits: int
    group_size: int | None
    d_in: int
    d_out: int


def rtn_quantize(W, bits: int, group_size: int | None = None, scale_rule: str = "literal") -> RtnLayer:
    """Quantize ``W`` (d_in x d_out).

    With ``group_size`` each output column is split into contiguous runs of
    ``group_size`` input rows, each with its own scale; the last run may be
    shorter when ``d_in`` is not a multiple. ``scale_rule`` is passed to
    :func:`rtn_grid`.
    """
    if not 2 <= bits <= 8:
        raise InvalidArgument(f"RTN bits must be in [2, 8], got {bits}")
    W = as_matrix(W)
    d_in, d_out = W.shape
    if group_size is None:
        q, scale = rtn_grid(W, bits, scale_rule)
        return RtnLayer(q.astype(np.int16), np.array([[scale]]), bits, None, d_in, d_out)
    if group_size < 1:
        raise InvalidArgument("group_size must be >= 1")
    n_groups = -(-d_in // group_size)
    q = np.empty((d_in, d_out), dtype=np.int16)
    scales = np.empty((n_groups, d_out))
    for gi in range(n_groups):
        block = W[gi * group_size : (gi + 1) * group_size].astype(np.float64)
        peak = np.max(np.abs(block), axis=0)
        levels = _levels(bits, scale_rule)
        safe = np.where(peak == 0, 1.0, peak)
        qb = round_half_away(block * levels / safe)
        qb = np.where(peak == 0, 0.0, qb)
        q[gi * group_size : (gi + 1) * group_size] = np.clip(qb, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
        scales[gi] = np.where(peak == 0, 1.0, peak / levels)
    return RtnLayer(q, scales, bits, group_size, d_in, d_out)


def rtn_dequantize(layer: RtnLayer) -> np.ndarray:
    q = layer.q_values.astype(np.float64)
    if layer.group_size is None:
        return (q * layer.scales[0, 0]).astype(FLOAT)
    rows = np.repeat(layer.scales, layer.group_size, axis=0)[: layer.d_in]
    return (q * rows).astype(FLOAT)


def rtn_bits_per_param(d_in: int, d_out: int, bits: int, group_size: int | None = None) -> BitReport:
    """``bits`` per weight plus one 16-bit scale per group (or per tensor)."""
    if d_in < 1 or d_out < 1:
        raise InvalidArgument("dims must be >= 1")
    params = d_in * d_out
    if group_size is None:
        overhead = Fraction(SCALE_BITS, params)
    else:
        overhead = Fraction(SCALE_BITS, group_size)
    return BitReport(Fraction(bits), overhead, bits + overhead, params)
