"""Dense matrix helpers, seeded RNG and the grouped reshape used by the codec.

Matrices are plain ``numpy`` float32 arrays of shape ``(d_in, d_out)`` so that a
linear layer computes ``x @ W``. This is the transpose of the ``nn.Linear``
storage layout, which is why grouping below flattens rows directly: a
``(d_out, d_in)`` torch weight transposed to ``(d_in, d_out)`` and viewed as
``(-1, g)`` is exactly what ``reshape_to_groups`` produces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

FLOAT = np.float32

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (numpy PCG64, 128-bit state seeded from a u64)."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed < 2**64:
        raise InvalidArgument(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(W) -> np.ndarray:
    W = np.asarray(W, dtype=FLOAT)
    if W.ndim != 2:
        raise InvalidArgument(f"expected a 2-D matrix, got shape {W.shape}")
    return W


def padding_deficiency(cols: int, g: int) -> int:
    return (g - cols % g) % g


@dataclass(frozen=True)
class GroupedView:
    vectors: np.ndarray  # (k, g)
    g: int
    deficiency: int
    source_rows: int
    source_cols: int

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


def reshape_to_groups(W, g: int) -> GroupedView:
    """Split ``W`` into ``g``-dimensional vectors.

    Each row of ``W`` (one input feature) is zero-padded at the end to a multiple
    of ``g`` columns, then the padded matrix is flattened row-major into
    ``k = rows * (cols + deficiency) / g`` vectors.
    """
    if g < 1:
        raise InvalidArgument(f"group dimension must be >= 1, got {g}")
    W = as_matrix(W)
    rows, cols = W.shape
    if rows == 0 or cols == 0:
        raise InvalidArgument("cannot group an empty matrix")
    deficiency = padding_deficiency(cols, g)
    if deficiency:
        W = np.concatenate([W, np.zeros((rows, deficiency), dtype=FLOAT)], axis=1)
    vectors = np.ascontiguousarray(W).reshape(-1, g)
    return GroupedView(vectors, g, deficiency, rows, cols)


def ungroup(view: GroupedView) -> np.ndarray:
    v = np.asarray(view.vectors, dtype=FLOAT)
    g, d = view.g, view.deficiency
    if g < 1 or not 0 <= d < g:
        raise InvalidArgument(f"inconsistent group dim {g} / deficiency {d}")
    if v.ndim != 2 or v.shape[1] != g:
        raise InvalidArgument(f"vectors must have shape (k, {g}), got {v.shape}")
    padded_cols = view.source_cols + d
    if padded_cols % g or v.shape[0] * g != view.source_rows * padded_cols:
        raise InvalidArgument(
            f"{v.shape[0]} vectors of dim {g} do not tile a "
            f"{view.source_rows}x{padded_cols} padded matrix"
        )
    full = v.reshape(view.source_rows, padded_cols)
    if d and np.any(full[:, view.source_cols:] != 0):
        raise InvalidArgument("padding slots must be zero")
    return np.ascontiguousarray(full[:, : view.source_cols])
