"""Sweeps and comparisons that produce plot-ready rows."""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .clustering import KMeansConfig
from .codec import bits_per_param, compress_layer, reconstruct
from .core import as_matrix
from .rtn import rtn_bits_per_param, rtn_dequantize, rtn_quantize


def relative_error(W, W_hat) -> float:
    W = np.asarray(W, dtype=np.float64)
    return float(np.linalg.norm(W - W_hat) / np.linalg.norm(W))


def gn_sweep(W, gs, ns, seed: int = 0, restarts: int = 3, iterations: int = 20) -> list[dict]:
    """Reconstruction error of clustering ``W`` for every (g, n) pair."""
    W = as_matrix(W)
    rows = []
    for g in gs:
        for n in ns:
            cfg = KMeansConfig(n_clusters=n, iterations=iterations, seed=seed, restarts=restarts)
            layer = compress_layer(W, g, n, cfg)
            W_hat = reconstruct(layer)
            rows.append({
                "g": g,
                "n": n,
                "n_effective": layer.n_effective,
                "bits": float(bits_per_param(W.shape[0], W.shape[1], g, n).bits_per_param),
                "rel_error": relative_error(W, W_hat),
                "sq_error": float(np.sum((W.astype(np.float64) - W_hat) ** 2)),
            })
    return rows


def sweep_violations(rows, slack: float = 1e-6) -> list[str]:
    """Monotonicity breaks: error must not rise with n (fixed g) nor fall with g (fixed n)."""
    table = {(r["g"], r["n"]): r["rel_error"] for r in rows}
    gs = sorted({r["g"] for r in rows})
    ns = sorted({r["n"] for r in rows})
    bad = []
    for g in gs:
        for a, b in zip(ns, ns[1:]):
            if table[(g, b)] > table[(g, a)] + slack:
                bad.append(f"g={g}: error rises from n={a} to n={b}")
    for n in ns:
        for a, b in zip(gs, gs[1:]):
            if table[(b, n)] < table[(a, n)] - slack:
                bad.append(f"n={n}: error falls from g={a} to g={b}")
    return bad


def matched_pairs(rows, tolerance: float = 0.1, min_ratio: int = 4) -> list[tuple[dict, dict]]:
    """Pairs with different g, bits within ``tolerance`` and n differing by >= ``min_ratio``x.

    Each pair is returned as ``(larger_n, smaller_n)``.
    """
    out = []
    for a, b in combinations(rows, 2):
        if a["g"] == b["g"] or abs(a["bits"] - b["bits"]) > tolerance:
            continue
        big, small = (a, b) if a["n"] > b["n"] else (b, a)
        if big["n"] >= min_ratio * small["n"]:
            out.append((big, small))
    return out


def rtn_vs_clustering(W, bits: int = 4, group_size: int = 64, g: int = 4, n: int = 256,
                      seed: int = 0, iterations: int = 20) -> dict:
    """Frobenius errors of grouped RTN and clustering on the same matrix."""
    W = as_matrix(W)
    d_in, d_out = W.shape
    rtn_hat = rtn_dequantize(rtn_quantize(W, bits, group_size))
    layer = compress_layer(W, g, n, KMeansConfig(n_clusters=n, iterations=iterations, seed=seed))
    return {
        "rtn_bits": float(rtn_bits_per_param(d_in, d_out, bits, group_size).bits_per_param),
        "cluster_bits": float(bits_per_param(d_in, d_out, g, n).bits_per_param),
        "rtn_error": float(np.linalg.norm(W - rtn_hat)),
        "cluster_error": float(np.linalg.norm(W - reconstruct(layer))),
    }
