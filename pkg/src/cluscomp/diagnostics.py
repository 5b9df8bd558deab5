"""Quantization-difficulty metrics: kurtosis, Wanda-score spread and code-histogram entropy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidArgument


def kurtosis(values) -> float:
    """Pearson (non-excess) kurtosis ``E[(x-mu)^4] / sigma^4``; a Gaussian scores 3."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise InvalidArgument("kurtosis needs at least 4 values")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 <= 0.0:
        raise DegenerateInput("kurtosis of a constant sample is undefined")
    return float(np.mean(d**4) / (m2 * m2))


@dataclass(frozen=True)
class WandaScore:
    scores: np.ndarray  # (d_out, d_in)
    row_std: np.ndarray  # (d_out,)

    @property
    def std(self) -> float:
        """Layer summary: mean over output rows of the within-row score std."""
        return float(self.row_std.mean())


def wanda_score(W, X) -> WandaScore:
    """``S[i, j] = |W[i, j]| * ||X[:, j]||_2``.

    ``W`` is in pruning orientation ``(d_out, d_in)`` and ``X`` holds input
    activations ``(tokens, d_in)``; pass ``W.T`` for a ``(d_in, d_out)``
    matrix from this package.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim > 2:
        X = X.reshape(-1, X.shape[-1])
    if W.ndim != 2 or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise InvalidArgument(f"activations {X.shape} do not match weight input dim of {W.shape}")
    norms = np.sqrt(np.sum(X * X, axis=0))
    S = np.abs(W) * norms[None, :]
    return WandaScore(S, S.std(axis=1))


def code_entropy(codes, n_effective: int) -> float:
    """Shannon entropy of the code histogram normalized by ``ln(n_effective)``."""
    if n_effective < 1:
        raise InvalidArgument("n_effective must be >= 1")
    if n_effective == 1:
        return 1.0
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        raise InvalidArgument("no codes")
    if codes.min() < 0 or codes.max() >= n_effective:
        raise InvalidArgument("code out of range")
    p = np.bincount(codes, minlength=n_effective) / codes.size
    p = p[p > 0]
    h = float(-(p * np.log(p)).sum())
    return min(max(h / np.log(n_effective), 0.0), 1.0)


@dataclass
class DiagnosticReport:
    names: list = field(default_factory=list)
    kurtosis: list = field(default_factory=list)
    wanda_std: list = field(default_factory=list)
    code_entropy: list = field(default_factory=list)

    def add(self, name, kurt=float("nan"), wstd=float("nan"), entropy=float("nan")):
        self.names.append(name)
        self.kurtosis.append(kurt)
        self.wanda_std.append(wstd)
        self.code_entropy.append(entropy)

    def rows(self):
        return zip(self.names, self.kurtosis, self.wanda_std, self.code_entropy)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "kurtosis_pearson", "wanda_std", "code_entropy"])
            for name, k, s, e in self.rows():
                w.writerow([name, _fmt(k), _fmt(s), _fmt(e)])


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))
