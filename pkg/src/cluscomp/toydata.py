"""Seeded synthetic weights and token corpora."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import FLOAT, make_rng
from .errors import InvalidArgument

DISTRIBUTIONS = ("gaussian", "student_t", "gaussian_with_outliers")
CORPUS_KINDS = ("markov", "cycle", "copy")


@dataclass(frozen=True)
class WeightGenSpec:
    distribution: str = "gaussian"
    rows: int = 256
    cols: int = 256
    seed: int = 0
    df: float = 3.0  # student_t only
    rate: float = 0.001  # gaussian_with_outliers only
    magnitude: float = 50.0  # gaussian_with_outliers only
    scale: float = 1.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise InvalidArgument(f"distribution must be one of {DISTRIBUTIONS}")
        if self.rows < 1 or self.cols < 1:
            raise InvalidArgument("rows and cols must be >= 1")
        if self.distribution == "student_t" and not self.df > 2:
            raise InvalidArgument("student_t needs df > 2 for finite variance")
        if not 0.0 <= self.rate <= 1.0:
            raise InvalidArgument("outlier rate must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WeightGenSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown weight spec keys: {sorted(unknown)}")
        return cls(**d)


def gen_weights(spec: WeightGenSpec) -> np.ndarray:
    rng = make_rng(spec.seed)
    shape = (spec.rows, spec.cols)
    if spec.distribution == "gaussian":
        w = rng.standard_normal(shape)
    elif spec.distribution == "student_t":
        w = rng.standard_t(spec.df, shape)
    else:
        w = rng.standard_normal(shape)
        hit = rng.random(shape) < spec.rate
        signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        w = np.where(hit, w + signs * spec.magnitude, w)
    return (w * spec.scale).astype(FLOAT)


@dataclass(frozen=True)
class CorpusSpec:
    """Token stream recipe.

    ``markov``: order-``order`` chain whose next-token distributions are drawn
    from a symmetric Dirichlet(``alpha``); order 0 means iid uniform tokens.
    ``cycle``: a fixed random permutation walked deterministically.
    ``copy``: sequences ``x_1..x_L SEP x_1..x_L`` with ``x`` drawn from
    the first ``vocab - 1`` ids; ``L = copy_len``; ``SEP = vocab - 1``.
    """

    vocab: int = 96
    length: int = 65536
    order: int = 1
    seed: int = 0
    kind: str = "markov"
    alpha: float = 0.1
    copy_len: int = 8

    def __post_init__(self):
        if self.vocab < 2:
            raise InvalidArgument("vocab must be >= 2")
        if self.length < 1 or self.order < 0:
            raise InvalidArgument("length must be >= 1 and order >= 0")
        if self.kind not in CORPUS_KINDS:
            raise InvalidArgument(f"kind must be one of {CORPUS_KINDS}")
        if self.kind == "markov" and self.vocab**self.order > 1 << 22:
            raise InvalidArgument("markov table too large; lower order or vocab")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**d)


def gen_corpus(spec: CorpusSpec) -> np.ndarray:
    rng = make_rng(spec.seed)
    v = spec.vocab
    if spec.kind == "cycle":
        perm = rng.permutation(v)
        nxt = np.empty(v, dtype=np.int64)
        nxt[perm] = np.roll(perm, -1)
        out = np.empty(spec.length, dtype=np.int64)
        tok = int(perm[0])
        for i in range(spec.length):
            out[i] = tok
            tok = int(nxt[tok])
        return out.astype(np.int32)
    if spec.kind == "copy":
        period = 2 * spec.copy_len + 1
        n_seq = -(-spec.length // period)
        src = rng.integers(0, v - 1, size=(n_seq, spec.copy_len))
        sep = np.full((n_seq, 1), v - 1)
        return np.concatenate([src, sep, src], axis=1).reshape(-1)[: spec.length].astype(np.int32)
    if spec.order == 0:
        return rng.integers(0, v, size=spec.length).astype(np.int32)
    n_ctx = v**spec.order
    table = rng.dirichlet(np.full(v, spec.alpha), size=n_ctx)
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty(spec.length, dtype=np.int64)
    out[: spec.order] = rng.integers(0, v, size=min(spec.order, spec.length))
    u = rng.random(spec.length)
    ctx = 0
    for i in range(spec.order):
        ctx = ctx * v + int(out[i])
    mod = v ** (spec.order - 1)
    for i in range(spec.order, spec.length):
        tok = int(np.searchsorted(cdf[ctx], u[i], side="right"))
        tok = min(tok, v - 1)
        out[i] = tok
        ctx = (ctx % mod) * v + tok if mod > 1 else tok
    return out.astype(np.int32)


def batchify(tokens, seq_len: int) -> np.ndarray:
    """Cut a stream into non-overlapping rows of ``seq_len`` tokens (remainder dropped)."""
    tokens = np.asarray(tokens)
    n = len(tokens) // seq_len
    if n == 0:
        raise InvalidArgument(f"stream of {len(tokens)} tokens is shorter than seq_len {seq_len}")
    return tokens[: n * seq_len].reshape(n, seq_len)
