"""Compressed linear layers: codebook + codes, bit accounting and the CLSC file format.

CLSC v1 layout (all integers little-endian)::

    b"CLSC"  u8 version=1  u8 codebook_precision (16|32)  u32 layer_count
    per layer:
        u16 name_len  name (UTF-8)
        u32 d_in  u32 d_out  u16 g  u32 n_effective  u16 deficiency
        codebook  n_effective*g IEEE-754 values (half or single)
        codes     k u16 values, k = d_in*(d_out+deficiency)/g
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .clustering import MAX_CLUSTERS, KMeansConfig, kmeans
from .core import FLOAT, as_matrix, padding_deficiency, reshape_to_groups
from .errors import (
    BadMagic,
    BadVersion,
    ChecksumError,
    CorruptFile,
    CorruptLayer,
    InvalidArgument,
    TruncatedFile,
)

MAGIC = b"CLSC"
VERSION = 1
DEFAULT_N = 65500
CODEBOOK_BITS = (2, 4, 8, 16)


@dataclass(frozen=True, eq=False)
class CompressedLayer:
    name: str
    d_in: int
    d_out: int
    g: int
    deficiency: int
    codebook: np.ndarray  # (n_effective, g) float32
    codes: np.ndarray  # (k,) uint16
    codebook_precision: int = 16
    # set by quantize_codebook: (bits, scale) of the RTN grid the codebook sits on
    codebook_quant: tuple | None = None

    @property
    def n_effective(self) -> int:
        return int(self.codebook.shape[0])

    @property
    def k(self) -> int:
        return int(self.codes.shape[0])

    def validate(self) -> None:
        if self.g < 1 or not 0 <= self.deficiency < self.g:
            raise CorruptLayer(f"{self.name}: bad g/deficiency {self.g}/{self.deficiency}")
        if self.deficiency != padding_deficiency(self.d_out, self.g):
            raise CorruptLayer(f"{self.name}: deficiency does not match d_out and g")
        if self.codebook.ndim != 2 or self.codebook.shape[1] != self.g:
            raise CorruptLayer(f"{self.name}: codebook shape {self.codebook.shape}")
        if not 1 <= self.n_effective <= MAX_CLUSTERS:
            raise CorruptLayer(f"{self.name}: n_effective {self.n_effective} out of range")
        expected_k = self.d_in * (self.d_out + self.deficiency) // self.g
        if self.codes.shape != (expected_k,):
            raise CorruptLayer(f"{self.name}: expected {expected_k} codes, got {self.codes.shape}")
        if self.codes.size and int(self.codes.max()) >= self.n_effective:
            raise CorruptLayer(f"{self.name}: code out of range")
        if self.codebook_precision not in (16, 32):
            raise CorruptLayer(f"{self.name}: precision {self.codebook_precision}")

    def with_codebook(self, codebook) -> "CompressedLayer":
        return replace(self, codebook=np.asarray(codebook, dtype=FLOAT), codebook_quant=None)

    def equals(self, other: "CompressedLayer") -> bool:
        """Bit-exact comparison (codebook compared by raw bytes)."""
        return (
            self.name == other.name
            and (self.d_in, self.d_out, self.g, self.deficiency, self.codebook_precision)
            == (other.d_in, other.d_out, other.g, other.deficiency, other.codebook_precision)
            and self.codebook.shape == other.codebook.shape
            and self.codebook.astype(FLOAT).tobytes() == other.codebook.astype(FLOAT).tobytes()
            and np.array_equal(self.codes, other.codes)
        )

    def bit_report(self) -> "BitReport":
        """Actual storage cost of this layer (padded code count, stored precision)."""
        params = self.d_in * self.d_out
        code_bits = Fraction(16 * self.k, params)
        width = self.codebook_quant[0] if self.codebook_quant else self.codebook_precision
        book_bits = Fraction(width * self.g * self.n_effective, params)
        return BitReport(code_bits, book_bits, code_bits + book_bits, params)


@dataclass(frozen=True)
class BitReport:
    code_bits: Fraction
    codebook_bits: Fraction
    bits_per_param: Fraction
    params: int

    def rounded(self, places: int = 2) -> float:
        return round_half_up(self.bits_per_param, places)


def round_half_up(value, places: int = 2) -> float:
    """Decimal rounding of an exact value, halves away from zero (4.125 -> 4.13)."""
    q = Decimal(1).scaleb(-places)
    if isinstance(value, Fraction):
        d = Decimal(value.numerator) / Decimal(value.denominator)
    else:
        d = Decimal(str(value))
    return float(d.quantize(q, rounding=ROUND_HALF_UP))


def compress_layer(
    W,
    g: int,
    n: int = DEFAULT_N,
    kmeans_cfg: KMeansConfig | None = None,
    name: str = "",
    codebook_precision: int = 16,
) -> CompressedLayer:
    if n > MAX_CLUSTERS:
        raise InvalidArgument(f"n must be <= {MAX_CLUSTERS} for 16-bit codes, got {n}")
    W = as_matrix(W)
    view = reshape_to_groups(W, g)
    if kmeans_cfg is None:
        kmeans_cfg = KMeansConfig(n_clusters=n)
    elif kmeans_cfg.n_clusters != n:
        kmeans_cfg = replace(kmeans_cfg, n_clusters=n)
    res = kmeans(view, kmeans_cfg)
    return CompressedLayer(
        name=name,
        d_in=W.shape[0],
        d_out=W.shape[1],
        g=g,
        deficiency=view.deficiency,
        codebook=res.centroids,
        codes=res.assignments,
        codebook_precision=codebook_precision,
    )


def reconstruct(layer: CompressedLayer) -> np.ndarray:
    """Gather codebook rows by code, view as (d_in, padded d_out), drop the pad."""
    codes = np.asarray(layer.codes)
    if codes.size and int(codes.max()) >= layer.n_effective:
        raise CorruptLayer(f"{layer.name}: code {int(codes.max())} >= n_effective {layer.n_effective}")
    vectors = np.asarray(layer.codebook, dtype=FLOAT)[codes.astype(np.int64)]
    weight = vectors.reshape(layer.d_in, -1)
    if weight.shape[1] != layer.d_out + layer.deficiency:
        raise CorruptLayer(f"{layer.name}: code count does not tile {layer.d_in}x{layer.d_out}")
    if layer.deficiency:
        weight = weight[:, : -layer.deficiency]
    return np.ascontiguousarray(weight)


def bits_per_param(
    d_in: int, d_out: int, g: int, n: int, code_bits: int = 16, codebook_bits: int = 16
) -> BitReport:
    """Average storage bits per original weight: ``code_bits/g + codebook_bits*g*n/(d_in*d_out)``."""
    for label, v in (("d_in", d_in), ("d_out", d_out), ("g", g), ("n", n)):
        if v < 1:
            raise InvalidArgument(f"{label} must be >= 1, got {v}")
    params = d_in * d_out
    codes = Fraction(code_bits, g)
    book = Fraction(codebook_bits * g * n, params)
    return BitReport(codes, book, codes + book, params)


@dataclass(frozen=True)
class ParamBudget:
    """One row of a codes/codebook parameter table for a single weight matrix."""

    code_params: int
    codebook_params: int
    dense_params: int
    bits: BitReport

    @property
    def codebook_fraction(self) -> Fraction:
        return Fraction(self.codebook_params, self.dense_params)

    def display(self) -> dict:
        """Counts in millions (2 decimals) and the codebook share computed from them,
        which is how published tables quote the trainable fraction. The share is
        ``None`` when the dense count rounds to zero millions."""
        code_m = round_half_up(Fraction(self.code_params, 10**6))
        book_m = round_half_up(Fraction(self.codebook_params, 10**6))
        dense_m = round_half_up(Fraction(self.dense_params, 10**6))
        return {
            "code_params_m": code_m,
            "codebook_params_m": book_m,
            "dense_params_m": dense_m,
            "codebook_pct": (round_half_up(Decimal(str(book_m)) / Decimal(str(dense_m)) * 100)
                             if dense_m else None),
            "codebook_pct_exact": round_half_up(self.codebook_fraction * 100),
            "bits": self.bits.rounded(),
        }


def param_budget(d_in: int, d_out: int, g: int, n: int) -> ParamBudget:
    dense = d_in * d_out
    return ParamBudget(dense // g, g * n, dense, bits_per_param(d_in, d_out, g, n))


def _rtn_symmetric(values: np.ndarray, bits: int):
    """Per-tensor symmetric RTN with the non-saturating scale ``max/(2**(b-1)-1)``."""
    from .rtn import rtn_grid

    q, scale = rtn_grid(values, bits, scale_rule="full")
    return (q * scale).astype(FLOAT), scale


def quantize_codebook(layer: CompressedLayer, bits: int) -> CompressedLayer:
    """Put the codebook on a ``bits``-wide uniform grid with one scale per codebook.

    ``bits=16`` is a half-precision cast. The returned layer keeps float32
    values (already on the grid) and records ``(bits, scale)`` so bit reports
    charge the reduced codebook width.
    """
    if bits not in CODEBOOK_BITS:
        raise InvalidArgument(f"codebook bits must be one of {CODEBOOK_BITS}, got {bits}")
    cb = np.asarray(layer.codebook, dtype=FLOAT)
    if bits == 16:
        return replace(layer, codebook=cb.astype(np.float16).astype(FLOAT), codebook_quant=(16, None))
    deq, scale = _rtn_symmetric(cb.astype(np.float64), bits)
    return replace(layer, codebook=deq, codebook_quant=(bits, float(scale)))


# --- CLSC v1 ---------------------------------------------------------------

_HEADER = struct.Struct("<4sBBI")
_LAYER = struct.Struct("<IIHIH")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def serialize(layers, codebook_precision: int | None = None) -> bytes:
    layers = list(layers)
    if codebook_precision is None:
        precs = {l.codebook_precision for l in layers}
        if len(precs) > 1:
            raise InvalidArgument(f"layers disagree on codebook precision: {sorted(precs)}")
        codebook_precision = precs.pop() if precs else 16
    if codebook_precision not in (16, 32):
        raise InvalidArgument("codebook precision must be 16 or 32")
    dtype = "<f2" if codebook_precision == 16 else "<f4"
    parts = [_HEADER.pack(MAGIC, VERSION, codebook_precision, len(layers))]
    for layer in layers:
        layer.validate()
        name = layer.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise InvalidArgument("layer name too long")
        parts.append(_U16.pack(len(name)))
        parts.append(name)
        parts.append(_LAYER.pack(layer.d_in, layer.d_out, layer.g, layer.n_effective, layer.deficiency))
        parts.append(np.asarray(layer.codebook, dtype=FLOAT).astype(dtype).tobytes())
        parts.append(np.asarray(layer.codes, dtype="<u2").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _layout(buf: bytes, precision: int, count: int):
    """Walk the declared structure; returns per-layer (meta, offsets) and end offset."""
    width = 2 if precision == 16 else 4
    off = _HEADER.size
    entries = []
    for i in range(count):
        if off + 2 > len(buf):
            raise TruncatedFile(f"layer {i}: name length past end of file")
        (nlen,) = _U16.unpack_from(buf, off)
        off += 2
        name_off = off
        off += nlen
        if off + _LAYER.size > len(buf):
            raise TruncatedFile(f"layer {i}: header past end of file")
        d_in, d_out, g, n_eff, deficiency = _LAYER.unpack_from(buf, off)
        off += _LAYER.size
        if g == 0:
            raise CorruptFile(f"layer {i}: g == 0")
        k = d_in * (d_out + deficiency) // g
        cb_off = off
        off += n_eff * g * width
        codes_off = off
        off += 2 * k
        if off > len(buf):
            raise TruncatedFile(f"layer {i}: payload past end of file")
        entries.append((name_off, nlen, d_in, d_out, g, n_eff, deficiency, cb_off, codes_off, k))
    return entries, off


def deserialize(buf: bytes) -> list[CompressedLayer]:
    buf = bytes(buf)
    if len(buf) < _HEADER.size + 4:
        raise TruncatedFile(f"file too short ({len(buf)} bytes)")
    magic, version, precision, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported CLSC version {version}")
    if precision not in (16, 32):
        raise CorruptFile(f"bad codebook precision byte {precision}")
    try:
        entries, end = _layout(buf, precision, count)
        short = None
    except CorruptFile as exc:
        entries, end, short = None, None, exc
    (stored,) = _U32.unpack_from(buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored:
        # the CRC decides unless the declared layout needs more bytes than exist
        if isinstance(short, TruncatedFile):
            raise short
        raise ChecksumError("CRC-32 mismatch")
    if short is not None:
        raise short
    if end + 4 != len(buf):
        raise CorruptFile("declared layout does not match file size despite a valid CRC")
    dtype = "<f2" if precision == 16 else "<f4"
    layers = []
    for name_off, nlen, d_in, d_out, g, n_eff, deficiency, cb_off, codes_off, k in entries:
        try:
            name = buf[name_off : name_off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFile(f"layer name is not UTF-8: {exc}") from None
        codebook = np.frombuffer(buf, dtype=dtype, count=n_eff * g, offset=cb_off)
        codes = np.frombuffer(buf, dtype="<u2", count=k, offset=codes_off)
        layer = CompressedLayer(
            name, d_in, d_out, g, deficiency,
            codebook.astype(FLOAT).reshape(n_eff, g),
            codes.astype(np.uint16),
            precision,
        )
        try:
            layer.validate()
        except CorruptLayer as exc:
            raise CorruptFile(str(exc)) from None
        layers.append(layer)
    return layers


def save_clsc(path, layers, codebook_precision: int | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(layers, codebook_precision))


def load_clsc(path) -> list[CompressedLayer]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
