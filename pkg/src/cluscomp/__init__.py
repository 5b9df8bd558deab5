"""Cluster-based weight compression for small transformer language models."""

from __future__ import annotations

from .clustering import KMeansConfig, KMeansResult, kmeans
from .codec import (
    CompressedLayer,
    bits_per_param,
    compress_layer,
    deserialize,
    load_clsc,
    param_budget,
    quantize_codebook,
    reconstruct,
    save_clsc,
    serialize,
)
from .core import make_rng, reshape_to_groups, ungroup
from .errors import (
    BadMagic,
    BadVersion,
    ChecksumError,
    ClusCompError,
    CorruptFile,
    CorruptLayer,
    DegenerateInput,
    InvalidArgument,
    ManifestError,
    TrainingDiverged,
    TruncatedFile,
)
from .rtn import rtn_bits_per_param, rtn_dequantize, rtn_quantize

__all__ = [
    "BadMagic", "BadVersion", "ChecksumError", "ClusCompError", "CompressedLayer", "CorruptFile",
    "CorruptLayer", "DegenerateInput", "InvalidArgument", "KMeansConfig", "KMeansResult",
    "ManifestError", "TrainingDiverged", "TruncatedFile", "bits_per_param", "compress_layer",
    "deserialize", "kmeans", "load_clsc", "make_rng", "param_budget", "quantize_codebook",
    "reconstruct", "reshape_to_groups", "rtn_bits_per_param", "rtn_dequantize", "rtn_quantize",
    "save_clsc", "serialize", "ungroup",
]
