"""Toy Llama-style transformer: pre-norm blocks with RoPE attention and SwiGLU MLP.

All projection matrices use the ``(d_in, d_out)`` orientation (``y = x @ W``).
A block's linear layers are either dense arrays (``BlockParams``) or
``CompressedLayer`` objects (``CompressedBlock``) whose weights are gathered
from the codebook on every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .codec import CompressedLayer, compress_layer
from .clustering import KMeansConfig
from .core import FLOAT, make_rng
from .errors import InvalidArgument

LINEAR_NAMES = ("q", "k", "v", "o", "up", "gate", "down")
RMS_EPS = 1e-6
ROPE_THETA = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 96
    model_dim: int = 64
    n_heads: int = 4
    mlp_dim: int = 172
    n_blocks: int = 2

    def __post_init__(self):
        if self.model_dim % self.n_heads or (self.model_dim // self.n_heads) % 2:
            raise InvalidArgument("model_dim must split into heads of even size")

    def linear_shape(self, name: str) -> tuple[int, int]:
        d, m = self.model_dim, self.mlp_dim
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "up": (d, m), "gate": (d, m), "down": (m, d)}[name]


@dataclass
class BlockParams:
    linears: dict  # name -> (d_in, d_out) float array
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    n_heads: int

    @property
    def model_dim(self) -> int:
        return self.attn_norm.shape[0]

    @property
    def mlp_dim(self) -> int:
        return self.linears["up"].shape[1]

    def validate(self) -> None:
        d = self.model_dim
        if set(self.linears) != set(LINEAR_NAMES):
            raise InvalidArgument(f"block needs linears {LINEAR_NAMES}")
        m = self.linears["up"].shape[1]
        want = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "up": (d, m), "gate": (d, m), "down": (m, d)}
        for name, shape in want.items():
            if self.linears[name].shape != shape:
                raise InvalidArgument(f"{name}: expected {shape}, got {self.linears[name].shape}")
        if self.mlp_norm.shape != (d,):
            raise InvalidArgument("norm weights must have shape (model_dim,)")


@dataclass
class CompressedBlock:
    layers: dict  # name -> CompressedLayer
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    n_heads: int

    @property
    def model_dim(self) -> int:
        return self.attn_norm.shape[0]

    def codebooks(self) -> dict:
        return {name: layer.codebook for name, layer in self.layers.items()}

    def with_codebooks(self, books: dict) -> "CompressedBlock":
        layers = {n: l.with_codebook(books[n]) if n in books else l for n, l in self.layers.items()}
        return replace(self, layers=layers)

    def dense(self) -> BlockParams:
        from .codec import reconstruct

        return BlockParams(
            {n: reconstruct(l) for n, l in self.layers.items()},
            self.attn_norm, self.mlp_norm, self.n_heads,
        )


def compress_block(block: BlockParams, g: int, n: int, seed: int = 0, iterations: int = 20,
                   restarts: int = 1, prefix: str = "") -> CompressedBlock:
    layers = {}
    for i, name in enumerate(LINEAR_NAMES):
        cfg = KMeansConfig(n_clusters=n, iterations=iterations, seed=seed + i, restarts=restarts)
        layers[name] = compress_layer(block.linears[name], g, n, cfg, name=prefix + name)
    return CompressedBlock(layers, block.attn_norm.copy(), block.mlp_norm.copy(), block.n_heads)


def rope_tables(seq_len: int, head_dim: int, dtype=FLOAT):
    inv = 1.0 / ROPE_THETA ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(np.arange(seq_len, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def block_graph(weights: dict, attn_norm, mlp_norm, x, n_heads: int):
    """Build the block computation on tape tensors. ``x`` is (B, T, D)."""
    x = ad._wrap(x)
    b, t, d = x.shape
    hd = d // n_heads
    dtype = x.value.dtype
    cos, sin = rope_tables(t, hd, dtype)

    h = ad.rmsnorm(x, attn_norm, RMS_EPS)

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, n_heads, hd)), (0, 2, 1, 3))

    q = ad.rope(heads(h @ weights["q"]), cos, sin)
    k = ad.rope(heads(h @ weights["k"]), cos, sin)
    v = heads(h @ weights["v"])
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), np.asarray(1.0 / np.sqrt(hd), dtype=dtype))
    att = ad.matmul(ad.causal_softmax(scores), v)
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, d))
    x = x + att @ weights["o"]

    h = ad.rmsnorm(x, mlp_norm, RMS_EPS)
    mlp = ad.mul(ad.silu(h @ weights["gate"]), h @ weights["up"]) @ weights["down"]
    return x + mlp


def block_weights(block, trainable: bool = False, dtype=None) -> tuple[dict, dict]:
    """Tape tensors for a block's projections.

    Returns ``(weights, leaves)``; ``leaves`` holds the trainable tensors
    (codebooks for compressed blocks, dense matrices otherwise) when
    ``trainable`` is set.
    """
    weights, leaves = {}, {}
    if isinstance(block, CompressedBlock):
        for name, layer in block.layers.items():
            cb = layer.codebook if dtype is None else layer.codebook.astype(dtype)
            leaf = ad.Tensor(cb, requires_grad=trainable)
            if trainable:
                leaves[name] = leaf
            weights[name] = ad.gather_weight(leaf, layer.codes, layer.d_in, layer.d_out, layer.deficiency)
    else:
        for name, w in block.linears.items():
            w = w if dtype is None else w.astype(dtype)
            leaf = ad.Tensor(w, requires_grad=trainable)
            if trainable:
                leaves[name] = leaf
            weights[name] = leaf
    return weights, leaves


def _check_input(block, X):
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[-1] != block.model_dim:
        raise InvalidArgument(f"expected activations (batch, seq, {block.model_dim}), got {X.shape}")
    return X


def block_forward(block, X, dtype=FLOAT) -> np.ndarray:
    """Forward pass of a dense or compressed block on ``X`` (batch, seq, model_dim)."""
    X = _check_input(block, X).astype(dtype)
    if isinstance(block, BlockParams):
        block.validate()
    weights, _ = block_weights(block, dtype=dtype)
    out = block_graph(weights, block.attn_norm.astype(dtype), block.mlp_norm.astype(dtype), X, block.n_heads)
    return out.value


def init_block(cfg: ModelConfig, rng: np.random.Generator, tail_df: float | None = None) -> BlockParams:
    """Random block; ``tail_df`` draws weights from a scaled Student-t instead of a Gaussian."""
    linears = {}
    for name in LINEAR_NAMES:
        d_in, d_out = cfg.linear_shape(name)
        if tail_df is None:
            w = rng.standard_normal((d_in, d_out))
        else:
            w = rng.standard_t(tail_df, (d_in, d_out)) * np.sqrt((tail_df - 2) / tail_df)
        linears[name] = (w / np.sqrt(d_in)).astype(FLOAT)
    ones = np.ones(cfg.model_dim, dtype=FLOAT)
    return BlockParams(linears, ones.copy(), ones.copy(), cfg.n_heads)


@dataclass
class ToyLM:
    config: ModelConfig
    embed: np.ndarray  # (vocab, D)
    blocks: list = field(default_factory=list)
    final_norm: np.ndarray = None
    head: np.ndarray = None  # (D, vocab)

    def compressed_layers(self) -> list[CompressedLayer]:
        return [l for b in self.blocks if isinstance(b, CompressedBlock) for l in b.layers.values()]

    def dense_param_count(self) -> int:
        total = self.embed.size + self.final_norm.size + self.head.size
        for b in self.blocks:
            total += b.attn_norm.size + b.mlp_norm.size
            if isinstance(b, CompressedBlock):
                total += sum(l.d_in * l.d_out for l in b.layers.values())
            else:
                total += sum(w.size for w in b.linears.values())
        return total

    def codebook_param_count(self) -> int:
        return sum(l.codebook.size for l in self.compressed_layers())


def init_lm(cfg: ModelConfig, seed: int = 0) -> ToyLM:
    rng = make_rng(seed)
    embed = (rng.standard_normal((cfg.vocab, cfg.model_dim)) * 0.5).astype(FLOAT)
    blocks = [init_block(cfg, rng) for _ in range(cfg.n_blocks)]
    for b in blocks:  # damp the residual branches at init
        b.linears["o"] *= 0.5
        b.linears["down"] *= 0.5
    head = (rng.standard_normal((cfg.model_dim, cfg.vocab)) / np.sqrt(cfg.model_dim)).astype(FLOAT)
    return ToyLM(cfg, embed, blocks, np.ones(cfg.model_dim, dtype=FLOAT), head)


def compress_lm(model: ToyLM, g: int, n: int, seed: int = 0, iterations: int = 20, restarts: int = 1) -> ToyLM:
    blocks = []
    for i, b in enumerate(model.blocks):
        blocks.append(compress_block(b, g, n, seed=seed + 100 * i, iterations=iterations,
                                     restarts=restarts, prefix=f"blocks.{i}."))
    return replace(model, blocks=blocks)


def lm_graph(model: ToyLM, tokens, trainable: str = "none", dtype=FLOAT):
    """Logits tensor for ``tokens`` (B, T) plus the trainable leaves.

    ``trainable`` is ``"none"``, ``"codebooks"`` (compressed blocks only) or
    ``"all"`` (every parameter of a dense model).
    """
    tokens = np.asarray(tokens)
    everything = trainable == "all"
    leaves = {}
    emb = ad.Tensor(model.embed.astype(dtype), requires_grad=everything)
    x = ad.embedding(emb, tokens)
    if everything:
        leaves["embed"] = emb
    for i, block in enumerate(model.blocks):
        train_block = everything or (trainable == "codebooks" and isinstance(block, CompressedBlock))
        weights, bl = block_weights(block, trainable=train_block, dtype=dtype)
        for name, leaf in bl.items():
            leaves[f"blocks.{i}.{name}"] = leaf
        an = ad.Tensor(block.attn_norm.astype(dtype), requires_grad=everything)
        mn = ad.Tensor(block.mlp_norm.astype(dtype), requires_grad=everything)
        if everything:
            leaves[f"blocks.{i}.attn_norm"] = an
            leaves[f"blocks.{i}.mlp_norm"] = mn
        x = block_graph(weights, an, mn, x, block.n_heads)
    fn = ad.Tensor(model.final_norm.astype(dtype), requires_grad=everything)
    head = ad.Tensor(model.head.astype(dtype), requires_grad=everything)
    if everything:
        leaves["final_norm"] = fn
        leaves["head"] = head
    logits = ad.rmsnorm(x, fn, RMS_EPS) @ head
    return logits, leaves


def get_param(model: ToyLM, key: str) -> np.ndarray:
    if key in ("embed", "final_norm", "head"):
        return getattr(model, key)
    _, i, name = key.split(".")
    block = model.blocks[int(i)]
    if name in ("attn_norm", "mlp_norm"):
        return getattr(block, name)
    if isinstance(block, CompressedBlock):
        return block.layers[name].codebook
    return block.linears[name]


def set_params(model: ToyLM, values: dict) -> ToyLM:
    """New model with the named parameters replaced (keys as produced by ``lm_graph``)."""
    embed, final_norm, head = model.embed, model.final_norm, model.head
    blocks = list(model.blocks)
    per_block: dict[int, dict] = {}
    for key, val in values.items():
        val = np.asarray(val, dtype=FLOAT)
        if key == "embed":
            embed = val
        elif key == "final_norm":
            final_norm = val
        elif key == "head":
            head = val
        else:
            _, i, name = key.split(".")
            per_block.setdefault(int(i), {})[name] = val
    for i, upd in per_block.items():
        b = blocks[i]
        an = upd.pop("attn_norm", b.attn_norm)
        mn = upd.pop("mlp_norm", b.mlp_norm)
        if isinstance(b, CompressedBlock):
            blocks[i] = replace(b.with_codebooks(upd), attn_norm=an, mlp_norm=mn)
        else:
            linears = dict(b.linears)
            linears.update(upd)
            blocks[i] = BlockParams(linears, an, mn, b.n_heads)
    return replace(model, embed=embed, blocks=blocks, final_norm=final_norm, head=head)
