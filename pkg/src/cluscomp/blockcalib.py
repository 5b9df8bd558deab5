"""Block-wise error minimization: train codebooks so a compressed block reproduces
its dense counterpart on calibration activations.

Codes are never touched; only codebook values move. The dense block sees ``X``
(the output of the previous dense block) and the compressed block sees ``X'``
(the output of the previous *compressed* block); both equal the embeddings for
the first block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import FLOAT, make_rng
from .errors import InvalidArgument, TrainingDiverged
from .model import CompressedBlock, ToyLM, block_forward, block_graph, block_weights
from .optim import AdamW, lr_at

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 20
    batch: int = 8
    schedule: str = "constant"
    warmup_ratio: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    holdout: float = 0.125  # fraction of calibration rows used only for best-epoch selection
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.epochs < 1 or self.batch < 1:
            raise InvalidArgument("epochs and batch must be >= 1")
        if not 0.0 <= self.holdout < 1.0:
            raise InvalidArgument("holdout must be in [0, 1)")


@dataclass
class CalibResult:
    block: CompressedBlock
    initial_loss: float
    best_loss: float
    best_epoch: int
    epoch_losses: list = field(default_factory=list)  # held-out loss after each epoch
    step_losses: list = field(default_factory=list)  # (epoch, step, lr, loss)


def _loss_and_grads(block: CompressedBlock, X, Y, dtype=FLOAT):
    weights, leaves = block_weights(block, trainable=True, dtype=dtype)
    out = block_graph(weights, block.attn_norm.astype(dtype), block.mlp_norm.astype(dtype),
                      np.asarray(X, dtype=dtype), block.n_heads)
    loss = ad.mse(out, np.asarray(Y, dtype=dtype))
    loss.backward()
    return float(loss.value), {k: t.grad for k, t in leaves.items()}


def codebook_gradients(block: CompressedBlock, X, target_Y, dtype=FLOAT) -> dict:
    """Gradient of the mean squared block-output error w.r.t. every codebook entry."""
    return _loss_and_grads(block, X, target_Y, dtype)[1]


def block_loss(block, X, Y, batch: int = 64) -> float:
    """Mean squared error between ``block(X)`` and ``Y``, evaluated in chunks."""
    total, count = 0.0, 0
    for s in range(0, X.shape[0], batch):
        out = block_forward(block, X[s : s + batch])
        diff = out.astype(np.float64) - Y[s : s + batch]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def _split(n_rows: int, holdout: float, seed: int):
    n_hold = int(round(n_rows * holdout))
    if n_hold == 0 or n_hold >= n_rows:
        idx = np.arange(n_rows)
        return idx, idx
    perm = make_rng(seed).permutation(n_rows)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def calibrate_block(dense, compressed: CompressedBlock, X, X_prime, cfg: CalibConfig = CalibConfig()) -> CalibResult:
    """Minimize ``mse(dense(X), compressed(X'))`` over the compressed block's codebooks.

    Returns the codebooks from the epoch with the lowest held-out loss
    (epoch 0 is the starting point, so the result is never worse than the
    input).
    """
    X = np.asarray(X, dtype=FLOAT)
    X_prime = np.asarray(X_prime, dtype=FLOAT)
    if X.shape != X_prime.shape:
        raise InvalidArgument(f"X and X' differ in shape: {X.shape} vs {X_prime.shape}")
    Y = np.concatenate([block_forward(dense, X[s : s + 64]) for s in range(0, X.shape[0], 64)])
    train_idx, hold_idx = _split(X.shape[0], cfg.holdout, cfg.seed)

    params = {k: v.astype(FLOAT).copy() for k, v in compressed.codebooks().items()}
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    current = compressed.with_codebooks(params)
    initial = block_loss(current, X_prime[hold_idx], Y[hold_idx])
    best_loss, best_epoch = initial, 0
    best_books = {k: v.copy() for k, v in params.items()}
    result = CalibResult(compressed, initial, initial, 0, [initial])

    steps_per_epoch = -(-len(train_idx) // cfg.batch)
    total = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[make_rng(cfg.seed * 1_000_003 + epoch).permutation(len(train_idx))]
        for s in range(0, len(order), cfg.batch):
            rows = order[s : s + cfg.batch]
            current = compressed.with_codebooks(params)
            loss, grads = _loss_and_grads(current, X_prime[rows], Y[rows])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite block loss at epoch {epoch}", state=best_books)
            lr = lr_at(step, total, cfg.lr, cfg.schedule, cfg.warmup_ratio)
            opt.step(grads, lr)
            result.step_losses.append((epoch, step, lr, loss))
            step += 1
        held = block_loss(compressed.with_codebooks(params), X_prime[hold_idx], Y[hold_idx])
        if not np.isfinite(held):
            raise TrainingDiverged(f"non-finite held-out loss at epoch {epoch}", state=best_books)
        result.epoch_losses.append(held)
        if held < best_loss:
            best_loss, best_epoch = held, epoch
            best_books = {k: v.copy() for k, v in params.items()}
        log.debug("epoch %d held-out mse %.6g (best %.6g)", epoch, held, best_loss)

    result.block = compressed.with_codebooks(best_books)
    result.best_loss = best_loss
    result.best_epoch = best_epoch
    return result


def calibrate_model(dense_model: ToyLM, compressed_model: ToyLM, calib_tokens,
                    cfg: CalibConfig = CalibConfig()) -> tuple[ToyLM, list[CalibResult]]:
    """Calibrate every compressed block in order.

    Block ``i`` is trained on ``X`` from the dense chain and ``X'`` from the
    chain of already-calibrated compressed blocks.
    """
    if not compressed_model.blocks:
        raise InvalidArgument("model has no blocks")
    tokens = np.asarray(calib_tokens)
    X = dense_model.embed[tokens].astype(FLOAT)
    X_prime = compressed_model.embed[tokens].astype(FLOAT)
    blocks, results = [], []
    for dense, comp in zip(dense_model.blocks, compressed_model.blocks):
        if isinstance(comp, CompressedBlock):
            res = calibrate_block(dense, comp, X, X_prime, cfg)
            comp = res.block
            results.append(res)
        blocks.append(comp)
        X = _chunked_forward(dense, X)
        X_prime = _chunked_forward(comp, X_prime)
    return replace(compressed_model, blocks=blocks), results


def _chunked_forward(block, X, batch: int = 64):
    return np.concatenate([block_forward(block, X[s : s + batch]) for s in range(0, X.shape[0], batch)])
