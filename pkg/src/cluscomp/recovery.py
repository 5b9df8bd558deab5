"""Next-token training of the toy LM.

``recover`` and ``finetune`` update codebooks only: embeddings, norms, the
output head and all codes stay bitwise frozen. ``pretrain`` trains every
parameter of a dense model and exists to give the toy LM something worth
compressing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import FLOAT, make_rng
from .errors import InvalidArgument, TrainingDiverged
from .model import CompressedBlock, ToyLM, get_param, lm_graph, set_params
from .optim import AdamW, clip_grad_norm, global_norm, lr_at

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.0
    schedule: str = "cosine"
    warmup_ratio: float = 0.0
    max_grad_norm: float | None = 0.3
    batch: int = 8
    seq_len: int = 64
    epochs: int = 1
    eval_every: int | None = None  # steps between held-out evals; None = once per epoch
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.batch < 1 or self.epochs < 1 or self.seq_len < 2:
            raise InvalidArgument("batch, epochs must be >= 1 and seq_len >= 2")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise InvalidArgument("max_grad_norm must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def RecoveryConfig(**overrides) -> TrainConfig:
    """Recovery-training defaults: AdamW, lr 1e-5, cosine, no warmup, clip 0.3, batch 8, 1 epoch."""
    base = dict(lr=1e-5, weight_decay=0.0, schedule="cosine", warmup_ratio=0.0,
                max_grad_norm=0.3, batch=8, epochs=1)
    base.update(overrides)
    return TrainConfig(**base)


def FinetuneConfig(**overrides) -> TrainConfig:
    """Finetuning defaults (WikiText-2 column): lr 1e-4, wd 0.1, cosine, 3% warmup, 3 epochs, batch 64."""
    base = dict(lr=1e-4, weight_decay=0.1, schedule="cosine", warmup_ratio=0.03,
                max_grad_norm=None, batch=64, epochs=3)
    base.update(overrides)
    return TrainConfig(**base)


def _check_tokens(model: ToyLM, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 2 or tokens.shape[0] == 0:
        raise InvalidArgument("need at least one sequence of >= 2 tokens")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise InvalidArgument("token id out of vocabulary")
    return tokens


def lm_forward_loss(model: ToyLM, tokens) -> float:
    """Mean next-token cross-entropy (nats) over ``tokens`` (batch, seq)."""
    tokens = _check_tokens(model, tokens)
    total, count = 0.0, 0
    for s in range(0, tokens.shape[0], 32):
        rows = tokens[s : s + 32]
        logits, _ = lm_graph(model, rows[:, :-1])
        loss = ad.cross_entropy(logits, rows[:, 1:])
        n = rows[:, 1:].size
        total += float(loss.value) * n
        count += n
    return total / count


def perplexity(model: ToyLM, tokens) -> float:
    return math.exp(lm_forward_loss(model, tokens))


def token_accuracy(model: ToyLM, tokens, mask=None) -> float:
    """Argmax next-token accuracy; ``mask`` (seq-1,) selects scored target positions."""
    tokens = _check_tokens(model, tokens)
    hits, count = 0, 0
    for s in range(0, tokens.shape[0], 32):
        rows = tokens[s : s + 32]
        logits, _ = lm_graph(model, rows[:, :-1])
        ok = logits.value.argmax(axis=-1) == rows[:, 1:]
        if mask is not None:
            ok = ok[:, np.asarray(mask, dtype=bool)]
        hits += int(ok.sum())
        count += ok.size
    return hits / count


def copy_task_mask(seq_len: int, copy_len: int) -> np.ndarray:
    """Target positions that fall in the copied half of each ``x SEP x`` period."""
    period = 2 * copy_len + 1
    target_pos = np.arange(1, seq_len)
    return (target_pos % period) > copy_len


@dataclass
class TrainResult:
    model: ToyLM  # best held-out checkpoint
    final_model: ToyLM
    initial_eval: float
    best_eval: float
    steps: list = field(default_factory=list)  # dicts: epoch, step, lr, loss, grad_norm, clipped_norm
    evals: list = field(default_factory=list)  # dicts: epoch, step, heldout_loss
    state: dict = field(default_factory=dict)  # resumable optimizer/progress state


def _trainable_keys(model: ToyLM, mode: str) -> list[str]:
    _, leaves = lm_graph(model, np.zeros((1, 2), dtype=np.int64), trainable=mode)
    return list(leaves)


def train_lm(model: ToyLM, train_rows, heldout_rows, cfg: TrainConfig, mode: str = "codebooks",
             state: dict | None = None, stop_after_epoch: int | None = None) -> TrainResult:
    """Shared training loop.

    ``mode`` is ``"codebooks"`` or ``"all"``. ``state`` resumes a previous run
    (as returned in ``TrainResult.state``); ``stop_after_epoch`` ends the run
    early while keeping the schedule of the full ``cfg.epochs`` run, which is
    what an interrupted job looks like.
    """
    train_rows = _check_tokens(model, train_rows)
    heldout_rows = _check_tokens(model, heldout_rows)
    keys = _trainable_keys(model, mode)
    if not keys:
        raise InvalidArgument("model has no trainable parameters for mode " + repr(mode))
    params = {k: np.array(get_param(model, k), dtype=FLOAT, copy=True) for k in keys}
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)

    steps_per_epoch = -(-train_rows.shape[0] // cfg.batch)
    total = steps_per_epoch * cfg.epochs
    start_epoch, step = 1, 0
    if state:
        for k in keys:
            params[k][...] = state[f"param/{k}"]
        opt.load_state_dict({k[len("opt/"):]: v for k, v in state.items() if k.startswith("opt/")})
        start_epoch = int(state["epoch"]) + 1
        step = int(state["step"])
        best_eval = float(state["best_eval"])
        initial_eval = float(state["initial_eval"])
        best = {k: np.array(state[f"best/{k}"], dtype=FLOAT) for k in keys}
    else:
        initial_eval = lm_forward_loss(model, heldout_rows)
        best_eval = initial_eval
        best = {k: v.copy() for k, v in params.items()}

    result = TrainResult(model, model, initial_eval, best_eval)
    if not state:
        result.evals.append({"epoch": 0, "step": 0, "heldout_loss": initial_eval})

    def evaluate(epoch):
        nonlocal best_eval, best
        held = lm_forward_loss(set_params(model, params), heldout_rows)
        if not np.isfinite(held):
            raise TrainingDiverged(f"non-finite held-out loss at step {step}", state=best)
        result.evals.append({"epoch": epoch, "step": step, "heldout_loss": held})
        if held < best_eval:
            best_eval = held
            best = {k: v.copy() for k, v in params.items()}

    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    for epoch in range(start_epoch, last_epoch + 1):
        order = make_rng(cfg.seed * 1_000_003 + epoch).permutation(train_rows.shape[0])
        for s in range(0, len(order), cfg.batch):
            rows = train_rows[order[s : s + cfg.batch]]
            logits, leaves = lm_graph(set_params(model, params), rows[:, :-1], trainable=mode)
            loss = ad.cross_entropy(logits, rows[:, 1:])
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite training loss at step {step}", state=best)
            loss.backward()
            grads = {k: leaves[k].grad for k in keys}
            grads, norm = clip_grad_norm(grads, cfg.max_grad_norm)
            clipped = global_norm(grads)
            lr = lr_at(step, total, cfg.lr, cfg.schedule, cfg.warmup_ratio)
            opt.step(grads, lr)
            result.steps.append({"epoch": epoch, "step": step, "lr": lr, "loss": loss_value,
                                 "grad_norm": norm, "clipped_norm": clipped})
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0 and step % steps_per_epoch:
                evaluate(epoch)
        evaluate(epoch)
        log.debug("epoch %d: held-out loss %.4f (best %.4f)", epoch, result.evals[-1]["heldout_loss"], best_eval)

    result.model = set_params(model, best)
    result.final_model = set_params(model, params)
    result.best_eval = best_eval
    st = {"epoch": np.array(last_epoch), "step": np.array(step), "best_eval": np.array(best_eval),
          "initial_eval": np.array(initial_eval)}
    for k in keys:
        st[f"param/{k}"] = params[k].copy()
        st[f"best/{k}"] = best[k]
    for k, v in opt.state_dict().items():
        st[f"opt/{k}"] = np.array(v, copy=True)
    result.state = st
    return result


def _require_compressed(model: ToyLM):
    if not any(isinstance(b, CompressedBlock) for b in model.blocks):
        raise InvalidArgument("model has no compressed layers to train")


def recover(model: ToyLM, train_rows, heldout_rows, cfg: TrainConfig | None = None, **kw) -> TrainResult:
    """Codebook-only next-token training to win back quality lost to compression."""
    _require_compressed(model)
    return train_lm(model, train_rows, heldout_rows, cfg or RecoveryConfig(), "codebooks", **kw)


def finetune(model: ToyLM, task_rows, heldout_rows, cfg: TrainConfig | None = None, **kw) -> TrainResult:
    """Codebook-only training on downstream task data."""
    _require_compressed(model)
    return train_lm(model, task_rows, heldout_rows, cfg or FinetuneConfig(), "codebooks", **kw)


def pretrain(model: ToyLM, train_rows, heldout_rows, cfg: TrainConfig, **kw) -> TrainResult:
    """Full-parameter training of a dense model (also the full-finetuning reference)."""
    if any(isinstance(b, CompressedBlock) for b in model.blocks):
        raise InvalidArgument("pretrain expects a dense model")
    return train_lm(model, train_rows, heldout_rows, cfg, "all", **kw)
