"""``cluscomp`` command line: compress, calibrate, recover, finetune, evaluate.

Every subcommand accepts ``--config FILE.json`` whose keys are the long option
names (dashes or underscores); explicit flags override the file. The fully
resolved configuration is written next to the primary output as
``<output>.config.json``.

Exit codes: 0 success, 1 usage, 2 data/corruption, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .blockcalib import CalibConfig, calibrate_model
from .checkpoint import attach_compressed, load_lm, read_manifest, save_lm, write_manifest
from .clustering import KMeansConfig
from .codec import (
    CODEBOOK_BITS,
    DEFAULT_N,
    bits_per_param,
    compress_layer,
    load_clsc,
    param_budget,
    quantize_codebook,
    reconstruct,
    save_clsc,
)
from .diagnostics import DiagnosticReport, code_entropy, kurtosis, wanda_score
from .errors import (
    ClusCompError,
    CorruptFile,
    CorruptLayer,
    DegenerateInput,
    InvalidArgument,
    ManifestError,
    TrainingDiverged,
)
from .experiments import gn_sweep, matched_pairs, relative_error, sweep_violations
from .model import LINEAR_NAMES, ModelConfig, init_lm
from .recovery import (
    FinetuneConfig,
    RecoveryConfig,
    TrainConfig,
    copy_task_mask,
    finetune,
    lm_forward_loss,
    pretrain,
    recover,
    token_accuracy,
)
from .toydata import CorpusSpec, WeightGenSpec, batchify, gen_corpus, gen_weights

log = logging.getLogger("cluscomp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
WORKERS_ENV = "CLUSCOMP_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers ----------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[h] for h in header])


def _echo_config(args, output) -> None:
    if output is None:
        return
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    path = Path(str(output) + ".config.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def read_corpus(path, vocab: int) -> np.ndarray:
    """Token ids from a file.

    ``.txt``: UTF-8 text, printable ASCII 32..126 -> ids 0..94 and every other
    byte -> 95 (needs vocab >= 96). Anything else: little-endian uint16 ids.
    """
    p = Path(path)
    try:
        raw = p.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"corpus file missing: {p}") from None
    if p.suffix == ".txt":
        if vocab < 96:
            raise InvalidArgument("text corpora need vocab >= 96")
        b = np.frombuffer(raw, dtype=np.uint8).astype(np.int32)
        return np.where((b >= 32) & (b <= 126), b - 32, 95).astype(np.int32)
    if len(raw) % 2:
        raise CorruptFile(f"{p}: odd byte count for uint16 token ids")
    ids = np.frombuffer(raw, dtype="<u2").astype(np.int32)
    if ids.size and ids.max() >= vocab:
        raise CorruptFile(f"{p}: token id {ids.max()} >= vocab {vocab}")
    return ids


def _corpus(args, vocab: int) -> np.ndarray:
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus, vocab)
    spec = CorpusSpec(vocab=vocab, length=args.corpus_length, order=args.corpus_order,
                      seed=args.corpus_seed, kind=args.corpus_kind, alpha=args.corpus_alpha,
                      copy_len=args.copy_len)
    return gen_corpus(spec)


def _rows(args, vocab: int):
    rows = batchify(_corpus(args, vocab), args.seq_len)
    if rows.shape[0] <= args.heldout:
        raise InvalidArgument(f"corpus yields {rows.shape[0]} rows; need more than --heldout {args.heldout}")
    return rows[: -args.heldout], rows[-args.heldout :]


def _compressed_model(args):
    dense = load_lm(args.checkpoint)
    return dense, attach_compressed(dense, load_clsc(args.clsc))


def _workers(value) -> int:
    if value is not None:
        return value
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidArgument(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return 1


def _compress_one(task):
    name, W, g, n, cfg, precision = task
    return compress_layer(W, g, n, cfg, name=name, codebook_precision=precision)


# --- commands ---------------------------------------------------------------


def cmd_gen_weights(args):
    spec = WeightGenSpec(args.distribution, args.rows, args.cols, args.seed, args.df,
                         args.rate, args.magnitude, args.scale)
    write_manifest(args.out, {args.name: gen_weights(spec)})
    _echo_config(args, Path(args.out) / "manifest.json")
    print(f"wrote {args.out}/manifest.json")


def cmd_init_model(args):
    cfg = ModelConfig(args.vocab, args.model_dim, args.n_heads, args.mlp_dim, args.n_blocks)
    model = init_lm(cfg, args.seed)
    if args.pretrain_epochs:
        train, held = _rows(args, cfg.vocab)
        tc = TrainConfig(lr=args.lr, schedule="cosine", warmup_ratio=0.05, max_grad_norm=1.0,
                         batch=args.batch, seq_len=args.seq_len, epochs=args.pretrain_epochs, seed=args.seed)
        res = pretrain(model, train, held, tc)
        model = res.model
        print(f"pretrained: held-out ppl {math.exp(res.initial_eval):.3f} -> {math.exp(res.best_eval):.3f}")
    save_lm(args.out, model)
    _echo_config(args, Path(args.out) / "manifest.json")
    print(f"wrote {args.out}/manifest.json")


def cmd_compress(args):
    tensors, model_cfg = read_manifest(args.manifest)
    if model_cfg is not None:
        names = [n for n in tensors if n.startswith("blocks.") and n.split(".")[-1] in LINEAR_NAMES]
    else:
        names = list(tensors)
    if not names:
        raise ManifestError("manifest holds no matrices to compress")
    tasks = []
    for i, name in enumerate(names):
        cfg = KMeansConfig(n_clusters=args.n, iterations=args.iters, seed=args.seed + i, restarts=args.restarts)
        tasks.append((name, tensors[name], args.g, args.n, cfg, args.precision))
    workers = _workers(args.workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            layers = list(pool.map(_compress_one, tasks))
    else:
        layers = [_compress_one(t) for t in tasks]
    save_clsc(args.out, layers, args.precision)
    rows = []
    for layer in layers:
        formula = bits_per_param(layer.d_in, layer.d_out, layer.g, args.n, codebook_bits=args.precision)
        actual = layer.bit_report()
        rows.append({
            "name": layer.name, "d_in": layer.d_in, "d_out": layer.d_out, "g": layer.g, "n": args.n,
            "n_effective": layer.n_effective, "deficiency": layer.deficiency,
            "bits_formula": f"{float(formula.bits_per_param):.6f}",
            "bits_actual": f"{float(actual.bits_per_param):.6f}",
            "rel_error": f"{relative_error(tensors[layer.name], reconstruct(layer)):.6f}",
        })
    header = list(rows[0])
    if args.bits_csv:
        _write_csv(args.bits_csv, header, rows)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header])
    _echo_config(args, args.out)


def _add_training_rows(writer_rows, result, extra=None):
    for s in result.steps:
        row = dict(extra or {})
        row.update(s)
        writer_rows.append(row)


def cmd_calibrate(args):
    dense, comp = _compressed_model(args)
    train, _ = _rows(args, dense.config.vocab)
    calib = train[: args.samples]
    cfg = CalibConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs, batch=args.batch,
                      holdout=args.holdout, seed=args.seed)
    model, results = calibrate_model(dense, comp, calib, cfg)
    save_clsc(args.out, model.compressed_layers(), args.precision)
    rows = []
    for bi, res in enumerate(results):
        for epoch, step, lr, loss in res.step_losses:
            rows.append({"block": bi, "epoch": epoch, "step": step, "lr": lr, "loss": loss})
        print(f"block {bi}: held-out mse {res.initial_loss:.6g} -> {res.best_loss:.6g} (epoch {res.best_epoch})")
    if args.loss_csv:
        _write_csv(args.loss_csv, ["block", "epoch", "step", "lr", "loss"], rows)
    _echo_config(args, args.out)


def _train_command(args, kind):
    dense, comp = _compressed_model(args)
    train, held = _rows(args, dense.config.vocab)
    base = RecoveryConfig if kind == "recover" else FinetuneConfig
    overrides = {k: getattr(args, k) for k in ("lr", "weight_decay", "warmup_ratio", "batch", "epochs", "seed")
                 if getattr(args, k) is not None}
    overrides["seq_len"] = args.seq_len
    if args.max_grad_norm is not None:
        overrides["max_grad_norm"] = args.max_grad_norm if args.max_grad_norm > 0 else None
    cfg = base(**overrides)
    for key in ("lr", "weight_decay", "warmup_ratio", "batch", "epochs", "seed"):
        setattr(args, key, getattr(cfg, key))
    args.max_grad_norm = cfg.max_grad_norm or 0.0
    state = dict(np.load(args.resume)) if args.resume else None
    fn = recover if kind == "recover" else finetune
    res = fn(comp, train, held, cfg, state=state, stop_after_epoch=args.stop_after_epoch)
    out_model = res.final_model if args.stop_after_epoch else res.model
    save_clsc(args.out, out_model.compressed_layers(), args.precision)
    if args.state_out:
        np.savez(args.state_out, **res.state)
    if args.loss_csv:
        _write_csv(args.loss_csv, ["epoch", "step", "lr", "loss", "grad_norm", "clipped_norm"], res.steps)
    if args.eval_csv:
        _write_csv(args.eval_csv, ["epoch", "step", "heldout_loss"], res.evals)
    print(f"held-out ppl {math.exp(res.initial_eval):.4f} -> best {math.exp(res.best_eval):.4f}")
    _echo_config(args, args.out)


def cmd_recover(args):
    _train_command(args, "recover")


def cmd_finetune(args):
    _train_command(args, "finetune")


def cmd_stats(args):
    rows = []
    for g in args.g:
        budget = param_budget(args.d_in, args.d_out, g, args.n)
        disp = budget.display()
        rows.append({
            "setting": f"g{g}n{args.n}", "d_in": args.d_in, "d_out": args.d_out, "g": g, "n": args.n,
            "code_params": budget.code_params, "codebook_params": budget.codebook_params,
            "code_params_m": f"{disp['code_params_m']:.2f}", "codebook_params_m": f"{disp['codebook_params_m']:.2f}",
            "codebook_pct_table": "" if disp["codebook_pct"] is None else f"{disp['codebook_pct']:.2f}",
            "codebook_pct_exact": f"{float(budget.codebook_fraction) * 100:.4f}",
            "code_bits": f"{float(budget.bits.code_bits):.6f}",
            "codebook_bits": f"{float(budget.bits.codebook_bits):.6f}",
            "bits_per_param": f"{float(budget.bits.bits_per_param):.6f}",
            "bits_2dp": f"{budget.bits.rounded():.2f}",
        })
    header = list(rows[0])
    if args.out:
        _write_csv(args.out, header, rows)
        _echo_config(args, args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header])


def cmd_diag(args):
    tensors, model_cfg = read_manifest(args.manifest)
    layers = {l.name: l for l in load_clsc(args.clsc)} if args.clsc else {}
    acts = {}
    if model_cfg is not None and args.wanda:
        acts = _linear_inputs(load_lm(args.manifest), args)
    report = DiagnosticReport()
    for name, W in tensors.items():
        if W.shape[0] == 1:  # norm vectors
            continue
        try:
            k = kurtosis(W)
        except DegenerateInput:
            k = float("nan")
        ws = wanda_score(W.T, acts[name]).std if name in acts else float("nan")
        ent = code_entropy(layers[name].codes, layers[name].n_effective) if name in layers else float("nan")
        report.add(name, k, ws, ent)
    report.write_csv(args.out)
    _echo_config(args, args.out)


def _linear_inputs(model, args) -> dict:
    """Input activations of every block projection on a short calibration pass."""
    from . import autodiff as ad
    from .model import RMS_EPS, block_forward

    rows = batchify(_corpus(args, model.config.vocab), args.seq_len)[: args.samples]
    x = model.embed[rows].astype(np.float32)
    out = {}
    for i, b in enumerate(model.blocks):
        h = ad.rmsnorm(x, b.attn_norm, RMS_EPS).value
        for n in ("q", "k", "v"):
            out[f"blocks.{i}.{n}"] = h
        y = block_forward(b, x)
        att_out = _attention_output(b, h)
        out[f"blocks.{i}.o"] = att_out
        mid = x + att_out @ b.linears["o"]
        h2 = ad.rmsnorm(mid, b.mlp_norm, RMS_EPS).value
        out[f"blocks.{i}.up"] = h2
        out[f"blocks.{i}.gate"] = h2
        gate = h2 @ b.linears["gate"]
        out[f"blocks.{i}.down"] = gate / (1 + np.exp(-gate)) * (h2 @ b.linears["up"])
        x = y
    return out


def _attention_output(block, h):
    from . import autodiff as ad
    from .model import rope_tables

    b_, t, d = h.shape
    nh = block.n_heads
    hd = d // nh
    cos, sin = rope_tables(t, hd)

    def heads(z):
        return z.reshape(b_, t, nh, hd).transpose(0, 2, 1, 3)

    q = ad.rope(heads(h @ block.linears["q"]), cos, sin).value
    k = ad.rope(heads(h @ block.linears["k"]), cos, sin).value
    v = heads(h @ block.linears["v"])
    p = ad.causal_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)).value
    return (p @ v).transpose(0, 2, 1, 3).reshape(b_, t, d)


def cmd_eval(args):
    dense = load_lm(args.checkpoint)
    _, held = _rows(args, dense.config.vocab)
    rows = [{"model": "dense", "loss": lm_forward_loss(dense, held)}]
    if args.clsc:
        comp = attach_compressed(dense, load_clsc(args.clsc))
        rows.append({"model": str(args.clsc), "loss": lm_forward_loss(comp, held)})
    for r in rows:
        r["ppl"] = math.exp(r["loss"])
        if args.corpus_kind == "copy" and not args.corpus:
            model = dense if r["model"] == "dense" else comp
            r["copy_accuracy"] = token_accuracy(model, held, copy_task_mask(args.seq_len, args.copy_len))
        else:
            r["copy_accuracy"] = ""
        w_err = ""
        if r["model"] != "dense":
            errs = [relative_error(dense.blocks[int(l.name.split(".")[1])].linears[l.name.split(".")[2]],
                                   reconstruct(l)) for l in comp.compressed_layers()]
            w_err = float(np.mean(errs))
        r["mean_weight_rel_error"] = w_err
    _write_csv(args.out, ["model", "loss", "ppl", "copy_accuracy", "mean_weight_rel_error"], rows)
    _echo_config(args, args.out)


def cmd_sweep(args):
    if args.manifest:
        tensors, _ = read_manifest(args.manifest)
        name = args.tensor or next(iter(tensors))
        if name not in tensors:
            raise ManifestError(f"tensor {name!r} not in manifest")
        W = tensors[name]
    else:
        W = gen_weights(WeightGenSpec(args.distribution, args.rows, args.cols, args.seed, args.df))
    rows = gn_sweep(W, args.g, args.n, seed=args.seed, restarts=args.restarts, iterations=args.iters)
    _write_csv(args.out, ["g", "n", "n_effective", "bits", "rel_error", "sq_error"], rows)
    for v in sweep_violations(rows):
        print("monotonicity violation:", v)
    for big, small in matched_pairs(rows):
        verdict = "larger n wins" if big["rel_error"] < small["rel_error"] else "larger n LOSES"
        print(f"matched bits: g{big['g']}n{big['n']} ({big['bits']:.3f}) vs "
              f"g{small['g']}n{small['n']} ({small['bits']:.3f}): {verdict}")
    _echo_config(args, args.out)


def cmd_quantize_codebook(args):
    layers = load_clsc(args.clsc)
    out = [quantize_codebook(l, args.bits) for l in layers]
    precision = args.precision or (16 if args.bits <= 16 else 32)
    save_clsc(args.out, out, precision)
    for before, after in zip(layers, out):
        a, b = reconstruct(before), reconstruct(after)
        print(f"{after.name}: codebook {args.bits}-bit, "
              f"rel change {relative_error(a, b) if np.any(a) else 0.0:.3e}, "
              f"bits/param {float(after.bit_report().bits_per_param):.4f}")
    _echo_config(args, args.out)


# --- parser -----------------------------------------------------------------


def _add_corpus_args(p):
    p.add_argument("--corpus", help="token file (.txt text or little-endian uint16 ids)")
    p.add_argument("--corpus-kind", default="markov", choices=["markov", "cycle", "copy"])
    p.add_argument("--corpus-length", type=int, default=131072)
    p.add_argument("--corpus-order", type=int, default=1)
    p.add_argument("--corpus-seed", type=int, default=1)
    p.add_argument("--corpus-alpha", type=float, default=0.1)
    p.add_argument("--copy-len", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--heldout", type=int, default=64, help="rows reserved for held-out evaluation")


def _add_train_args(p, kind):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clsc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", type=int, choices=[16, 32], default=16)
    p.add_argument("--loss-csv")
    p.add_argument("--eval-csv")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--max-grad-norm", type=float, help="<= 0 disables clipping")
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="state file written by --state-out")
    p.add_argument("--state-out")
    p.add_argument("--stop-after-epoch", type=int)
    _add_corpus_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cluscomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-weights", help="write a synthetic weight matrix checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="W")
    p.add_argument("--distribution", default="gaussian", choices=["gaussian", "student_t", "gaussian_with_outliers"])
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--df", type=float, default=3.0)
    p.add_argument("--rate", type=float, default=0.001)
    p.add_argument("--magnitude", type=float, default=50.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_weights)

    p = sub.add_parser("init-model", help="create (and optionally pretrain) a toy LM checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=96)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--mlp-dim", type=int, default=172)
    p.add_argument("--n-blocks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pretrain-epochs", type=int, default=0)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=16)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("compress", help="cluster every matrix of a checkpoint into a CLSC file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--g", type=int, default=4)
    p.add_argument("--n", type=int, default=DEFAULT_N)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help=f"process pool size (default ${WORKERS_ENV} or 1)")
    p.add_argument("--precision", type=int, choices=[16, 32], default=16)
    p.add_argument("--bits-csv")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("calibrate", help="block-wise codebook training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clsc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", type=int, choices=[16, 32], default=16)
    p.add_argument("--loss-csv")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--holdout", type=float, default=0.125)
    p.add_argument("--seed", type=int, default=0)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("recover", help="codebook-only next-token recovery training")
    _add_train_args(p, "recover")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("finetune", help="codebook-only finetuning on task data")
    _add_train_args(p, "finetune")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("stats", help="bits-per-parameter table")
    p.add_argument("--d-in", type=int, default=4096)
    p.add_argument("--d-out", type=int, default=4096)
    p.add_argument("--g", type=int, nargs="+", default=[4, 6, 9])
    p.add_argument("--n", type=int, default=DEFAULT_N)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("diag", help="kurtosis / Wanda / code-entropy report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clsc")
    p.add_argument("--out", required=True)
    p.add_argument("--wanda", action="store_true", help="collect activations from a toy LM checkpoint")
    p.add_argument("--samples", type=int, default=32)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("eval", help="held-out loss/perplexity of dense and compressed models")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clsc")
    p.add_argument("--out", required=True)
    _add_corpus_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="reconstruction error over a (g, n) grid")
    p.add_argument("--manifest")
    p.add_argument("--tensor")
    p.add_argument("--distribution", default="student_t", choices=["gaussian", "student_t", "gaussian_with_outliers"])
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=256)
    p.add_argument("--df", type=float, default=5.0)
    p.add_argument("--g", type=int, nargs="+", default=[4, 5, 6, 7, 8])
    p.add_argument("--n", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("quantize-codebook", help="put every codebook on a low-bit uniform grid")
    p.add_argument("--clsc", required=True)
    p.add_argument("--bits", type=int, required=True, choices=CODEBOOK_BITS)
    p.add_argument("--precision", type=int, choices=[16, 32])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize_codebook)
    return parser


def _apply_config(parser, argv):
    """Merge ``--config FILE`` values as defaults of the chosen subcommand."""
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(rest), None
    try:
        values = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"config file missing: {known.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {known.config}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    values = {k.replace("-", "_"): v for k, v in values.items()}
    command = values.pop("command", None)
    choices = parser._subparsers._group_actions[0].choices
    if command and not any(a in choices for a in rest):
        rest = [command] + rest
    probe = parser.parse_args(rest + _required_placeholders(parser, rest))
    allowed = set(vars(probe)) - {"func", "command"}
    unknown = set(values) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[probe.command]
    sub.set_defaults(**values)
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    args = parser.parse_args(rest)
    args.config = known.config
    return args, known.config


def _required_placeholders(parser, rest):
    """Dummy values for required options so the config keys can be probed."""
    choices = parser._subparsers._group_actions[0].choices
    cmd = next((a for a in rest if a in choices), None)
    if cmd is None:
        return []
    extra = []
    for action in choices[cmd]._actions:
        if action.required and not any(o in rest for o in action.option_strings):
            extra += [action.option_strings[-1], "0"]
    return extra


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, _ = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, CorruptFile, CorruptLayer, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgument, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClusCompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
