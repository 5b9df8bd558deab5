"""A small reverse-mode tape over numpy arrays.

Only the operations the toy transformer needs are provided. Each op records
its parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` walks the graph in reverse topological order. Gradients
are only accumulated into tensors created with ``requires_grad=True`` (and
anything downstream of them).
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(value, req, parents if req else (), backward if req else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            if b.value.ndim == 2 and a.value.ndim > 2:
                k = a.value.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.value @ b.value, (a, b), back)


def reshape(a, shape):
    a = _wrap(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def silu(a):
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    out = a.value * sig
    return _node(out, (a,), lambda g: (g * (sig * (1.0 + a.value * (1.0 - sig))),))


def rmsnorm(x, weight, eps=1e-6):
    """``x / rms(x) * weight`` over the last axis."""
    x, weight = _wrap(x), _wrap(weight)
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.value * x.value, axis=-1, keepdims=True) + eps)
    xhat = x.value * inv
    out = xhat * weight.value

    def back(g):
        gw = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0).reshape(weight.shape)
        gxhat = g * weight.value
        gx = inv * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _node(out, (x, weight), back)


def rope(x, cos, sin):
    """Rotary embedding on the last axis (rotate-half convention).

    ``cos``/``sin`` broadcast against ``x`` with shape (..., T, head_dim).
    """
    x = _wrap(x)
    h = x.shape[-1] // 2

    def rot(v, sign):
        first, second = v[..., :h], v[..., h:]
        return np.concatenate([-sign * second, sign * first], axis=-1)

    out = x.value * cos + rot(x.value, 1.0) * sin
    # transpose of the rotation: rotate by the opposite angle
    return _node(out, (x,), lambda g: (g * cos + rot(g * sin, -1.0),))


def causal_softmax(scores):
    """Softmax over the last axis with future positions masked out."""
    scores = _wrap(scores)
    t_q, t_k = scores.shape[-2:]
    mask = np.triu(np.ones((t_q, t_k), dtype=bool), k=1 + t_k - t_q)
    s = np.where(mask, -np.inf, scores.value)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    return _node(p, (scores,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def gather_weight(codebook, codes, d_in, d_out, deficiency):
    """Listing-style weight materialization: ``codebook[codes]`` viewed as
    ``(d_in, d_out + deficiency)`` with the padding columns dropped.

    The backward pass scatters into shared codebook rows, so every position
    that uses a centroid contributes to its gradient.
    """
    codebook = _wrap(codebook)
    idx = np.asarray(codes, dtype=np.int64)
    n, gdim = codebook.shape
    full = codebook.value[idx].reshape(d_in, d_out + deficiency)
    out = full[:, :d_out] if deficiency else full

    def back(gr):
        if deficiency:
            gfull = np.zeros((d_in, d_out + deficiency), dtype=gr.dtype)
            gfull[:, :d_out] = gr
        else:
            gfull = gr
        gvec = gfull.reshape(-1, gdim)
        gcb = np.empty((n, gdim), dtype=gr.dtype)
        for j in range(gdim):
            gcb[:, j] = np.bincount(idx, weights=gvec[:, j], minlength=n)
        return (gcb,)

    return _node(np.ascontiguousarray(out), (codebook,), back)


def embedding(table, ids):
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _node(table.value[ids], (table,), back)


def mse(pred, target):
    """Mean squared error over every element; ``target`` is a constant."""
    pred = _wrap(pred)
    target = np.asarray(target)
    diff = pred.value - target
    n = diff.size
    return _node(np.array(np.sum(diff * diff) / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy(logits, targets):
    """Mean token cross-entropy of ``logits`` (..., V) against integer ``targets`` (...)."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.value.reshape(-1, v)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = t.size
    loss = -logp[np.arange(n), t].sum() / n

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _node(np.array(loss), (logits,), back)
