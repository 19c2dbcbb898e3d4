"""Differentiable primitives.

Each primitive computes its forward value with numpy and, when any input lives
on a tape, records a closure mapping the output gradient to input gradients.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..numkit import sym_eig3
from .tape import ShapeError, Tensor, lift, tape_of

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def _record(op, value, inputs, backward):
    tape = tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = lift(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = lift(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = lift(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = lift(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = lift(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + th)
    out = x * half

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record("gelu", out, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out) applied over the last axis."""
    x, w = lift(x), lift(w)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])  # one 2-D GEMM is much faster than a stacked matmul
    out = (x2 @ wd).reshape(lead + (wd.shape[1],))
    if b is None:
        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2
        return _record("linear", out, (x, w), backward)
    b = lift(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out += b.data

    def backward_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, g2.sum(axis=0)

    return _record("linear", out, (x, w, b), backward_b)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = lift(a)
    return _record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


# -- reductions ------------------------------------------------------------


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = lift(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = lift(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation / probabilities -------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[row, label]``."""
    logits = lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _record("cross_entropy", np.asarray(out), (logits,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = lift(x), lift(gamma), lift(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", out, (x, gamma, beta), backward)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Normalise along the last axis. Zero rows raise, naming the row."""
    a = lift(a)
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    bad = np.argwhere(n[..., 0] <= eps)
    if bad.size:
        from ..numkit import ValidationError
        raise ValidationError(f"l2_normalize: row {tuple(int(i) for i in bad[0])} has norm <= {eps}")
    y = ad / n
    return _record("l2_normalize", y, (a,), lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,))


def mse(pred, target) -> Tensor:
    pred, target = lift(pred), lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _record(
        "mse", np.asarray((diff * diff).mean()), (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


# -- structural ------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    k = len(ts)
    return _record("stack", out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(k)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def gather(a, index) -> Tensor:
    """``a[index]`` for any numpy index; repeated indices accumulate in backward."""
    a = lift(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as e:
        raise ShapeError(f"gather: {e} (source shape {a.shape})") from None
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:  # no repeats possible, plain assignment suffices
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("gather", np.array(out), (a,), backward)


# -- spectral ----------------------------------------------------------------


def top_eig(gram) -> Tensor:
    """Largest eigenvalue of symmetric 3x3 matrices (batched over leading axes).

    The backward rule is ``u1 u1^T`` with ``u1`` the solver's top eigenvector.
    Where ``lambda_1`` is (numerically) repeated the derivative does not exist;
    the solver's deterministic ``u1`` is used anyway and the tape's
    ``eig_degenerate`` counter is incremented.
    """
    gram = lift(gram)
    if gram.shape[-2:] != (3, 3):
        raise ShapeError(f"top_eig: expected (..., 3, 3), got {gram.shape}")
    res = sym_eig3(gram.data)
    lam = res.eigenvalues[..., 0]
    u = res.eigenvectors[..., :, 0]
    ndeg = int(np.count_nonzero(res.degenerate))
    tape = tape_of(gram)
    if tape is not None and ndeg:
        tape.diagnostics["eig_degenerate"] += ndeg
    outer = u[..., :, None] * u[..., None, :]
    return _record("top_eig", np.asarray(lam), (gram,), lambda g: (np.asarray(g)[..., None, None] * outer,))
