"""Dense-tensor engine with reverse-mode differentiation and Adam.

A dynamic tape over numpy arrays, micrograd-style: every op records its
parents and a closure that pushes gradients back to them.  Training runs in
float32; gradient checks run the same graph in float64 (ops inherit the dtype
of their inputs).  Single-threaded per tape; no in-place mutation of produced
values outside the optimizer.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class OptimizerError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; canonical entry points are the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def scale(x, c):
    x = _as_tensor(x)
    c = x.data.dtype.type(c)
    out_data = x.data * c

    def backward(g):
        _accum(x, g * c)

    return _make(out_data, (x,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _make(out_data, (x,), backward)


def embedding(table, ids):
    """Row lookup.  ``ids`` is a plain integer array; gradients scatter-add."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)

    return _make(out_data, (table,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x, axes):
    x = _as_tensor(x)
    out_data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return _make(out_data, (x,), backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tuple(tensors), backward)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        # dL/dx = y * (g - sum(g*y))
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - inner))

    return _make(out_data, (x,), backward)


LN_EPS = 1e-6


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        n = x.data.shape[-1]
        gx_hat = g * gain.data
        # d xhat / dx folded analytically
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        _accum(x, gx)
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))

    return _make(out_data, (x, gain, bias), backward)


MASK_NEG = -1e9


def attention(q, k, v, mask=None):
    """softmax(q kᵀ / √d + mask) · v.

    Composite of taped primitives, so the backward pass needs no extra code.
    ``mask`` is a plain array of {0, MASK_NEG}; MASK_NEG underflows to exactly
    zero attention weight, which is what makes causal masking airtight.
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(f"attention head dims: q {q.data.shape} vs k {k.data.shape}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(f"attention lengths: k {k.data.shape} vs v {v.data.shape}")
    d = q.data.shape[-1]
    scores = scale(matmul(q, _swap_last(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=q.data.dtype)))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(t):
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def conv_patchify(image, kernel, patch):
    """Non-overlapping patch embedding via reshape + matmul.

    ``image`` (B,H,W,C), ``kernel`` (patch*patch*C, d).  Equivalent to a conv
    with kernel size = stride = patch; implemented as unfold-then-linear so the
    tape primitives carry the backward pass.
    """
    B, H, W, C = image.data.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} not divisible by patch {patch}")
    if kernel.data.shape[0] != patch * patch * C:
        raise ShapeError(f"kernel rows {kernel.data.shape[0]} != patch*patch*C {patch * patch * C}")
    gh, gw = H // patch, W // patch
    x = reshape(image, (B, gh, patch, gw, patch, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (B, gh * gw, patch * patch * C))
    return matmul(x, kernel)


def cross_entropy_masked(logits, targets, loss_mask):
    """Mean NLL over mask=1 positions; fused softmax backward.

    ``logits`` (..., V) taped; ``targets`` and ``loss_mask`` plain arrays of
    the leading shape.
    """
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask, dtype=logits.data.dtype)
    if targets.shape != logits.data.shape[:-1] or loss_mask.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape}, targets {targets.shape}, mask {loss_mask.shape}"
        )
    denom = loss_mask.sum()
    if denom == 0:
        raise ValueError("cross_entropy_masked: loss mask is all zero")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out_data = -(picked * loss_mask).sum() / denom

    def backward(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        _accum(logits, g * (soft - onehot) * (loss_mask[..., None] / denom))

    return _make(np.asarray(out_data), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Each call propagates exactly one unit of output gradient; grads already
    sitting on tensors are kept aside during the sweep and re-added after, so
    repeated backward accumulates instead of double-counting stale values.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    stash = [(node, node.grad) for node in order]
    for node, _ in stash:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node, old in stash:
        if old is not None:
            node.grad = old if node.grad is None else node.grad + old


# ---------------------------------------------------------------------------
# parameters and optimizer

class Parameter:
    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(np.asarray(data), requires_grad=True)

    @property
    def data(self):
        return self.value.data

    @data.setter
    def data(self, arr):
        self.value.data = arr

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.data.shape})"


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """Bias-corrected adaptive-moment update over named parameters."""
    state.step += 1
    t = state.step
    for p in params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {p.name}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite-difference verification

def finite_difference_check(make_loss, tensors, h=1e-5, n_samples=8, seed=0, denom_floor=1e-6,
                            h_fallback=None, fallback_threshold=1e-4):
    """Max relative error of taped grads vs central differences.

    ``make_loss()`` rebuilds the graph from the current contents of
    ``tensors`` (float64 leaf Tensors with requires_grad).  A few elements per
    tensor are probed; sampling is seeded.  ``denom_floor`` keeps the relative
    error meaningful where the true gradient sits below the cancellation noise
    of the difference quotient (~eps * |loss| / h).

    ``h_fallback``: when a forward pass happens to place a relu input within
    +/- h of zero, the +/-h evaluations straddle the kink and the quotient no
    longer estimates the derivative.  Elements whose error exceeds
    ``fallback_threshold`` are then re-probed at this smaller step, which
    shrinks the kink window; a genuinely wrong gradient keeps its error at
    every step size, so bugs still fail.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.zero_grad()
    loss = make_loss()
    backward(loss)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        gflat = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in idx:
            keep = flat[i]

            def quotient(step):
                flat[i] = keep + step
                up = make_loss().item()
                flat[i] = keep - step
                down = make_loss().item()
                flat[i] = keep
                return (up - down) / (2.0 * step)

            analytic = float(gflat[i])

            def rel(numeric):
                return abs(analytic - numeric) / max(abs(analytic), abs(numeric), denom_floor)

            err = rel(quotient(h))
            if h_fallback is not None and err > fallback_threshold:
                err = min(err, rel(quotient(h_fallback)))
            worst = max(worst, err)
    return worst
