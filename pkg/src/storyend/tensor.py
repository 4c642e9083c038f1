"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learned quantity in the model is a `Tensor`. Operations executed
while a `Tape` is active are recorded; `backward()` replays the tape in
reverse to accumulate gradients. All storage is float64 and every op
output is checked for NaN/Inf so numerical failures surface at the op
that produced them, never downstream.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, EmptySpanError, NumericError

_TAPE_STACK: list["Tape"] = []

# Flipped off only inside tight, already-verified loops (not exposed on the CLI).
CHECK_FINITE = True


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations for one forward pass.

    Not shareable across concurrent training steps; use one tape per step.
    Calling `backward` twice on the same tape accumulates gradients
    additively (grads are never implicitly zeroed).
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor constructor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf sharing this tensor's values, outside the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn, name):
    """Wrap an op result, check finiteness, and record it on the active tape."""
    arr = np.asarray(data, dtype=np.float64)
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient `g` back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss):
    """Populate `.grad` for every requires_grad tensor reachable from `loss`.

    Replays the loss's tape in reverse recording order. Gradients add onto
    any existing `.grad` contents; call `zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
        return
    adjoint = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape._records):
        g = adjoint.get(id(out))
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gt
            else:
                adjoint[key] = gt
                seen[key] = t
    for key, t in seen.items():
        if t.requires_grad:
            t._accumulate(adjoint[key])


# -- elementwise and linear algebra ---------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(a.data * b.data, (a, b), back, "mul")


def mul_scalar(a, s):
    s = float(s)

    def back(g):
        return (g * s,)

    return _make(a.data * s, (a,), back, "mul_scalar")


def matmul(a, b):
    """2-D matrix product with dA = dC.B^T, dB = A^T.dC backward rules."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), back, "matmul")


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def back(g):
        return (g.T,)

    return _make(a.data.T, (a,), back, "transpose")


def relu(a):
    mask = a.data > 0

    def back(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), back, "relu")


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def back(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), back, "sigmoid")


def softmax(a, axis=-1):
    """Numerically stable softmax along `axis` (max subtraction)."""
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), back, "softmax")


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    d = a.data.shape[-1]

    def back(g):
        gg = g * gain.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        da = term * inv
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return da, dgain, dbias

    _ = d
    return _make(xhat * gain.data + bias.data, (a, gain, bias), back, "layer_norm")


def mean_pool(a, mask=None):
    """Mean over the rows of an (n, d) tensor selected by a boolean mask."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_pool expects (n, d), got {a.data.shape}")
    n = a.data.shape[0]
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptySpanError("mean_pool over an all-false mask")

    def back(g):
        da = np.zeros_like(a.data)
        da[mask] = g / count
        return (da,)

    return _make(a.data[mask].mean(axis=0), (a,), back, "mean_pool")


def tsum(a):
    def back(g):
        return (np.full_like(a.data, float(g)),)

    return _make(a.data.sum(), (a,), back, "sum")


def tmean(a):
    n = a.data.size

    def back(g):
        return (np.full_like(a.data, float(g) / n),)

    return _make(a.data.mean(), (a,), back, "mean")


# -- losses ----------------------------------------------------------------


def cross_entropy(logits, target_index):
    """Negative log-likelihood of `target_index` under softmax(logits).

    Consumes raw logits; log-softmax is applied internally for stability.
    """
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy expects a logit vector, got {logits.data.shape}")
    t = int(target_index)
    if not 0 <= t < logits.data.shape[0]:
        raise ContractError(f"target index {t} outside vocabulary of {logits.data.shape[0]}")
    shifted = logits.data - logits.data.max()
    lse = math.log(np.exp(shifted).sum())
    probs = np.exp(shifted - lse)

    def back(g):
        d = probs.copy()
        d[t] -= 1.0
        return (d * float(g),)

    return _make(lse - shifted[t], (logits,), back, "cross_entropy")


def sequence_cross_entropy(logits, targets, mask=None):
    """Mean token-level cross entropy over an (n, V) logit matrix.

    `targets` holds one class index per row; rows where `mask` is False
    (padding) are excluded from the mean.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"sequence_cross_entropy expects (n, V), got {logits.data.shape}")
    n, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match {n} rows")
    if np.any((targets < 0) | (targets >= v)):
        raise ContractError("target index outside vocabulary")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptySpanError("sequence_cross_entropy with all positions masked out")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -(logp[np.arange(n), targets] * mask).sum() / count

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        d *= (mask[:, None] * float(g)) / count
        return (d,)

    return _make(nll, (logits,), back, "sequence_cross_entropy")


BCE_CLAMP = 1e-7


def binary_cross_entropy(p, y):
    """Mean BCE over probability vector `p`, clamped to [1e-7, 1 - 1e-7]."""
    if p.data.ndim != 1:
        raise DimensionError(f"binary_cross_entropy expects a vector, got {p.data.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.data.shape:
        raise DimensionError(f"label shape {y.shape} does not match {p.data.shape}")
    clamped = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)
    n = p.data.shape[0]
    loss = -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)).mean()

    def back(g):
        d = np.where(inside, (clamped - y) / (clamped * (1.0 - clamped)), 0.0)
        return (d * float(g) / n,)

    return _make(loss, (p,), back, "binary_cross_entropy")


# -- structural ops --------------------------------------------------------


def stack_rows(rows):
    """Stack a list of (d,) tensors into an (n, d) tensor."""
    if not rows:
        raise DimensionError("stack_rows needs at least one row")
    for r in rows:
        if r.data.ndim != 1:
            raise DimensionError(f"stack_rows expects vectors, got {r.data.shape}")

    def back(g):
        return tuple(g[i] for i in range(len(rows)))

    return _make(np.stack([r.data for r in rows]), tuple(rows), back, "stack_rows")


def concat_rows(a, b):
    """Concatenate two (n, d) tensors along rows."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"concat_rows mismatch: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[0]

    def back(g):
        return g[:na], g[na:]

    return _make(np.concatenate([a.data, b.data]), (a, b), back, "concat_rows")


def gather_rows(a, indices):
    """Select rows by index; backward scatter-adds (repeats accumulate)."""
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows expects (n, d), got {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError(f"row index out of range for {a.data.shape[0]} rows")

    def back(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _make(a.data[idx], (a,), back, "gather_rows")


def row(a, i):
    """Single row of an (n, d) tensor as a (d,) tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"row expects (n, d), got {a.data.shape}")
    i = int(i)
    if not 0 <= i < a.data.shape[0]:
        raise DimensionError(f"row {i} out of range for {a.data.shape[0]} rows")

    def back(g):
        da = np.zeros_like(a.data)
        da[i] = g
        return (da,)

    return _make(a.data[i], (a,), back, "row")


def slice_cols(a, start, stop):
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols expects (n, d), got {a.data.shape}")

    def back(g):
        da = np.zeros_like(a.data)
        da[:, start:stop] = g
        return (da,)

    return _make(a.data[:, start:stop], (a,), back, "slice_cols")


def concat_cols(parts):
    if not parts:
        raise DimensionError("concat_cols needs at least one part")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back, "concat_cols")
