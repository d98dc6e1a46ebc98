"""Minimal differentiable-array engine.

Tensors wrap numpy arrays; a Tape records operations in creation order
(which is already topological), and backward() replays the records in
reverse, accumulating gradients into requires_grad leaves.

Precision convention: float32 is the training default, float64 is used by
the numerical test suites (finite differences are meaningless at float32).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
LAYERNORM_EPS = 1e-5


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops record themselves only while a tape is
    active and at least one input requires grad. A tape is consumed by its
    first backward() call.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._records = []  # (out tensor, parents tuple, backward fn)
        self._consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @staticmethod
    def current():
        return Tape._stack[-1] if Tape._stack else None

    def record(self, out, parents, backward_fn):
        out._tape = self
        out.node_id = len(self._records)
        self._records.append((out, parents, backward_fn))

    def backward(self, loss):
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss._tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:  # interior node: defer to its own record
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
                else:  # leaf
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad = p.grad + pg
        self._records = []


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        Tape._stack.append(None)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False


class DiffTensor:
    """N-dimensional real array, optionally tracked by a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    # defer mixed numpy/DiffTensor arithmetic to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return DiffTensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x), dtype=dtype)


def _apply(out_data, parents, backward_fn):
    rg = any(p.requires_grad for p in parents)
    out = DiffTensor.__new__(DiffTensor)
    out.data = out_data
    out.requires_grad = rg
    out.grad = None
    out.node_id = None
    out._tape = None
    tape = Tape.current()
    if tape is not None and rg:
        tape.record(out, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_binary_shapes(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    _check_binary_shapes(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_binary_shapes(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_binary_shapes(a, b, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply(a.data * b.data, (a, b), bwd)


def div(a, b):
    _check_binary_shapes(a, b, "div")

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _apply(a.data / b.data, (a, b), bwd)


def maximum(a, b):
    _check_binary_shapes(a, b, "maximum")
    mask = (a.data >= b.data).astype(a.dtype)

    def bwd(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * (1 - mask), b.shape)

    return _apply(np.maximum(a.data, b.data), (a, b), bwd)


def neg(a):
    return _apply(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out_data = np.exp(a.data)
    return _apply(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return _apply(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _apply(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _apply(s, (a,), lambda g: (g * s * (1 - s),))


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _apply(a.data * s, (a,), lambda g: (g * s * (1 + a.data * (1 - s)),))


def relu(a):
    mask = (a.data > 0).astype(a.dtype)
    return _apply(a.data * mask, (a,), lambda g: (g * mask,))


def relu_squared(a):
    r = np.maximum(a.data, 0)
    return _apply(r * r, (a,), lambda g: (g * 2 * r,))


def softplus(a):
    return _apply(
        np.logaddexp(0, a.data),
        (a,),
        lambda g: (g / (1.0 + np.exp(-a.data)),),
    )


def clamp(a, lo, hi):
    mask = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return _apply(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "maximum": maximum,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "silu": silu,
    "relu": relu,
    "relu_squared": relu_squared,
    "softplus": softplus,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise primitive by name."""
    fn = _ELEMENTWISE.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape / reduction ops


def reshape(a, shape):
    old = a.shape
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose2d(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.shape}")
    return _apply(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _apply(a.data[idx].copy(), (a,), bwd)


def flip(a, axis):
    return _apply(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis),))


def sum_(a, axis=None, keepdims=False):
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce_max(a, axis, keepdims=False):
    out_data = a.data.max(axis=axis, keepdims=True)
    mask = (a.data == out_data).astype(a.dtype)
    # ties split the gradient evenly (measure zero for continuous inputs)
    mask = mask / mask.sum(axis=axis, keepdims=True)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * mask,)

    return _apply(out_data if keepdims else out_data.squeeze(axis), (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _apply(a.data @ b.data, (a, b), bwd)


def linear(x, w, bias=None):
    """x[...,in] @ w[in,out] (+ bias), flattening leading axes."""
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), w)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (w.shape[1],))


def layer_norm(x, gain, bias, eps=LAYERNORM_EPS):
    """Normalize the last axis to mean 0 / variance 1, then apply affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ValueError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match C={c}"
        )
    mu = mean_(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axis=-1, keepdims=True)
    y = div(xc, sqrt(var + eps))
    return add(mul(y, gain), bias)


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss; consumes its tape."""
    if loss._tape is None:
        raise ValueError("loss is not on any tape (was it computed under `with Tape()`?)")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# numerical checking


def finite_difference_gradients(f, tensors, step=1e-4):
    """Central-difference gradients of scalar-valued f w.r.t. each tensor.

    f is called with no arguments and must read the tensors' current data.
    Use float64 tensors; at float32 the quotient is dominated by rounding.
    """
    grads = []
    for t in tensors:
        # index through unravel_index: reshape(-1) silently copies a
        # non-contiguous array and reads/writes never land
        g = np.zeros(t.data.shape, t.data.dtype)
        for i in range(t.data.size):
            idx = np.unravel_index(i, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            fp = float(f())
            t.data[idx] = orig - step
            fm = float(f())
            t.data[idx] = orig
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def gradcheck_sampled(build_loss, tensors, n_samples=200, seed=0, step=1e-4,
                      rtol=1e-4, atol=1e-7):
    """gradcheck over a random subset of coordinates.

    Full central differences cost two evaluations per scalar parameter,
    prohibitive for whole networks; sampling coordinates uniformly across
    all tensors keeps the check seconds-scale at equal step and tolerance.
    Returns the worst relative error over the sampled coordinates.
    """
    for t in tensors:
        t.zero_grad()
    with Tape():
        loss = build_loss()
        backward(loss)
    sizes = [t.data.size for t in tensors]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with no_grad():
        for pick in picks:
            ti = int(np.searchsorted(bounds, pick, side="right"))
            j = int(pick - (bounds[ti - 1] if ti else 0))
            t = tensors[ti]
            # unravel_index, not reshape(-1): reshape copies a
            # non-contiguous array and the perturbation never lands
            idx = np.unravel_index(j, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            fp = float(build_loss().item())
            t.data[idx] = orig - step
            fm = float(build_loss().item())
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * step)
            analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[j])
            denom = max(abs(numeric), abs(analytic), atol / rtol)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def gradcheck(build_loss, tensors, step=1e-4, rtol=1e-4, atol=1e-7):
    """Compare tape gradients of build_loss() against finite differences.

    Returns the worst relative error observed. build_loss() must construct
    the loss afresh from the given leaf tensors each call.
    """
    for t in tensors:
        t.zero_grad()
    with Tape():
        loss = build_loss()
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]
    with no_grad():
        numeric = finite_difference_gradients(lambda: build_loss().item(), tensors, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(np.abs(n), np.maximum(np.abs(a), atol / rtol))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
