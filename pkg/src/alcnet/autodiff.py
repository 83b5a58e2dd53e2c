"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor records the operation that produced it, its parents and a backward
closure; calling backward() on a scalar output walks the recorded graph in
reverse topological order and accumulates gradients into every reachable
Parameter (summing across fan-out). The primitive set is exactly what the
contrast/fusion/net modules need: broadcast arithmetic, relu/sigmoid,
elementwise max, stack reductions, conv2d, nearest upsampling and global
average pooling.
"""

import itertools

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Parameter", "backward", "grad_check", "topo_order",
    "relu", "sigmoid", "maximum", "stack_reduce", "conv2d",
    "upsample_nearest", "global_avg_pool", "make_op", "accumulate",
]


class Tensor:
    """Dense float64 array plus gradient slot and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # arithmetic sugar; scalars are wrapped as constant leaves
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self):
        return sum_all(self)


class Parameter(Tensor):
    """Trainable leaf; grad is allocated eagerly and zeroed explicitly."""

    _counter = itertools.count()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, op="parameter")
        self.grad = np.zeros_like(self.data)
        self.uid = next(Parameter._counter)
        self.name = name

    __slots__ = ("uid", "name")

    def zero_grad(self):
        self.grad[...] = 0.0


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def accumulate(t: Tensor, g: np.ndarray):
    """Add a gradient contribution to `t` (no-op for non-grad leaves)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(data, parents, op, backward_fn) -> Tensor:
    """Record an operation node; the graph is pruned below non-grad leaves."""
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, op=op, parents=parents)
    if rg:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def topo_order(out: Tensor) -> list:
    """Reverse-mode evaluation order: every parent precedes its consumer."""
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor):
    """Populate gradients of everything reachable from a scalar output."""
    if out.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {out.data.shape}")
    order = topo_order(out)
    if out.grad is None:
        out.grad = np.zeros_like(out.data)
    out.grad += np.ones_like(out.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return make_op(data, (a, b), "add", bwd)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return make_op(data, (a, b), "sub", bwd)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_op(data, (a, b), "mul", bwd)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_op(data, (a, b), "div", bwd)


def neg(a):
    a = _coerce(a)

    def bwd(g):
        accumulate(a, -g)

    return make_op(-a.data, (a,), "neg", bwd)


def power(a, p: float):
    a = _coerce(a)
    p = float(p)
    data = a.data ** p

    def bwd(g):
        accumulate(a, g * p * a.data ** (p - 1.0))

    return make_op(data, (a,), "pow", bwd)


def sum_all(a):
    a = _coerce(a)

    def bwd(g):
        accumulate(a, np.broadcast_to(g, a.data.shape))

    return make_op(a.data.sum(), (a,), "sum", bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = _coerce(a)
    mask = a.data > 0.0

    def bwd(g):
        accumulate(a, g * mask)

    return make_op(np.where(mask, a.data, 0.0), (a,), "relu", bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids exp overflow for large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _coerce(a)
    s = _sigmoid(a.data)

    def bwd(g):
        accumulate(a, g * s * (1.0 - s))

    return make_op(s, (a,), "sigmoid", bwd)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def maximum(a, b):
    """Elementwise max of same-shape tensors; ties route gradient to `a`."""
    a, b = _coerce(a), _coerce(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"maximum: shape mismatch {a.data.shape} vs {b.data.shape}")
    take_a = a.data >= b.data

    def bwd(g):
        accumulate(a, g * take_a)
        accumulate(b, g * ~take_a)

    return make_op(np.where(take_a, a.data, b.data), (a, b), "maximum", bwd)


def stack_reduce(maps, kind: str):
    """Per-position min/max over a stack of same-shape maps.

    Gradient is routed to the arg-extremum, lowest stack index on ties.
    """
    if len(maps) == 0:
        raise ValueError("stack_reduce: empty stack")
    maps = [_coerce(m) for m in maps]
    shape = maps[0].data.shape
    for m in maps[1:]:
        if m.data.shape != shape:
            raise ValueError(f"stack_reduce: shape mismatch {m.data.shape} vs {shape}")
    stacked = np.stack([m.data for m in maps], axis=0)
    if kind == "max":
        idx = np.argmax(stacked, axis=0)
    elif kind == "min":
        idx = np.argmin(stacked, axis=0)
    else:
        raise ValueError(f"stack_reduce: unknown kind {kind!r}")
    data = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def bwd(g):
        for i, m in enumerate(maps):
            accumulate(m, g * (idx == i))

    return make_op(data, maps, f"stack_{kind}", bwd)


def conv2d(x, w, stride: int = 1, padding: int | None = None):
    """Cross-correlation of a (Cin,H,W) map with (Cout,Cin,k,k) weights.

    Zero padding of k//2 preserves spatial size at stride 1; output spatial
    dims are ceil(H/stride) x ceil(W/stride).
    """
    x, w = _coerce(x), _coerce(w)
    if x.data.ndim != 3:
        raise ValueError(f"conv2d: input must be rank-3 (C,H,W), got rank {x.data.ndim}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be rank-4 (Cout,Cin,k,k), got rank {w.data.ndim}")
    cout, cin_k, k, k2 = w.data.shape
    if k != k2:
        raise ValueError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k not in (1, 3):
        raise ValueError(f"conv2d: kernel size {k} unsupported (expected 1 or 3)")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride {stride} unsupported (expected 1 or 2)")
    if padding is None:
        padding = k // 2
    if padding != k // 2:
        raise ValueError(f"conv2d: padding must be k//2 = {k // 2}, got {padding}")
    cin = x.data.shape[0]
    if cin != cin_k:
        raise ValueError(
            f"conv2d: input has {cin} channels (dim 0) but kernel expects {cin_k} (dim 1)")

    data = kernels.conv2d_forward(x.data, w.data, stride, padding)
    x_shape = x.data.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            accumulate(x, kernels.conv2d_grad_input(g, w.data, stride, padding, x_shape))
        if w.requires_grad:
            accumulate(w, kernels.conv2d_grad_weight(g, x.data, stride, padding, k))

    return make_op(data, (x, w), "conv2d", bwd)


def upsample_nearest(x, factor: int):
    """Replicate each pixel factor x factor; adjoint sums each block."""
    x = _coerce(x)
    if factor < 2:
        raise ValueError(f"upsample_nearest: factor must be >= 2, got {factor}")
    c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bwd(g):
        accumulate(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return make_op(data, (x,), "upsample", bwd)


def global_avg_pool(x):
    """Per-channel spatial mean, output shape (C,1,1)."""
    x = _coerce(x)
    c, h, w = x.data.shape
    data = x.data.mean(axis=(1, 2)).reshape(c, 1, 1)

    def bwd(g):
        accumulate(x, np.broadcast_to(g / (h * w), x.data.shape))

    return make_op(data, (x,), "gap", bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(build, params, eps: float = 1e-5, coords_per_param: int = 4,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    `build` re-evaluates the scalar graph from the current parameter values.
    Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = build()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite forward value")
    backward(out)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        if n <= coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(build().data)
            flat[i] = keep - eps
            f_minus = float(build().data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[i]
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                raise FloatingPointError("grad_check: non-finite gradient value")
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
