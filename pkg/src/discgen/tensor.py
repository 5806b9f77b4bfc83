"""Minimal deterministic reverse-mode autodiff over dense 2-D float64 arrays.

Design: define-by-run tape. Every Tensor produced by an op holds links to its
parents and a closure that scatters the output gradient back to them. The
graph is rebuilt on every forward pass; topological order is creation order,
so backward is deterministic and visits each node exactly once.

Only 2-D arrays exist. Scalars are (1, 1). Broadcasting is restricted to
bias-style row/column addition; everything else must match exactly.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, UnsupportedOpError

EPS = 1e-8

_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf and raises early."""
    global _debug_checks
    _debug_checks = bool(flag)


_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError("tensor", arr.shape)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, smul(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    # copy on first write unless the caller guarantees `g` is a freshly
    # allocated array it will not reuse: several backwards hand the same
    # array (or a view) to multiple parents, and later in-place accumulation
    # must not alias it
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents, backward: Callable[[np.ndarray], None] | None) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise ContractError("non-finite values produced by an op (debug check)")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ bd.T, fresh=True)
        if b.requires_grad:
            _accum(b, ad.T @ g, fresh=True)

    return _make(ad @ bd, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; one operand may be a broadcast row (1, n) or column (m, 1)."""
    sa, sb = a.shape, b.shape
    if sa != sb:
        row_b = sb[0] == 1 and sb[1] == sa[1]
        col_b = sb[1] == 1 and sb[0] == sa[0]
        row_a = sa[0] == 1 and sa[1] == sb[1]
        col_a = sa[1] == 1 and sa[0] == sb[0]
        if not (row_b or col_b or row_a or col_a):
            raise DimensionError("add", sa, sb)

    def backward(g):
        for t in (a, b):
            if not t.requires_grad:
                continue
            if t.shape == g.shape:
                _accum(t, g)
                continue
            gg = g
            if t.shape[0] == 1 and g.shape[0] != 1:
                gg = gg.sum(axis=0, keepdims=True)
            if t.shape[1] == 1 and g.shape[1] != 1:
                gg = gg.sum(axis=1, keepdims=True)
            _accum(t, gg, fresh=True)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g * bd, fresh=True)
        if b.requires_grad:
            _accum(b, g * ad, fresh=True)

    return _make(ad * bd, (a, b), backward)


def smul(a: Tensor, c) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * c, fresh=True)

    return _make(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            _accum(a, g * mask, fresh=True)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out_data * out_data), fresh=True)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            _accum(a, s * (g - (g * s).sum(axis=1, keepdims=True)), fresh=True)

    return _make(s, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = EPS) -> Tensor:
    """Row-wise layer norm with learnable (1, n) gain and bias."""
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True), fresh=True)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0, keepdims=True), fresh=True)
        if x.requires_grad:
            gh = g * gain.data
            _accum(x, inv * (gh - gh.mean(axis=1, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=1, keepdims=True)), fresh=True)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if axis not in (0, 1):
        raise ContractError(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    ref = tensors[0].shape[other]
    for t in tensors:
        if t.shape[other] != ref:
            raise DimensionError("concat", *(t.shape for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, o0, o1 in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accum(t, g[o0:o1, :] if axis == 0 else g[:, o0:o1])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def slice_(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    m, n = a.shape
    if not (0 <= r0 <= r1 <= m and 0 <= c0 <= c1 <= n):
        raise DimensionError("slice", a.shape, (r0, r1, c0, c1))

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[r0:r1, c0:c1] = g
            _accum(a, full, fresh=True)

    return _make(a.data[r0:r1, c0:c1].copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    rows, cols = shape
    if rows * cols != a.data.size:
        raise DimensionError("reshape", a.shape, shape)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make(a.data.reshape(rows, cols).copy(), (a,), backward)


def mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def backward(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.data, g[0, 0] * inv), fresh=True)

    return _make(np.array([[a.data.mean()]]), (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mse", a.shape, b.shape)
    diff = a.data - b.data
    inv = 2.0 / diff.size

    def backward(g):
        scale = g[0, 0] * inv
        if a.requires_grad:
            _accum(a, diff * scale, fresh=True)
        if b.requires_grad:
            _accum(b, diff * (-scale), fresh=True)

    return _make(np.array([[np.mean(diff * diff)]]), (a, b), backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of `a` by an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise DimensionError("gather_rows", a.shape, (idx.size,))

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full, fresh=True)

    return _make(a.data[idx].copy(), (a,), backward)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of `a` along rows."""
    m = a.shape[0]

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(reps, m, a.shape[1]).sum(axis=0), fresh=True)

    return _make(np.tile(a.data, (reps, 1)), (a,), backward)


def multihead_attention(q_in: Tensor, kv_in: Tensor,
                        wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                        heads: int, blocks: int = 1) -> Tensor:
    """Fused multi-head scaled-dot-product cross-attention.

    `q_in` is (blocks*Nq, d) and `kv_in` is (blocks*Nk, d); attention is
    computed independently within each of the `blocks` contiguous groups, so
    a whole batch of instruction-conditioned token sets goes through one op.
    The analytic backward is verified against finite differences in the test
    suite.
    """
    d = wq.shape[0]
    if q_in.shape[1] != d or kv_in.shape[1] != d:
        raise DimensionError("multihead_attention", q_in.shape, kv_in.shape, wq.shape)
    for w in (wq, wk, wv, wo):
        if w.shape != (d, d):
            raise DimensionError("multihead_attention", w.shape, (d, d))
    if d % heads != 0:
        raise ContractError(f"token dim {d} not divisible by {heads} heads")
    if q_in.shape[0] % blocks or kv_in.shape[0] % blocks:
        raise DimensionError("multihead_attention", q_in.shape, kv_in.shape, (blocks,))
    nq = q_in.shape[0] // blocks
    nk = kv_in.shape[0] // blocks
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(x, n):  # (B*n, d) -> (B, H, n, dh)
        return x.reshape(blocks, n, heads, dh).transpose(0, 2, 1, 3)

    def merge(x, n):  # (B, H, n, dh) -> (B*n, d)
        return x.transpose(0, 2, 1, 3).reshape(blocks * n, d)

    q = split(q_in.data @ wq.data, nq)
    k = split(kv_in.data @ wk.data, nk)
    v = split(kv_in.data @ wv.data, nk)
    attn = q @ k.transpose(0, 1, 3, 2)
    attn *= scale
    attn -= attn.max(axis=3, keepdims=True)
    np.exp(attn, out=attn)
    attn /= attn.sum(axis=3, keepdims=True)
    o = merge(attn @ v, nq)
    out_data = o @ wo.data

    def backward(g):
        do = g @ wo.data.T
        if wo.requires_grad:
            _accum(wo, o.T @ g, fresh=True)
        doh = split(do, nq)
        ds = doh @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ doh
        ds -= (ds * attn).sum(axis=3, keepdims=True)
        ds *= attn
        ds *= scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqf, dkf, dvf = merge(dq, nq), merge(dk, nk), merge(dv, nk)
        if wq.requires_grad:
            _accum(wq, q_in.data.T @ dqf, fresh=True)
        if wk.requires_grad:
            _accum(wk, kv_in.data.T @ dkf, fresh=True)
        if wv.requires_grad:
            _accum(wv, kv_in.data.T @ dvf, fresh=True)
        if q_in.requires_grad:
            _accum(q_in, dqf @ wq.data.T, fresh=True)
        if kv_in.requires_grad:
            _accum(kv_in, dkf @ wk.data.T + dvf @ wv.data.T, fresh=True)

    return _make(out_data, (q_in, kv_in, wq, wk, wv, wo), backward)


_OPS = {
    "matmul": matmul,
    "transpose": transpose,
    "add": add,
    "mul": mul,
    "smul": smul,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "mean": mean,
    "mse": mse,
    "gather_rows": gather_rows,
    "tile_rows": tile_rows,
    "multihead_attention": multihead_attention,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch an op by name. Unknown kinds raise UnsupportedOpError."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise UnsupportedOpError(kind) from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar loss.

    Populates `.grad` on every tensor that requires grad and returns a map
    {tensor id -> gradient array} for the graph's leaf parameters.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    # collect reachable nodes once
    seen = {loss._id}
    nodes = [loss]
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p._id not in seen:
                seen.add(p._id)
                nodes.append(p)
                stack.append(p)
    # creation order is a valid topological order
    nodes.sort(key=lambda t: t._id)
    loss.grad = np.ones((1, 1))
    for t in reversed(nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    return {t._id: t.grad for t in nodes if t.requires_grad and t._backward is None}


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be scalar-valued. Non-finite intermediate values are reported as
    an error of infinity rather than raised.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = f(*inputs)
        backward(out)
    except FloatingPointError:
        return math.inf
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            orig = t.data[ij]
            t.data[ij] = orig + h
            fp = f(*inputs).item()
            t.data[ij] = orig - h
            fm = f(*inputs).item()
            t.data[ij] = orig
            numeric = (fp - fm) / (2.0 * h)
            if not (math.isfinite(numeric) and math.isfinite(analytic[ij])):
                return math.inf
            err = abs(analytic[ij] - numeric) / max(1.0, abs(analytic[ij]))
            if err > worst:
                worst = err
    return worst
