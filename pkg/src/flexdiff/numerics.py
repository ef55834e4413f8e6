"""Float64 numerics core: a small reverse-mode tape over numpy plus the
linear-algebra and transform helpers the rest of the engine builds on.

Everything runs in float64. Any op that produces a NaN or Inf raises
immediately; masked attention therefore uses a large finite negative bias
instead of -inf. Results are deterministic for fixed inputs on a fixed
platform/BLAS.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_FINITE_CHECKS = True
_GRAD_ENABLED = True

# Additive logit bias for masked attention positions. exp() of it underflows
# to exactly 0.0, which keeps block-diagonal attention exactly equivalent to
# per-segment attention while every stored value stays finite.
MASK_BIAS = -1.0e30


class NumericsError(ValueError):
    """Raised on shape/validity violations inside the numerics core."""


def _check_finite(a: np.ndarray, what: str = "result") -> None:
    if _FINITE_CHECKS and not np.isfinite(a).all():
        raise NumericsError(f"non-finite values in {what}")


@contextmanager
def no_grad():
    """Disable taping inside the block; ops return leaf tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 numpy array with an optional autodiff tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # keep numpy from absorbing us in mixed expressions; defer to the
    # reflected operators below so ndarray op Tensor stays on the tape
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Reverse-mode accumulation into .grad of every reachable leaf."""
        if seed is None:
            if self.data.size != 1:
                raise NumericsError("backward() without seed needs a scalar")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise NumericsError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                _check_finite(pg, "gradient")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return pow_const(self, c)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, vjp) -> Tensor:
    track = _GRAD_ENABLED and any(
        p.requires_grad or p._parents for p in parents
    )
    if track:
        return Tensor(data, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _check_finite(out, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _check_finite(out, "sub")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _check_finite(out, "mul")

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    _check_finite(out, "div")

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), vjp)


def pow_const(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = a.data**c
    _check_finite(out, "pow")

    def vjp(g):
        return (g * c * a.data ** (c - 1.0),)

    return _make(out, (a,), vjp)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    _check_finite(out, "exp")

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    _check_finite(out, "log")

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-form GELU with an analytic vjp."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_K * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        dx = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner
        return (g * dx,)

    return _make(out, (a,), vjp)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError("matmul expects >=2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    _check_finite(out, "matmul")
    from . import costmodel

    costmodel.record_matmul(a.data.shape, b.data.shape)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.data.shape[axis]
    else:
        n = int(np.prod([a.data.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


def take(a, key) -> Tensor:
    """Basic slicing/indexing with a scatter-back vjp."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.asarray(out), (a,), vjp)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def embedding_lookup(table, indices) -> Tensor:
    """Row gather from table [V, d]; gradient scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise NumericsError("embedding table must be 2-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise NumericsError("embedding index out of range")
    out = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (table,), vjp)


def bias_add(x, b) -> Tensor:
    """x + b with b broadcast over leading axes of x."""
    return add(x, b)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Last-axis layer norm, composed from primitives (grad via the tape)."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def segment_mask_bias(segments: list[int]) -> np.ndarray:
    """[N, N] additive attention bias for a block-diagonal segment layout."""
    if any(s <= 0 for s in segments):
        raise NumericsError("segment lengths must be positive")
    n = int(sum(segments))
    bias = np.full((n, n), MASK_BIAS)
    start = 0
    for s in segments:
        bias[start : start + s, start : start + s] = 0.0
        start += s
    return bias


def softmax_attention(q, k, v, segments: list[int] | None = None,
                      bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [..., N, d_h] tensors.

    `segments` restricts attention to block-diagonal groups of tokens (the
    only mask shape supported); `bias` is a precomputed additive logit map
    broadcastable to the score shape [..., N, N]. None means full attention.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    for t in (q, k, v):
        if t.ndim < 3:
            raise NumericsError("attention operands must be [..., N, d_h]")
    if (q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]
            or q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]):
        raise NumericsError("attention operand shapes are inconsistent")
    n, dh = q.shape[-2], q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = mul(matmul(q, transpose(k, axes)), 1.0 / math.sqrt(dh))
    if segments is not None:
        if bias is not None:
            raise NumericsError("pass segments or bias, not both")
        if sum(segments) != n:
            raise NumericsError("segment lengths must sum to N")
        bias = segment_mask_bias(segments)
    if bias is not None:
        scores = add(scores, bias)
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# non-differentiable helpers


def fft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D FFT over the last two axes; dims must be powers of two."""
    x = np.asarray(x)
    h, w = x.shape[-2], x.shape[-1]
    for d in (h, w):
        if d < 1 or (d & (d - 1)) != 0:
            raise NumericsError(f"fft2 needs power-of-two dims, got {h}x{w}")
    return np.fft.fft2(x, norm="ortho")


def ifft2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[-2], x.shape[-1]
    for d in (h, w):
        if d < 1 or (d & (d - 1)) != 0:
            raise NumericsError(f"ifft2 needs power-of-two dims, got {h}x{w}")
    return np.fft.ifft2(x, norm="ortho")


_PINV_DIM_CAP = 1024


def pseudo_inverse(m: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below rcond * sigma_max are truncated to zero. Matrix
    dims are capped at 1024 (desk scale); SVD non-convergence is reported as
    a NumericsError.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise NumericsError("pseudo_inverse expects a 2-D matrix")
    if max(m.shape) > _PINV_DIM_CAP:
        raise NumericsError(f"matrix dims exceed cap {_PINV_DIM_CAP}")
    _check_finite(m, "pseudo_inverse input")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericsError(f"SVD did not converge: {e}") from None
    if s.size and s[0] > 0:
        inv = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    else:
        inv = np.zeros_like(s)
    return (vt.T * inv) @ u.T


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999,
              eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update; returns (param, m, v)."""
    if step < 1:
        raise NumericsError("adam step index starts at 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    update = mhat / (np.sqrt(vhat) + eps) + weight_decay * param
    return param - lr * update, m, v


# Stream ids keep noise draws from different roles statistically and
# reproducibly independent for a fixed root seed.
BRANCH_INIT = 0
BRANCH_STEP = 1
BRANCH_COND = 2
BRANCH_UNCOND = 3
BRANCH_DATA = 4
BRANCH_TRAIN = 5


def philox(seed: int, t: int = 0, branch: int = 0) -> np.random.Generator:
    """Counter-based generator for the (seed, t, branch) stream."""
    if t < 0 or branch < 0:
        raise NumericsError("t and branch must be non-negative")
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
         np.uint64(((branch & 0xFFFFFFFF) << 32) | (t & 0xFFFFFFFF))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def finite_difference_gradient_check(
    f,
    params: list[Tensor],
    step: float = 1e-4,
    rtol: float = 1e-3,
    max_entries: int = 6,
    rng: np.random.Generator | None = None,
) -> float:
    """Central-difference check of f's gradients w.r.t. params.

    f() must rebuild the graph from the current param values and return a
    scalar Tensor. A random subset of entries per parameter is probed.
    Returns the worst relative error; raises NumericsError beyond rtol.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise NumericsError("gradient check needs a scalar loss")
    loss.backward()
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise NumericsError("parameter received no gradient")
        n = p.data.size
        picks = range(n) if n <= max_entries else rng.choice(n, max_entries, replace=False)
        for i in picks:
            idx = np.unravel_index(int(i), p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + step
            hi = float(f().data)
            p.data[idx] = orig - step
            lo = float(f().data)
            p.data[idx] = orig
            num = (hi - lo) / (2.0 * step)
            ana = float(p.grad[idx])
            denom = max(abs(num), abs(ana), 1e-6)
            rel = abs(num - ana) / denom
            worst = max(worst, rel)
            if rel > rtol:
                raise NumericsError(
                    f"gradient mismatch: analytic {ana:.6g} vs numeric {num:.6g} "
                    f"(rel {rel:.3g})"
                )
    return worst
