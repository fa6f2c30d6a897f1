"""Dense float64 tensors with define-by-run reverse-mode autodiff, plus Adam.

Every operation records its parents and a closure that pushes the upstream
gradient back to them. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Graphs are rebuilt on every forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)

_check_finite = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contains NaN or infinity."""


class GraphError(RuntimeError):
    """Invalid use of the computation graph."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-node finiteness checks; returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == DTYPE:
        return x
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic info -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str,
              allow_inf: bool = False) -> "Tensor":
        if _check_finite:
            bad = np.isnan(data).any() if allow_inf else not np.isfinite(data).all()
            if bad:
                raise NonFiniteError(f"non-finite value produced by node '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        req = any(p.requires_grad for p in parents)
        out.requires_grad = req
        if req:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("root does not depend on any parameter requiring grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, p: float) -> "Tensor":
        return power(self, p)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def tensor(x, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def add_bias(a, const: np.ndarray) -> Tensor:
    """Add a constant array that may hold -inf entries (validity masks)."""
    a = _lift(a)
    const = _as_array(const)
    if np.isnan(const).any() or np.isposinf(const).any():
        raise NonFiniteError("bias may only contain finite values or -inf")
    sa = a.shape

    def bw(g):
        return (_unbroadcast(g, sa),)

    return Tensor._make(a.data + const, (a,), bw, "add_bias", allow_inf=True)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = _lift(a)
    ad = a.data
    if p == 2:
        out = ad * ad

        def bw(g):
            return (2.0 * g * ad,)
    else:
        out = ad ** p

        def bw(g):
            return (g * p * ad ** (p - 1),)

    return Tensor._make(out, (a,), bw, "pow")


def square(a) -> Tensor:
    return power(a, 2)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._make(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    a = _lift(a)
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (r,)

    return Tensor._make(out, (a,), bw, "sqrt")


def softplus(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bw(g):
        return (g / (1.0 + np.exp(-ad)),)

    return Tensor._make(out, (a,), bw, "softplus")


def relu(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    out = np.maximum(ad, 0.0)
    return Tensor._make(out, (a,), lambda g: (g * (ad > 0),), "relu")


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._make(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions, shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def fsum(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors, correctly rounded and hence order independent."""
    terms = [_lift(t) for t in terms]
    for t in terms:
        if t.data.size != 1:
            raise ShapeError(f"fsum expects scalars, got shape {t.shape}")
    out = np.asarray(math.fsum(float(t.data) for t in terms), dtype=DTYPE)
    n = len(terms)

    def bw(g):
        return tuple(np.broadcast_to(g, t.shape) for t in terms)

    return Tensor._make(out, tuple(terms), bw, "fsum") if n else Tensor(0.0)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._make(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    shape = a.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def gather1d(a, index: np.ndarray) -> Tensor:
    """Gather ``a[index]`` from a 1-D tensor with an integer array of any shape."""
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"gather1d expects a 1-D tensor, got shape {a.shape}")
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather1d: index out of range for length {n}")
    flat = index.ravel()

    def bw(g):
        return (np.bincount(flat, weights=g.ravel(), minlength=n).astype(DTYPE),)

    return Tensor._make(a.data[index], (a,), bw, "gather1d")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: " + ", ".join(str(t.shape) for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack: " + ", ".join(str(t.shape) for t in tensors)) from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    out = np.matmul(ad, bd)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NonFiniteError("softmax: a row has no finite entry")
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), bw, "softmax")


def biased_softmax(logits, alpha, dist: np.ndarray, scale: float = 1.0,
                   bias: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """softmax(scale * logits - alpha * dist + bias) as one node.

    ``alpha`` is a scalar tensor; ``dist`` and ``bias`` are constants (bias may
    hold -inf). Fusing saves several full-size temporaries per attention map.
    """
    logits, alpha = _lift(logits), _lift(alpha)
    if alpha.data.size != 1:
        raise ShapeError(f"biased_softmax: alpha must be scalar, got {alpha.shape}")
    a = float(alpha.data.reshape(()))
    z = logits.data * scale
    z -= a * dist
    if bias is not None:
        z += bias
    m = np.max(z, axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NonFiniteError("biased_softmax: a row has no finite entry")
    z -= m
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out = z
    a_shape = alpha.shape

    def bw(g):
        gz = g * out
        row = np.sum(gz, axis=axis, keepdims=True)
        tmp = np.multiply(out, row)
        gz -= tmp
        g_alpha = None
        if alpha.requires_grad:
            flat = gz.reshape(-1, *dist.shape).sum(axis=0) if gz.ndim > dist.ndim else gz
            g_alpha = np.array(-np.vdot(flat, dist)).reshape(a_shape)
        if not logits.requires_grad:
            return None, g_alpha
        gz *= scale
        return gz, g_alpha

    return Tensor._make(out, (logits, alpha), bw, "biased_softmax")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


def mse(pred, target) -> Tensor:
    d = sub(pred, target)
    return mean(square(d))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update. Parameters get fresh data arrays."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: params, grads and state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: parameter {i} has shape {p.shape}, grad {g.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        if lr != 0.0:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads: Iterable[np.ndarray | None]) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads if g is not None))


def clip_by_global_norm(grads: list[np.ndarray | None], max_norm: float) -> tuple[list, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads], norm


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"finite difference probe at index {i} is not finite")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
