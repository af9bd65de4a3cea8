"""Dense real tensors with reverse-mode automatic differentiation.

Everything else in the package computes on these. Tensors wrap numpy
arrays and record the ops applied to them; calling ``backward()`` on a
scalar walks the tape in reverse topological order and accumulates
gradients into leaf tensors.

Tensors are treated as immutable values once created. The default dtype
is float32 for training; tests switch to float64 via ``use_dtype`` for
finite-difference fidelity.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default precision (tests use float64)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class ShapeError(ValueError):
    """Raised when an op receives inconsistently shaped inputs; names the op."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """A dense real array plus the tape edge that produced it.

    ``requires_grad`` marks trainable leaves. Non-leaf tensors keep
    references to their parents and a closure that routes the output
    gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is not None:
                node._backward_dispatch(g, accumulate)
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    def _backward_dispatch(self, g, accumulate):
        # _backward returns one gradient per parent (None to skip)
        parent_grads = self._backward(g)
        for p, pg in zip(self._parents, parent_grads):
            if pg is None:
                continue
            if p._backward is not None or p.requires_grad:
                accumulate(p, pg)
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p._backward is not None or p.requires_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=_default_dtype, copy=True),
                  requires_grad=True, name=name)


def constant(data) -> Tensor:
    return _lift(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError("add", str(e)) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError("mul", str(e)) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    a = _lift(a)
    data = a.data ** p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = _lift(a)
    c = a.dtype.type(np.sqrt(2.0 / np.pi))
    x = a.data
    inner = c * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * (x * x))
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * da,)

    return _make(data, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.tanh(a.data)
    return _make(data, (a,), lambda g: (g * (1.0 - data ** 2),))


def stop_gradient(a: Tensor) -> Tensor:
    """Pass the value through; contribute exactly zero upstream gradient."""
    a = _lift(a)
    out = Tensor(a.data)
    return out


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(data, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def max_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def back(g):
        full = data if keepdims or axis is None else np.expand_dims(data, axis)
        mask = (a.data == full)
        counts = mask.sum(axis=axis, keepdims=True)
        g2 = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (mask * (g2 / counts),)

    return _make(data, (a,), back)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", str(e)) from None
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(data, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    data = np.swapaxes(a.data, ax1, ax2)
    return _make(data, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tensors, back)


def take(a: Tensor, idx) -> Tensor:
    """Basic/advanced indexing with scatter-add gradient (embedding lookup)."""
    a = _lift(a)
    data = a.data[idx]

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), back)


def pad_last(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    a = _lift(a)
    widths = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    data = np.pad(a.data, widths)
    sl = [slice(None)] * (a.ndim - 1) + [slice(before, before + a.shape[-1])]
    return _make(data, (a,), lambda g: (g[tuple(sl)],))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError("matmul", str(e)) from None

    def back(g):
        if b.ndim == 1:
            ga = np.expand_dims(g, -1) * b.data
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if a.ndim == 1:
            gb = np.outer(a.data, g) if b.ndim > 1 else a.data * g
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), back)


def einsum(spec: str, *tensors: Tensor) -> Tensor:
    """Einstein summation with reverse-mode gradient.

    Each operand's indices must all appear among the output plus the other
    operands (no internal trace within one operand), which holds for every
    contraction this package uses.
    """
    tensors = [_lift(t) for t in tensors]
    in_specs, out_spec = spec.replace(" ", "").split("->")
    in_specs = in_specs.split(",")
    if len(in_specs) != len(tensors):
        raise ShapeError("einsum", f"spec {spec} expects {len(in_specs)} operands")
    data = np.einsum(spec, *[t.data for t in tensors], optimize=True)

    def back(g):
        grads = []
        for i, t in enumerate(tensors):
            others = [s for j, s in enumerate(in_specs) if j != i]
            other_data = [tensors[j].data for j in range(len(tensors)) if j != i]
            sub = ",".join([out_spec] + others) + "->" + in_specs[i]
            grads.append(np.einsum(sub, g, *other_data, optimize=True))
        return tuple(grads)

    return _make(data, tensors, back)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution, NCHW layout, square stride/padding."""
    x, w = _lift(x), _lift(w)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError("conv2d", f"input channels {C} != kernel channels {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, OH, OW, kh, kw]
    data = np.einsum('bchwij,ocij->bohw', win, w.data, optimize=True)
    if b is not None:
        b = _lift(b)
        data = data + b.data[None, :, None, None]
    OH, OW = data.shape[2], data.shape[3]
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gw = np.einsum('bohw,bchwij->ocij', g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sub = np.einsum('bohw,oc->bchw', g, w.data[:, :, i, j],
                                optimize=True)
                gxp[:, :, i:i + OH * stride:stride,
                    j:j + OW * stride:stride] += sub
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _make(data, parents, back)


# -- composite neural ops -----------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax for stability."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; epsilon 1e-5."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        gx_hat = g * gain.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return _make(data, (x, gain, bias), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return _lift(x)
    x = _lift(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# -- graph-level helpers -------------------------------------------------------

def evaluate(fn: Callable[..., Tensor], bindings: dict[str, Tensor]) -> Tensor:
    """Forward-evaluate ``fn`` on named leaf bindings."""
    return fn(bindings)


def gradient(fn: Callable[[dict], Tensor], bindings: dict[str, Tensor],
             wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar-valued ``fn`` wrt named leaves.

    Leaves reached only through stop-gradient edges come back as exact
    zero arrays.
    """
    for t in bindings.values():
        t.zero_grad()
    out = fn(bindings)
    if out.size != 1:
        raise ValueError("gradient target must be scalar")
    out.backward()
    names = list(wrt) if wrt is not None else list(bindings)
    return {n: (bindings[n].grad if bindings[n].grad is not None
                else np.zeros_like(bindings[n].data)) for n in names}


def backward(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of an already-built scalar wrt named leaves.

    Parameters the graph never touched are omitted from the result (an
    optimizer step should not disturb their moments).
    """
    for t in params.values():
        t.zero_grad()
    if loss.size != 1:
        raise ValueError("backward target must be scalar")
    loss.backward()
    return {n: t.grad for n, t in params.items() if t.grad is not None}


def finite_diff_check(fn: Callable[[dict], Tensor], bindings: dict[str, Tensor],
                      leaf: str, step: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Relative error per entry is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-3).  The 1e-3 floor keeps central-difference truncation
    noise (absolute size ~1e-10 at step 1e-5) from registering as a huge
    "relative" error on entries whose true gradient is itself near zero,
    while any genuinely wrong gradient still stands out by orders of
    magnitude.  Intended for 64-bit mode.
    """
    analytic = gradient(fn, bindings, wrt=[leaf])[leaf]
    target = bindings[leaf]
    numeric = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = fn(bindings).item()
        flat[k] = orig - step
        lo = fn(bindings).item()
        flat[k] = orig
        nflat[k] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
