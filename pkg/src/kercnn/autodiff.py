"""Dense NHWC tensors with reverse-mode differentiation.

Every operation records a node in an implicit tape (the ``_parents`` links of
its output) together with a closure that maps the output gradient to parent
gradients. ``backward`` replays the tape in reverse topological order.

Layout conventions used throughout the package:

* images and activations are ``(H, W, C)`` or batched ``(N, H, W, C)``;
* convolution filters are ``(d, d, K, C_in)``;
* flattening is row-major over ``(H, W, C)``.

Convolutions are cross-correlations: ``out[i, j, k] = sum w[a, b, k, c] *
x[i + a, j + b, c]``. Flipping a stored filter along both spatial axes gives
the true-convolution form with ``x[i - a, j - b, c]``; a trained network is
equivalent under either convention.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "set_dtype",
    "get_dtype",
    "no_grad",
    "grad_enabled",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "power",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "tsum",
    "reshape",
    "flatten",
    "matmul",
    "dense",
    "conv2d",
    "maxpool",
    "maxpool2",
    "finite_diff_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


_DTYPE = np.float64
_GRAD_ENABLED = True
CHECK_FINITE = True


def set_dtype(dtype) -> None:
    """Set the floating point type used for newly created tensors."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check(data: np.ndarray, what: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        """Create the output of a differentiable op.

        ``backward_fn(g)`` must return one gradient (or None) per parent.
        """
        _check(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed: float = 1.0) -> None:
        backward(self, seed)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------- tape walk


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every watched leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, seed, dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check(pg, f"backward of {node.op}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(leaf) for each leaf without touching other leaves' state."""
    leaves = list(leaves)
    saved = [leaf.grad for leaf in leaves]
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    out = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    for leaf, g in zip(leaves, saved):
        leaf.grad = g
    return out


# ------------------------------------------------------------ elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def _bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor.from_op(out, (a, b), _bw, "div")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** exponent
    return Tensor.from_op(
        out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow",
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), _bw, "sum")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    """Flatten all but the leading batch axis (row-major over H, W, C)."""
    return reshape(x, (x.shape[0], -1))


# ----------------------------------------------------------- probabilities


def softmax(v) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    v = _as_tensor(v)
    z = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (v,), _bw, "softmax")


def log_softmax(v) -> Tensor:
    v = _as_tensor(v)
    z = v.data - v.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (v,), _bw, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch.

    ``logits`` is ``(n,)`` with an integer label, or ``(N, n)`` with ``N`` labels.
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels))
    n_cls = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ValueError("one label per row of logits is required")
    if labels.min() < 0 or labels.max() >= n_cls:
        raise IndexError(f"label out of range for {n_cls} classes")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - zs[rows, labels])

    def _bw(g):
        p = np.exp(zs - lse[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "cross_entropy")


# ------------------------------------------------------------- linear maps


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` a 2-d matrix and ``a`` of any rank >= 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2:
        raise ValueError("right operand of matmul must be a matrix")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def _bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), _bw, "matmul")


def dense(x, weights, bias) -> Tensor:
    """Affine map ``x @ weights + bias`` with ``weights`` of shape ``(S, n)``."""
    x = _as_tensor(x)
    if x.shape[-1] != weights.shape[0] or weights.shape[1] != bias.shape[-1]:
        raise ValueError(f"dense shape mismatch: {x.shape}, {weights.shape}, {bias.shape}")
    return add(matmul(x, weights), bias)


# ------------------------------------------------------------- convolution


def _norm_padding(padding, d: int) -> tuple[int, int, int, int]:
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding == "same":
        lo = (d - 1) // 2
        return (lo, d - 1 - lo, lo, d - 1 - lo)
    if isinstance(padding, int):
        return (padding,) * 4
    pad = tuple(int(p) for p in padding)
    if len(pad) == 2:
        pad = (pad[0], pad[0], pad[1], pad[1])
    if len(pad) != 4:
        raise ValueError(f"bad padding {padding!r}")
    return pad


def conv2d(x, filters, bias=None, padding=0) -> Tensor:
    """Stride-1 2-d cross-correlation.

    ``x`` is ``(H, W, C)`` or ``(N, H, W, C)``; ``filters`` is ``(d, d, K, C)``.
    ``padding`` is an int, ``(top, bottom, left, right)``, ``"valid"`` or
    ``"same"`` (extra pixel at the bottom/right for even ``d``).
    """
    x, filters = _as_tensor(x), _as_tensor(filters)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or filters.ndim != 4:
        raise ValueError("conv2d expects (N,H,W,C) input and (d,d,K,C) filters")
    dh, dw, k, c = filters.shape
    if c != x.shape[3]:
        raise ValueError(f"filters have {c} channels, input has {x.shape[3]}")
    top, bottom, left, right = _norm_padding(padding, dh)
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding must be non-negative")
    n, h, w, _ = x.shape
    ho, wo = h + top + bottom - dh + 1, w + left + right - dw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"filter {dh}x{dw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    # (N, Ho, Wo, C, dh, dw) -> (N*Ho*Wo, dh*dw*C)
    cols = sliding_window_view(xp, (dh, dw), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, dh * dw * c)
    wmat = filters.data.transpose(0, 1, 3, 2).reshape(dh * dw * c, k)
    out = cols @ wmat
    parents: tuple[Tensor, ...] = (x, filters)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (k,):
            raise ValueError(f"bias must have shape ({k},)")
        out += bias.data
        parents = parents + (bias,)
    out = out.reshape(n, ho, wo, k)

    def _bw(g):
        g2 = g.reshape(-1, k)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, dh, dw, c)
            gxp = np.zeros_like(xp)
            for a in range(dh):
                for b in range(dw):
                    gxp[:, a:a + ho, b:b + wo, :] += dcols[:, :, :, a, b, :]
            gx = gxp[:, top:top + h, left:left + w, :]
        if filters.requires_grad:
            gw = (cols.T @ g2).reshape(dh, dw, c, k).transpose(0, 1, 3, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    res = Tensor.from_op(out, parents, _bw, "conv2d")
    return reshape(res, res.shape[1:]) if single else res


def maxpool(x, window: int = 2, ceil_mode: bool = True) -> Tensor:
    """Non-overlapping max pooling over ``window x window`` squares.

    With ``ceil_mode`` a ragged border forms a truncated window; otherwise the
    ragged rows/columns are dropped. Gradient goes to the first maximum in
    row-major scan order of each window.
    """
    x = _as_tensor(x)
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    n, h, w, c = data.shape
    if ceil_mode:
        ho, wo = -(-h // window), -(-w // window)
        padded = np.full((n, ho * window, wo * window, c), -np.inf, dtype=data.dtype)
        padded[:, :h, :w, :] = data
    else:
        ho, wo = h // window, w // window
        if ho < 1 or wo < 1:
            raise ValueError(f"pool window {window} larger than input {h}x{w}")
        padded = data[:, :ho * window, :wo * window, :]
    blocks = padded.reshape(n, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        if single:
            g = g[None]
        onehot = np.zeros((n, ho, wo, c, window * window), dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gp = onehot.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
        gp = gp.reshape(n, ho * window, wo * window, c)
        gx = np.zeros_like(data)
        hh, ww = min(h, ho * window), min(w, wo * window)
        gx[:, :hh, :ww, :] = gp[:, :hh, :ww, :]
        return (gx[0] if single else gx,)

    return Tensor.from_op(out[0] if single else out, (x,), _bw, "maxpool")


def maxpool2(x) -> Tensor:
    return maxpool(x, 2, ceil_mode=True)


# ---------------------------------------------------------- gradient check


def finite_diff_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Worst relative gap between ``backward`` and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error of each entry
    is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with default_dtype(np.float64):
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
        analytic = grad(out, [leaf])[0]
        numeric = np.zeros_like(x0)
        flat = numeric.reshape(-1)
        with no_grad():
            for i in range(x0.size):
                xp = x0.copy().reshape(-1)
                xm = xp.copy()
                xp[i] += step
                xm[i] -= step
                fp = f(Tensor(xp.reshape(x0.shape))).data
                fm = f(Tensor(xm.reshape(x0.shape))).data
                flat[i] = (float(fp) - float(fm)) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
