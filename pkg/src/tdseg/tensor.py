"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations the segmentation stack needs are provided.
Each op computes its forward value with numpy and, when any input tracks
gradients, records a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks the graph in reverse topological order.

Multiply-accumulate work done by ``matmul`` and ``conv2d`` is reported to the
active :func:`mac_ledger`, keyed by the current :func:`mac_site` label.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_ledger: contextvars.ContextVar[Optional[Counter]] = contextvars.ContextVar("mac_ledger", default=None)
_site: contextvars.ContextVar[tuple] = contextvars.ContextVar("mac_site", default=())


class ShapeError(ValueError):
    """Raised when operand extents are incompatible; the message names the dimension."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def mac_ledger() -> Iterator[Counter]:
    """Collect multiply-accumulate counts of every matmul/conv2d run inside the block."""
    counter: Counter = Counter()
    token = _ledger.set(counter)
    try:
        yield counter
    finally:
        _ledger.reset(token)


@contextlib.contextmanager
def mac_site(label: str) -> Iterator[None]:
    """Nest a label onto the current MAC site path (joined with '/')."""
    token = _site.set(_site.get() + (label,))
    try:
        yield
    finally:
        _site.reset(token)


def _record_macs(n: int) -> None:
    counter = _ledger.get()
    if counter is not None:
        counter["/".join(_site.get()) or "<root>"] += int(n)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                                 and data.dtype in (np.float32, np.float64)
                                                 else _DEFAULT_DTYPE))
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autograd ------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf that tracks gradients."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    _check_finite(g, f"gradient of {node.name or 'leaf'}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _raise_not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    _check_finite(data, "forward value")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own momentum buffer."""

    __slots__ = ("momentum_buffer",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True, name=name)
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got ndim={x.ndim}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got ndim {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: a has K={a.shape[1]}, b has K={b.shape[0]}")
    _record_macs(a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a single ``[C_in, H, W]`` map with zero padding."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be [C_in,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [C_out,C_in,k,k], got shape {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input C_in={x.shape[0]}, weight C_in={c_in}")
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    _, h, w = x.shape
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    _record_macs(c_out * c_in * kh * kw * ho * wo)
    wd = weight.data
    k = kh

    if k == 1 and padding == 0:
        xs = x.data[:, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.reshape(c_in, ho * wo)
        w2 = wd.reshape(c_out, c_in)
        out = w2 @ cols
        if bias is not None:
            out = out + bias.data[:, None]

        def backward(g):
            g2 = g.reshape(c_out, ho * wo)
            gw = (g2 @ cols.T).reshape(wd.shape)
            gx_s = (w2.T @ g2).reshape(c_in, ho, wo)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, ::stride, ::stride] = gx_s
            else:
                gx = gx_s
            gb = g2.sum(axis=1) if bias is not None else None
            return gx, gw, gb

        parents = (x, weight) + ((bias,) if bias is not None else ())
        return _make(out.reshape(c_out, ho, wo), parents, backward)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]          # [C_in, ho, wo, k, k]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, ho * wo)
    w2 = wd.reshape(c_out, c_in * k * k)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gcols = (w2.T @ g2).reshape(c_in, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g2.sum(axis=1) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out.reshape(c_out, ho, wo), parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_windows(x: Tensor, n: int, opname: str):
    if n < 1:
        raise ShapeError(f"{opname} stride must be >= 1, got {n}")
    if x.ndim != 3:
        raise ShapeError(f"{opname} input must be [C,H,W], got shape {x.shape}")
    c, h, w = x.shape
    if n > h:
        raise ShapeError(f"{opname} stride {n} exceeds height H={h}")
    if n > w:
        raise ShapeError(f"{opname} stride {n} exceeds width W={w}")
    ho, wo = h // n, w // n
    blocks = x.data[:, :ho * n, :wo * n].reshape(c, ho, n, wo, n).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(c, ho, wo, n * n), (c, h, w, ho, wo)


def maxpool2d(x: Tensor, n: int) -> Tensor:
    """Max pooling with kernel = stride = n; leftover rows/columns are dropped.

    The gradient goes to the first maximal element of each window in row-major order.
    """
    if n == 1:
        _pool_windows(x, 1, "maxpool2d")
        return _make(x.data.copy(), (x,), lambda g: (g,))
    flat, (c, h, w, ho, wo) = _pool_windows(x, n, "maxpool2d")
    idx = flat.argmax(axis=-1)       # argmax returns first occurrence
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros((c, ho, wo, n * n), dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gblk = gflat.reshape(c, ho, wo, n, n).transpose(0, 1, 3, 2, 4).reshape(c, ho * n, wo * n)
        gx = np.zeros((c, h, w), dtype=g.dtype)
        gx[:, :ho * n, :wo * n] = gblk
        return (gx,)

    return _make(out, (x,), backward)


def avgpool2d(x: Tensor, n: int) -> Tensor:
    flat, (c, h, w, ho, wo) = _pool_windows(x, n, "avgpool2d")
    out = flat.mean(axis=-1)

    def backward(g):
        gblk = np.repeat(np.repeat(g / (n * n), n, axis=1), n, axis=2)
        gx = np.zeros((c, h, w), dtype=g.dtype)
        gx[:, :ho * n, :wo * n] = gblk
        return (gx,)

    return _make(out, (x,), backward)


def upsample_nearest(x, factor: int):
    """Nearest-neighbour upsampling of the last two axes.

    Accepts a numpy array (returns an array) or a ``Tensor`` (differentiable).
    """
    if not isinstance(x, Tensor):
        if factor == 1:
            return x
        return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)
    if factor == 1:
        return x
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects [M,N], got shape {x.shape}")
    _check_finite(x.data, "softmax_rows input")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise cross entropy over non-ignored pixels; 0 when every pixel is ignored."""
    if logits.ndim != 3:
        raise ShapeError(f"cross_entropy logits must be [K,H,W], got shape {logits.shape}")
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ShapeError(f"cross_entropy label map shape {labels.shape} != logits spatial ({h}, {w})")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range [0,{k}) and not ignore_index")
    count = int(valid.sum())
    if count == 0:
        return _make(np.zeros((), dtype=logits.dtype), (logits,),
                     lambda g: (np.zeros(logits.shape, dtype=logits.dtype),))
    _check_finite(logits.data, "cross_entropy logits")
    logp = _log_softmax(logits.data, axis=0)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[None], 1.0, axis=0)
        grad = (grad - onehot) * valid[None] * (g / count)
        return (grad,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_divergence(student_logits: Tensor, teacher_logits) -> Tensor:
    """Pixel-mean KL(p_teacher || p_student) over the channel axis at temperature 1.

    The teacher side is treated as a constant: no gradient reaches it.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.shape != t.shape:
        raise ShapeError(f"kl_divergence shape mismatch: student {student_logits.shape} vs teacher {t.shape}")
    if student_logits.ndim != 3:
        raise ShapeError(f"kl_divergence logits must be [K,H,W], got shape {student_logits.shape}")
    _check_finite(student_logits.data, "kl_divergence student logits")
    _check_finite(t, "kl_divergence teacher logits")
    npix = student_logits.shape[1] * student_logits.shape[2]
    log_s = _log_softmax(student_logits.data, axis=0)
    log_t = _log_softmax(t.astype(student_logits.dtype), axis=0)
    p_t = np.exp(log_t)
    loss = (p_t * (log_t - log_s)).sum() / npix

    def backward(g):
        return ((np.exp(log_s) - p_t) * (g / npix),)

    return _make(np.asarray(loss, dtype=student_logits.dtype), (student_logits,), backward)
