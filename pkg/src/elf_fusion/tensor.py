"""Dense tensors with reverse-mode differentiation.

Every op here is a plain function taking and returning :class:`Tensor`.
When gradients are enabled and any input requires them, the op records its
inputs and a backward closure on the output; :func:`backward` walks that
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("kink_log", default=None)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense row-major array with optional gradient tracking.

    Leaves created with ``requires_grad=True`` own a same-shape ``grad``
    accumulator. Intermediate results only carry the graph edges.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise ParameterError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.dims, x, dtype=like.dtype), dtype=like.dtype)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the activation masks of every ReLU evaluated in the block.

    The gradient checker uses this to detect finite-difference probes that
    straddle a non-differentiable point.
    """
    log: list = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def replay_kinks(masks: Sequence[np.ndarray]) -> None:
    """Append previously captured ReLU masks to the active kink log, if any.

    Lets callers that reuse cached activations keep the log complete.
    """
    log = _kink_log.get()
    if log is not None:
        log.extend(masks)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Public hook for defining extra differentiable ops outside this module."""
    return _result(data, parents, backward_fn, op)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Repeated calls without ``zero_grad`` add up; the optimizer resets them.
    """
    if loss.dims != ():
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if a.dims != b.dims:
        raise ShapeError(f"add: dims {a.dims} and {b.dims} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,), "scale")
    if a.dims != b.dims:
        raise ShapeError(f"mul: dims {a.dims} and {b.dims} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(t: Tensor) -> Tensor:
    shape = t.dims
    return _result(np.asarray(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(t: Tensor) -> Tensor:
    shape, n = t.dims, t.data.size
    return _result(np.asarray(t.data.mean()), (t,), lambda g: (np.full(shape, g / n, dtype=t.dtype),), "mean")


def reshape(t: Tensor, new_dims: Sequence[int]) -> Tensor:
    new_dims = tuple(int(d) for d in new_dims)
    if int(np.prod(new_dims, dtype=np.int64)) != t.data.size:
        raise ShapeError(f"reshape: cannot view {t.dims} as {new_dims}")
    old = t.dims
    return _result(t.data.reshape(new_dims), (t,), lambda g: (g.reshape(old),), "reshape")


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(t.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat_first(a: Tensor, b: Tensor) -> Tensor:
    if a.dims[1:] != b.dims[1:]:
        raise ShapeError(f"concat_first: trailing dims {a.dims[1:]} and {b.dims[1:]} differ")
    n = a.dims[0]
    return _result(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:n], g[n:]), "concat_first")


def slice_first(t: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= t.dims[0]:
        raise ShapeError(f"slice_first: [{start}:{stop}] out of range for first dim {t.dims[0]}")
    shape = t.dims

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result(t.data[start:stop].copy(), (t,), _bw, "slice_first")


def stack(ts: Sequence[Tensor]) -> Tensor:
    if not ts:
        raise ShapeError("stack: no tensors")
    dims = ts[0].dims
    for t in ts:
        if t.dims != dims:
            raise ShapeError(f"stack: dims {t.dims} differ from {dims}")
    return _result(np.stack([t.data for t in ts]), tuple(ts), lambda g: tuple(g), "stack")


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    log = _kink_log.get()
    if log is not None:
        log.append(mask)
    return _result(np.where(mask, t.data, 0.0).astype(t.dtype), (t,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.dims} and {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.dims} x {b.dims})")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` for a vector ``x``."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.dims[1] != x.dims[0]:
        raise ShapeError(f"linear: weight {weight.dims} does not accept input {x.dims}")
    if bias.dims != (weight.dims[0],):
        raise ShapeError(f"linear: bias {bias.dims} does not match weight {weight.dims}")
    xd, wd = x.data, weight.data
    return _result(wd @ xd + bias.data, (x, weight, bias), lambda g: (wd.T @ g, np.outer(g, xd), g), "linear")


def conv1x1(t: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channel mixing at every position: out[c,p,q] = sum_k w[c,k] t[k,p,q] + b[c]."""
    if t.data.ndim < 2:
        raise ShapeError(f"conv1x1: input needs a channel axis plus positions, got {t.dims}")
    if weight.data.ndim != 2 or weight.dims[1] != t.dims[0]:
        raise ShapeError(f"conv1x1: weight {weight.dims} does not match {t.dims[0]} input channels")
    if bias.dims != (weight.dims[0],):
        raise ShapeError(f"conv1x1: bias {bias.dims} does not match weight {weight.dims}")
    cin, rest = t.dims[0], t.dims[1:]
    flat = t.data.reshape(cin, -1)
    wd = weight.data
    out = (wd @ flat + bias.data[:, None]).reshape((wd.shape[0],) + rest)

    def _bw(g):
        g2 = g.reshape(wd.shape[0], -1)
        return (wd.T @ g2).reshape(t.dims), g2 @ flat.T, g2.sum(axis=1)

    return _result(out, (t, weight, bias), _bw, "conv1x1")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 2 * p, x.shape[-1] + 2 * p), dtype=x.dtype)
    out[..., p:-p, p:-p] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Square-kernel 2-D convolution over a (B, C, H, W) batch."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.dims[1] != x.dims[1]:
        raise ShapeError(f"conv2d: weight {weight.dims} does not match input {x.dims}")
    B, C, H, W = x.dims
    O, _, k, k2 = weight.dims
    if k != k2:
        raise ShapeError("conv2d: kernel must be square")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {k}")
    xp = _pad_hw(x.data, padding)
    # gather patches as (B, Ho, Wo, C, k, k) through a strided view
    sb, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, Ho, Wo, C, k, k), (sb, sh * stride, sw * stride, sc, sh, sw), writeable=False
    )
    cols = win.reshape(B * Ho * Wo, C * k * k)
    wflat = weight.data.reshape(O, -1)
    out = (cols @ wflat.T + bias.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (g2.T @ cols).reshape(weight.dims)
        db = g2.sum(axis=0)
        dcols = (g2 @ wflat).reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return dxp[:, :, padding : padding + H, padding : padding + W], dw, db

    return _result(np.ascontiguousarray(out), (x, weight, bias), _bw, "conv2d")


def conv_temporal(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution along the leading (slice) axis of a (T, C, H, W) volume.

    ``weight`` is (C_out, C_in, k); every spatial position is treated alike.
    """
    if x.data.ndim != 4 or weight.data.ndim != 3 or weight.dims[1] != x.dims[1]:
        raise ShapeError(f"conv_temporal: weight {weight.dims} does not match input {x.dims}")
    T, C, H, W = x.dims
    O, _, k = weight.dims
    To = (T + 2 * padding - k) // stride + 1
    if To < 1:
        raise ShapeError(f"conv_temporal: {T} slices too few for kernel {k}")
    xp = np.zeros((T + 2 * padding, C, H, W), dtype=x.dtype)
    xp[padding : padding + T] = x.data
    st, sc, sh, sw = xp.strides
    # (To, H, W, C, k) windows
    win = np.lib.stride_tricks.as_strided(xp, (To, H, W, C, k), (st * stride, sh, sw, sc, st), writeable=False)
    cols = win.reshape(To * H * W, C * k)
    wflat = weight.data.reshape(O, C * k)
    out = (cols @ wflat.T + bias.data).reshape(To, H, W, O).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (g2.T @ cols).reshape(weight.dims)
        db = g2.sum(axis=0)
        dcols = (g2 @ wflat).reshape(To, H, W, C, k)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(k):
            dxp[j : j + stride * To : stride] += dcols[..., j].transpose(0, 3, 1, 2)
        return dxp[padding : padding + T], dw, db

    return _result(np.ascontiguousarray(out), (x, weight, bias), _bw, "conv_temporal")


def _pool_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average the last two axes into ``out_hw`` bins (bins may overlap when sizes do not divide)."""
    if x.data.ndim < 2:
        raise ShapeError(f"adaptive_avg_pool2d: need at least 2 dims, got {x.dims}")
    H, W = x.dims[-2:]
    oh, ow = out_hw
    if not (1 <= oh <= H and 1 <= ow <= W):
        raise ShapeError(f"adaptive_avg_pool2d: cannot pool {H}x{W} to {oh}x{ow}")
    ph = _pool_matrix(H, oh, x.dtype)
    pw = _pool_matrix(W, ow, x.dtype)
    out = ph @ x.data @ pw.T
    return _result(out, (x,), lambda g: (ph.T @ g @ pw,), "adaptive_avg_pool2d")


def global_avg_pool(t: Tensor) -> Tensor:
    """Per-channel mean over every non-leading axis."""
    if t.data.ndim < 2:
        raise ShapeError(f"global_avg_pool: need at least 2 dims, got {t.dims}")
    c = t.dims[0]
    n = t.data.size // c
    shape = t.dims
    out = t.data.reshape(c, -1).mean(axis=1)

    def _bw(g):
        return (np.repeat((g / n)[:, None], n, axis=1).reshape(shape),)

    return _result(out, (t,), _bw, "global_avg_pool")


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------


def softmax_temp(scores: Tensor, tau: float, axis: int = -1) -> Tensor:
    """softmax(scores / tau) along ``axis`` with max subtraction."""
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = scores.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y / tau,)

    return _result(y, (scores,), _bw, "softmax_temp")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; a (N, K) batch is averaged over N."""
    batched = logits.data.ndim == 2
    if logits.data.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy: logits must be (K,) or (N, K), got {logits.dims}")
    k = logits.dims[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu":
        raise ParameterError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    n = logits.dims[0] if batched else 1
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.size} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ParameterError(f"cross_entropy: label out of range 0..{k - 1}: {labels.tolist()}")
    z = logits.data.reshape(n, k)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (g / n)).reshape(logits.dims),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "cross_entropy")
