"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: the op vocabulary is exactly what the layers and losses
of this project need (elementwise arithmetic, exp/relu/power/celu, axis
reductions, reshape/transpose/concat/slice, 2-D matmul, 2-D convolution and
a fused cross-entropy). Operations record onto an explicitly scoped Tape;
without an active tape they are plain numpy math, which is how frozen models
are evaluated.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes or dtypes."""


class NonFiniteError(ArithmeticError):
    """An operation on finite inputs produced NaN or infinity."""


class TapeError(RuntimeError):
    """Backward called on a consumed tape, a non-scalar or a detached loss."""


class Tensor:
    """A dense float array, optionally participating in gradient recording.

    ``data`` is owned and must not be mutated except through optimizer
    parameter updates performed outside any tape scope.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic lives in the module-level ops
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients:
    """Gradient map returned by Tape.backward.

    Lookup of a requires_grad tensor that never received a contribution
    returns exact zeros (the unused-parameter contract).
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is not None:
            return g
        if t.requires_grad:
            return np.zeros_like(t.data)
        raise KeyError("tensor does not require grad and received none")

    def get(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(id(t))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Ordered record of differentiable ops for one training step.

    Use as a context manager; ops executed inside record themselves onto the
    innermost active tape. ``backward`` walks the record in exact reverse
    execution order, then marks the tape consumed.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = Tape._stack.pop()
        assert popped is self
        return False

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def _record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))
        self._output_ids.add(id(out))

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._output_ids:
            raise TapeError("loss is detached from this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}

        def accumulate(t: Tensor, g: np.ndarray) -> None:
            cur = grads.get(id(t))
            if cur is None:
                grads[id(t)] = g
            else:
                grads[id(t)] = cur + g

        for out, backward_fn in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue  # branch not reaching the loss
            backward_fn(g, accumulate)
        self._nodes.clear()
        return Gradients(grads)


def _as_tensor(x, like_dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype if like_dtype is not None else np.float32))


def _result(data: np.ndarray, op: str, *parents: Tensor) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = Tape.active()
    rg = tape is not None and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg)


def _maybe_record(out: Tensor, backward_fn) -> None:
    if out.requires_grad:
        Tape.active()._record(out, backward_fn)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, summed back in backward)

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "add")
    out = _result(a.data + b.data, "add", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g, b.shape))

    _maybe_record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "sub")
    out = _result(a.data - b.data, "sub", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g, b.shape))

    _maybe_record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    out = _result(a.data * b.data, "mul", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.data, b.shape))

    _maybe_record(out, bwd)
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    out = _result(data, "div", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _maybe_record(out, bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(-a.data, "neg", a)

    def bwd(g, acc):
        acc(a, -g)

    _maybe_record(out, bwd)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _result(data, "exp", a)

    def bwd(g, acc):
        acc(a, g * data)

    _maybe_record(out, bwd)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.maximum(a.data, 0), "relu", a)

    def bwd(g, acc):
        acc(a, g * (a.data > 0))

    _maybe_record(out, bwd)
    return out


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = a.data ** p
    out = _result(data, "power", a)

    def bwd(g, acc):
        acc(a, g * p * a.data ** (p - 1.0))

    _maybe_record(out, bwd)
    return out


def celu(a, alpha: float = 1.0) -> Tensor:
    """max(0,x) + min(0, alpha*(exp(x/alpha)-1)); derivative 1 for x>0, exp(x/alpha) for x<=0."""
    a = _as_tensor(a)
    if alpha <= 0:
        raise ValueError("celu alpha must be positive")
    neg_part = np.minimum(a.data, 0) / alpha
    data = np.maximum(a.data, 0) + np.minimum(alpha * np.expm1(neg_part), 0)
    out = _result(data, "celu", a)

    def bwd(g, acc):
        acc(a, g * np.where(a.data > 0, 1.0, np.exp(neg_part)).astype(a.dtype))

    _maybe_record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), "sum", a)

    def bwd(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    _maybe_record(out, bwd)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), "mean", a)

    def bwd(g, acc):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        acc(a, (np.broadcast_to(g, a.shape) / count).astype(a.dtype))

    _maybe_record(out, bwd)
    return out


def global_avg_pool(a) -> Tensor:
    """B x C x H x W -> B x C mean over the spatial extent."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {a.shape}")
    return tmean(a, axis=(2, 3))


# ---------------------------------------------------------------------------
# shape movement

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape), "reshape", a)

    def bwd(g, acc):
        acc(a, g.reshape(a.shape))

    _maybe_record(out, bwd)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.ascontiguousarray(a.data.transpose(axes)), "transpose", a)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g, acc):
        acc(a, np.ascontiguousarray(g.transpose(inv)))

    _maybe_record(out, bwd)
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g, acc):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                acc(t, piece)

    _maybe_record(out, bwd)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _result(np.ascontiguousarray(a.data[index]), "slice", a)

    def bwd(g, acc):
        full = np.zeros_like(a.data)
        full[index] = g
        acc(a, full)

    _maybe_record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# matmul / conv2d

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, "matmul", a, b)

    def bwd(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)

    _maybe_record(out, bwd)
    return out


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, ho*wo)."""
    b, c = x.shape[:2]
    xp = _pad_hw(x, padding)
    if kh == 1 and kw == 1:
        v = xp[:, :, ::stride, ::stride]
        return np.ascontiguousarray(v).reshape(b, c, ho * wo)
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]          # (B,C,ho,wo,kh,kw)
    return v.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding, ho, wo) -> np.ndarray:
    """Scatter-add the (B, C*kh*kw, ho*wo) gradient back to the input shape."""
    b, c, h, w = x_shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return dcols.reshape(b, c, h, w)
    d = dcols.reshape(b, c, kh, kw, ho, wo)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
    return dxp


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_same_dtype(x, weight, "conv2d")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin2, kh, kw = weight.shape
    if cin != cin2:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin2}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: non-positive output extent")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)   # (B, CK, P)
    wm = weight.data.reshape(cout, -1)
    data = np.matmul(wm, cols).reshape(b, cout, ho, wo)
    out = _result(data, "conv2d", x, weight)

    def bwd(g, acc):
        gr = g.reshape(b, cout, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(gr, cols.swapaxes(1, 2)).sum(axis=0)
            acc(weight, dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gr)
            acc(x, _col2im(dcols, x.shape, kh, kw, stride, padding, ho, wo))

    _maybe_record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# fused layer ops

def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-channel batch normalization of (B,C,H,W) using batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the trailing two are plain
    per-channel numpy arrays (biased variance) for running-stat upkeep.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: got x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gcol = gamma.data.reshape(1, c, 1, 1)
    out = _result(gcol * xhat + beta.data.reshape(1, c, 1, 1), "batch_norm", x, gamma, beta)

    def bwd(g, acc):
        if beta.requires_grad:
            acc(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gm = g.mean(axis=(0, 2, 3), keepdims=True)
            gx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            acc(x, (gcol * inv) * (g - gm - xhat * gx))

    _maybe_record(out, bwd)
    return out, mu.reshape(c), var.reshape(c)


# ---------------------------------------------------------------------------
# fused classification loss

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _as_tensor(logits)
    y = np.asarray(labels)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {y.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    se = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(se)
    n = z.shape[0]
    out = _result(-logp[np.arange(n), y].mean(), "cross_entropy", logits)

    def bwd(g, acc):
        p = ez / se
        p[np.arange(n), y] -= 1.0
        acc(logits, (g * p / n).astype(logits.dtype))

    _maybe_record(out, bwd)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain numpy, no tape)."""
    z = np.asarray(logits, dtype=np.float64)
    ez = np.exp(z - z.max(axis=-1, keepdims=True))
    return ez / ez.sum(axis=-1, keepdims=True)
