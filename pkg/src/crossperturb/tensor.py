"""Minimal dense-tensor engine with reverse-mode autodiff and seeded RNG.

Tensors are numpy-backed, rank <= 4, float32 by default (float64 supported
for verification). Every differentiable op records a backward closure; calling
``backward`` on a scalar loss walks the graph in reverse topological order.
Tensors are treated as immutable after construction; only optimizer code
updates leaf parameter data in place, between graph builds.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class Rng:
    """Deterministic random stream (PCG64) with reproducible child splits.

    The same seed always yields the same draw sequence, and ``split`` derives
    mutually independent child streams that are themselves reproducible.
    """

    def __init__(self, seed: int | None = None, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["Rng"]:
        if n < 1:
            raise ValueError(f"split needs n >= 1, got {n}")
        return [Rng(_seq=s) for s in self._seq.spawn(n)]

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, shape=()) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if lo > hi:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        return int(self._gen.integers(lo, hi + 1))

    def permutation(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"permutation needs n >= 1, got {n}")
        return self._gen.permutation(n)

    def bernoulli(self, p: float) -> bool:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli needs p in [0, 1], got {p}")
        return bool(self._gen.random() < p)

    def beta(self, a: float, b: float, shape=()) -> np.ndarray:
        if a <= 0 or b <= 0:
            raise ValueError(f"beta needs positive parameters, got ({a}, {b})")
        return self._gen.beta(a, b, size=shape)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axes in {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
    return axes


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        self.grad = grad if self.grad is None else self.grad + grad

    # ---- introspection ----

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- elementwise ----

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _check_shapes(self, other: "Tensor", op_name: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ValueError(f"{op_name}: incompatible shapes {self.shape} and {other.shape}") from None

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_shapes(other, "add")
        out_data = self.data + other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(out_data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_shapes(other, "sub")
        out_data = self.data - other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_shapes(other, "mul")
        out_data = self.data * other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        self._check_shapes(other, "div")
        if np.any(other.data == 0):
            raise ValueError("div: denominator contains zero")
        out_data = self.data / other.data
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._result(out_data, (a, b), backward)

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)
        a = self

        def backward(g):
            a._accumulate(g * (a.data > 0))

        return Tensor._result(out_data, (a,), backward)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        a = self

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), backward)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ValueError("log requires strictly positive input")
        out_data = np.log(self.data)
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(out_data, (a,), backward)

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise ValueError("sqrt requires non-negative input")
        out_data = np.sqrt(self.data)
        a = self

        def backward(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._result(out_data, (a,), backward)

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = tuple(range(self.ndim)) if axis is None else _normalize_axes(axis, self.ndim)
        out_data = self.data.sum(axis=axes, keepdims=keepdims)
        a = self

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))

        return Tensor._result(out_data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = tuple(range(self.ndim)) if axis is None else _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if self.ndim else 1
        if count == 0:
            raise ValueError("mean over an empty extent")
        out_data = self.data.mean(axis=axes, keepdims=keepdims)
        a = self

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g / count, a.shape).astype(a.data.dtype, copy=True))

        return Tensor._result(out_data, (a,), backward)

    # ---- shape ----

    def reshape(self, shape) -> "Tensor":
        out_data = self.data.reshape(shape)
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return Tensor._result(out_data, (a,), backward)

    def crop(self, h0: int, h1: int, w0: int, w1: int) -> "Tensor":
        """Spatial slice [h0:h1, w0:w1] of an NCHW tensor."""
        if self.ndim != 4:
            raise ValueError(f"crop expects an NCHW tensor, got rank {self.ndim}")
        out_data = np.ascontiguousarray(self.data[:, :, h0:h1, w0:w1])
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            full[:, :, h0:h1, w0:w1] = g
            a._accumulate(full)

        return Tensor._result(out_data, (a,), backward)

    def pick(self, indices: np.ndarray) -> "Tensor":
        """Row-wise gather: out[i] = self[i, indices[i]] for a 2-D tensor."""
        if self.ndim != 2:
            raise ValueError(f"pick expects a 2-D tensor, got rank {self.ndim}")
        idx = np.asarray(indices)
        rows = np.arange(self.shape[0])
        out_data = self.data[rows, idx]
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a._accumulate(full)

        return Tensor._result(out_data, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    axis = axis % tensors[0].ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    parts = tuple(tensors)

    def backward(g):
        offset = 0
        for t, size in zip(parts, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))
            offset += size

    return Tensor._result(out_data, parts, backward)


def reduce_mean_std(t: Tensor, axis, eps: float = 0.0, keepdims: bool = False) -> tuple[Tensor, Tensor]:
    """Mean and sqrt(population variance + eps) over the given axes."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    axes = _normalize_axes(axis, t.ndim)
    extent = int(np.prod([t.shape[a] for a in axes]))
    if extent == 0:
        raise ValueError("reduction over an empty extent")
    m = t.mean(axes, keepdims=True)
    d = t - m
    var = (d * d).mean(axes, keepdims=True)
    std = (var + float(eps)).sqrt() if eps > 0 else var.sqrt()
    if not keepdims:
        out_shape = tuple(s for a, s in enumerate(t.shape) if a not in axes)
        m = m.reshape(out_shape)
        std = std.reshape(out_shape)
    return m, std


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Overflow-safe softmax (max subtraction) along one axis."""
    axis = axis % t.ndim
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    a = t

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        a._accumulate(p * (g - inner))

    return Tensor._result(p, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(out_data, (a, b), backward)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIkk kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk kernel, got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {i}")
    if kh != kw:
        raise ValueError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size for input {x.shape} kernel {k} pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, k, k) -> (N*Ho*Wo, C*k*k) column matrix for one big GEMM
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wf = w.data.reshape(o, -1)
    out = cols @ wf.T + bias.data
    out_data = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        if w.requires_grad:
            w._accumulate((gf.T @ cols).reshape(w.shape))
        if bias.requires_grad:
            bias._accumulate(gf.sum(axis=0))
        if x.requires_grad:
            dcols = (gf @ wf).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += \
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp)

    return Tensor._result(out_data, (x, w, bias), backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects an NCHW tensor, got rank {x.ndim}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool2d: spatial extent {h}x{w} smaller than window {size}")
    xt = x.data[:, :, :ho * size, :wo * size]
    win = xt.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxt = dwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        if dxt.shape == x.shape:
            x._accumulate(dxt)
        else:
            full = np.zeros_like(x.data)
            full[:, :, :ho * size, :wo * size] = dxt
            x._accumulate(full)

    return Tensor._result(out_data, (x,), backward)


def xlogy(x: Tensor, y: Tensor) -> Tensor:
    """x * log(y) with the 0*log(0) = 0 convention (for divergence terms)."""
    xd, yd = np.broadcast_arrays(x.data, y.data)
    mask = xd != 0
    safe_y = np.where(mask, yd, 1.0)
    if np.any(safe_y <= 0):
        raise ValueError("xlogy requires y > 0 wherever x != 0")
    out_data = np.where(mask, xd * np.log(safe_y), 0.0).astype(xd.dtype)
    log_y = np.where(mask, np.log(safe_y), 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g * log_y, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g * np.where(mask, xd / safe_y, 0.0), y.shape))

    return Tensor._result(out_data, (x, y), backward)


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient pass from a scalar loss.

    Accumulates into ``.grad`` of every reachable tensor with
    ``requires_grad``; leaves previously-set gradients in place (callers zero
    them between steps).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tracked tensor")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
        if node._parents:
            # free intermediate gradients; leaves keep theirs
            node.grad = None
