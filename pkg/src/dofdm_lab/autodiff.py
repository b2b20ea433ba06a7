"""Tape-based reverse-mode autodiff over dense real numpy tensors.

Every operation computes its result eagerly and, when a recording tape is
passed, pushes a backward closure onto that tape. ``Tape.backward`` walks the
closures in reverse execution order and accumulates gradients into ``.grad``.
The op set is exactly what the detector networks need; there is no general
broadcasting, no complex dtype, no higher-order gradients.

Training runs in single precision; the gradient-check suite runs the same
code paths in double precision. A tape is single-threaded; independent tapes
share no mutable state.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


def _as_array(data, dtype):
    if dtype is None and not (isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)):
        dtype = np.float32
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense real array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._on_tape = False

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
        if self.data.size != 1:
            raise DimensionError("item() needs a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._nodes = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def _wants(self, *tensors) -> bool:
        return self.recording and any(
            t.requires_grad or t._on_tape for t in tensors if isinstance(t, Tensor)
        )

    def _record(self, out: Tensor, fn) -> None:
        out._on_tape = True
        self._nodes.append(fn)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate grads along the tape, in reverse."""
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; build a new tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise DimensionError("backward() expects a scalar loss tensor")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()


def _accum(t: Tensor, g) -> None:
    if not (t.requires_grad or t._on_tape):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def _check_dtypes(*tensors):
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise DimensionError(f"mixed dtypes on one op: {sorted(str(d) for d in dts)}")


# ---- structural ops ----


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands may carry one leading batch axis."""
    _check_dtypes(a, b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul supports 2-D/3-D operands, got {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise DimensionError("matmul does not broadcast an unbatched left operand over a batched right one")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if tape._wants(a, b):

        def fn():
            g = out.grad
            if g is None:
                return
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
            _accum(a, ga)
            _accum(b, gb)

        tape._record(out, fn)
    return out


def transpose(tape: Tape, x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes")
    out = Tensor(np.swapaxes(x.data, -1, -2).copy())
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, np.swapaxes(out.grad, -1, -2))

        tape._record(out, fn)
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may match a trailing suffix of a's shape (bias add)."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim :] != b.shape:
            raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    lead = a.ndim - b.ndim
    out = Tensor(a.data + b.data)
    if tape._wants(a, b):

        def fn():
            g = out.grad
            if g is None:
                return
            _accum(a, g)
            _accum(b, g.sum(axis=tuple(range(lead))) if lead else g)

        tape._record(out, fn)
    return out


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    if tape._wants(a, b):

        def fn():
            g = out.grad
            if g is None:
                return
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        tape._record(out, fn)
    return out


def scale(tape: Tape, x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    out = Tensor(x.data * c)
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, out.grad * c)

        tape._record(out, fn)
    return out


def concat_rows(tape: Tape, parts) -> Tensor:
    """Concatenate along the row (second-to-last) axis."""
    parts = list(parts)
    _check_dtypes(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-2))
    sizes = [p.shape[-2] for p in parts]
    if tape._wants(*parts):

        def fn():
            g = out.grad
            if g is None:
                return
            ofs = 0
            for p, n in zip(parts, sizes):
                _accum(p, g[..., ofs : ofs + n, :])
                ofs += n

        tape._record(out, fn)
    return out


def concat_cols(tape: Tape, parts) -> Tensor:
    """Concatenate along the last axis (head merge)."""
    parts = list(parts)
    _check_dtypes(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    sizes = [p.shape[-1] for p in parts]
    if tape._wants(*parts):

        def fn():
            g = out.grad
            if g is None:
                return
            ofs = 0
            for p, n in zip(parts, sizes):
                _accum(p, g[..., ofs : ofs + n])
                ofs += n

        tape._record(out, fn)
    return out


def stack_channels(tape: Tape, parts) -> Tensor:
    """Stack same-shape matrices along a new channel axis before the last two."""
    parts = list(parts)
    _check_dtypes(*parts)
    shapes = {p.shape for p in parts}
    if len(shapes) > 1:
        raise DimensionError(f"stack_channels needs same-shape parts, got {sorted(shapes)}")
    out = Tensor(np.stack([p.data for p in parts], axis=-3))
    if tape._wants(*parts):

        def fn():
            g = out.grad
            if g is None:
                return
            for i, p in enumerate(parts):
                _accum(p, g[..., i, :, :])

        tape._record(out, fn)
    return out


def slice_rows(tape: Tape, x: Tensor, start: int, stop: int) -> Tensor:
    """Take rows [start, stop) along the second-to-last axis."""
    n = x.shape[-2]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"row slice [{start}:{stop}) out of range for {x.shape}")
    out = Tensor(x.data[..., start:stop, :].copy())
    if tape._wants(x):

        def fn():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(x.data)
            full[..., start:stop, :] = g
            _accum(x, full)

        tape._record(out, fn)
    return out


def slice_cols(tape: Tape, x: Tensor, start: int, stop: int) -> Tensor:
    """Take columns [start, stop) along the last axis."""
    n = x.shape[-1]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"column slice [{start}:{stop}) out of range for {x.shape}")
    out = Tensor(x.data[..., start:stop].copy())
    if tape._wants(x):

        def fn():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            _accum(x, full)

        tape._record(out, fn)
    return out


def reshape(tape: Tape, x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.data.reshape(shape).copy())
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, out.grad.reshape(x.shape))

        tape._record(out, fn)
    return out


# ---- reductions ----


def sum_all(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, np.full_like(x.data, out.grad.reshape(())))

        tape._record(out, fn)
    return out


def mean(tape: Tape, x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    inv = 1.0 / x.size
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, np.full_like(x.data, out.grad.reshape(()) * inv))

        tape._record(out, fn)
    return out


# ---- elementwise nonlinearities ----


def tanh_op(tape: Tape, x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape._wants(x):

        def fn():
            if out.grad is not None:
                _accum(x, out.grad * (1.0 - y * y))

        tape._record(out, fn)
    return out


def mish(tape: Tape, x: Tensor) -> Tensor:
    """x * tanh(softplus(x)), with an overflow-safe softplus."""
    sp = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)
    t = np.tanh(sp)
    out = Tensor(x.data * t)
    if tape._wants(x):

        def fn():
            g = out.grad
            if g is None:
                return
            sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))
            _accum(x, g * (t + x.data * (1.0 - t * t) * sig))

        tape._record(out, fn)
    return out


# ---- row-structured ops ----


def softmax_rows(tape: Tape, x: Tensor) -> Tensor:
    """Row-stabilized softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if tape._wants(x):

        def fn():
            g = out.grad
            if g is None:
                return
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - dot))

        tape._record(out, fn)
    return out


def normalize_rows(tape: Tape, x: Tensor, smoothing: float = 1e-12) -> Tensor:
    """Rescale nonnegative rows to sum to one along the last axis.

    Laplace-smoothed: y = (x + smoothing) / (sum + n*smoothing), so a row that
    lost all of its mass (attention saturated on a since-cropped column)
    degrades to the uniform distribution instead of dividing by zero.
    """
    n = x.shape[-1]
    e = x.data + smoothing
    s = x.data.sum(axis=-1, keepdims=True) + n * smoothing
    y = e / s
    out = Tensor(y)
    if tape._wants(x):

        def fn():
            g = out.grad
            if g is None:
                return
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, (g - dot) / s)

        tape._record(out, fn)
    return out


def layer_norm(tape: Tape, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_dtypes(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if tape._wants(x, gain, bias):

        def fn():
            g = out.grad
            if g is None:
                return
            red = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=red))
            _accum(bias, g.sum(axis=red))
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gy - m1 - xhat * m2) * inv)

        tape._record(out, fn)
    return out


def conv2d_same(tape: Tape, x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 same-padding convolution collapsing c channels to 1, no bias.

    x: (..., c, h, w); kernel: (1, c, 3, 3); output: (..., 1, h, w).
    """
    _check_dtypes(x, kernel)
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d_same input must be (c,h,w) or (batch,c,h,w), got {x.shape}")
    c, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
    if kernel.shape != (1, c, 3, 3):
        raise DimensionError(f"conv kernel must be (1,{c},3,3), got {kernel.shape}")
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x.data, pad)
    kd = kernel.data[0]
    acc = np.zeros(x.shape[:-3] + (h, w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            patch = xp[..., :, di : di + h, dj : dj + w]
            acc += (patch * kd[:, di, dj].reshape(-1, 1, 1)).sum(axis=-3)
    out = Tensor(acc[..., None, :, :].copy())
    if tape._wants(x, kernel):

        def fn():
            g = out.grad
            if g is None:
                return
            g2 = g[..., 0, :, :]
            gxp = np.zeros_like(xp)
            gk = np.zeros_like(kernel.data)
            for di in range(3):
                for dj in range(3):
                    gxp[..., :, di : di + h, dj : dj + w] += (
                        kd[:, di, dj].reshape(-1, 1, 1) * g2[..., None, :, :]
                    )
                    patch = xp[..., :, di : di + h, dj : dj + w]
                    prod = patch * g2[..., None, :, :]
                    red = tuple(i for i in range(prod.ndim) if i != prod.ndim - 3)
                    gk[0, :, di, dj] += prod.sum(axis=red)
            _accum(x, gxp[..., :, 1 : 1 + h, 1 : 1 + w])
            _accum(kernel, gk)

        tape._record(out, fn)
    return out


def linear(tape: Tape, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ w (+ b)."""
    if x.ndim == 3 and w.ndim == 2:
        out = matmul(tape, x, w)
    elif x.ndim == 2 and w.ndim == 2:
        out = matmul(tape, x, w)
    else:
        raise DimensionError(f"linear expects 2-D/3-D x with 2-D w, got {x.shape} @ {w.shape}")
    if b is not None:
        out = add(tape, out, b)
    return out
