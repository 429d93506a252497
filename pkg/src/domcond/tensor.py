"""Dense float64 tensors with taped reverse-mode differentiation.

Values are immutable once produced by an operation; gradients flow back to
Parameter leaves by replaying the tape in exact reverse execution order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """An operation precondition was violated (labels, ranges, scalarity...)."""


_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable taping inside the block; forward values are unaffected."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeEntry:
    """One executed operation: operand refs plus a vector-Jacobian product."""

    __slots__ = ("inputs", "vjp", "seq")

    def __init__(self, inputs, vjp):
        self.inputs = inputs
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    """Dense row-major float64 array, optionally attached to the tape."""

    __slots__ = ("data", "node")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr  # 0-d stays 0-d (ascontiguousarray would promote to 1-d)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)})"


class Parameter(Tensor):
    """Named trainable tensor with a gradient accumulator and Adam moment slots."""

    __slots__ = ("name", "grad", "m", "v")

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)})"


def _needs_tape(inputs) -> bool:
    return any(isinstance(t, Parameter) or t.node is not None for t in inputs)


def _emit(out_data, inputs, vjp) -> Tensor:
    """Wrap a forward result, recording a tape entry when gradients can flow."""
    out = Tensor(out_data)
    if _grad_enabled and _needs_tape(inputs):
        out.node = TapeEntry(tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(t.data * c, (t,), lambda g: (g * c,))


def total(t: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    return _emit(t.data.sum(), (t,), lambda g: (np.full_like(t.data, float(g)),))


def sum_squares(t: Tensor) -> Tensor:
    """Scalar sum of squared elements, the L2 penalty building block."""
    flat = t.data.reshape(-1)
    return _emit(np.dot(flat, flat), (t,), lambda g: (2.0 * float(g) * t.data,))


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference (scalar)."""
    if a.shape != b.shape:
        raise DimensionError(f"mean_squared_error: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    flat = d.reshape(-1)
    k = 2.0 / d.size

    def vjp(g):
        gd = (k * float(g)) * d
        return gd, -gd

    return _emit(np.dot(flat, flat) / d.size, (a, b), vjp)


def reshape(t: Tensor, shape) -> Tensor:
    return _emit(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {t.shape}")
    return _emit(t.data.T, (t,), lambda g: (g.T,))


def detach(t: Tensor) -> Tensor:
    """Same values, cut off from the tape (constant from here on)."""
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# linear algebra and network operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _emit(out, (x,), lambda g: (g * (out > 0),))  # out > 0 iff x > 0


_scratch = threading.local()


def _scratch_buf(site: str, shape: tuple) -> np.ndarray:
    """Reusable per-thread buffer for transients consumed within one call.

    Fresh 100+ MB allocations page-fault on every touch; recycling them is a
    2-3x win on the convolution path. Buffers are keyed by call site and
    shape, and must never be referenced after the owning call returns.
    """
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    buf = pool.get((site, shape))
    if buf is None:
        buf = pool[(site, shape)] = np.empty(shape)
    return buf


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Unfold padded images (N, C, Hp, Wp) into (C*kh*kw, N*H'*W') columns."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    n, c, hp, wp = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * hp * wp)


def conv2d(x: Tensor, w: Tensor, b: Tensor, pad: int = 0) -> Tensor:
    """Cross-correlation with stride 1 and zero padding.

    x: (N, C_in, H, W); w: (C_out, C_in, kh, kw); b: (C_out,). Kernel extents
    must be odd and the padded output must be non-empty.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c_in, h, wid = x.shape
    c_out, c_k, kh, kw = w.shape
    if c_k != c_in:
        raise DimensionError(f"conv2d: input channels {c_in} != kernel channels {c_k}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValidationError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ValidationError("conv2d: pad must be >= 0")
    hp, wp = h + 2 * pad - kh + 1, wid + 2 * pad - kw + 1
    if hp < 1 or wp < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wid} with pad {pad}")

    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xpad, kh, kw)  # one GEMM-ready copy, kept for the backward pass
    w_mat = w.data.reshape(c_out, -1)
    points = n * hp * wp
    pre = _scratch_buf("conv_out", (c_out, points))
    np.matmul(w_mat, cols, out=pre)
    pre += b.data[:, None]
    out = pre.reshape(c_out, n, hp, wp).transpose(1, 0, 2, 3)  # copied by Tensor()

    def vjp(g):
        g2d = _scratch_buf("conv_g2d", (c_out, points))
        np.copyto(g2d.reshape(c_out, n, hp, wp), g.transpose(1, 0, 2, 3))
        gw = (g2d @ cols.T).reshape(w.shape)
        gb = g2d.sum(axis=1)
        gcols = _scratch_buf("conv_gcols", (c_in * kh * kw, points))
        np.matmul(w_mat.T, g2d, out=gcols)
        gcols = gcols.reshape(c_in, kh, kw, n, hp, wp)
        gxp = _scratch_buf("conv_gxp", (c_in, n, h + 2 * pad, wid + 2 * pad))
        gxp.fill(0.0)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + hp, j:j + wp] += gcols[:, i, j]
        gxp = gxp.transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + wid] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _emit(out, (x, w, b), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the first maximal element per block."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2x2: need 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")
    quads = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
             x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def vjp(g):
        # ties break to the first maximal quadrant in row-major block order
        gx = np.zeros(x.shape)
        taken = np.zeros(g.shape, dtype=bool)
        slots = ((0, 0), (0, 1), (1, 0), (1, 1))
        for quad, (di, dj) in zip(quads, slots):
            hit = (quad == out) & ~taken
            gx[:, :, di::2, dj::2] = np.where(hit, g, 0.0)
            taken |= hit
        return (gx,)

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: need 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape

    def vjp(g):
        gx = np.empty(x.shape)
        gx[...] = g[:, :, None, None] / (h * w)
        return (gx,)

    return _emit(x.data.mean(axis=(2, 3)), (x,), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross entropy against smoothed one-hot targets (scalar).

    The target puts 1 - smoothing on the true class plus smoothing/C uniform
    mass everywhere; computed through log-sum-exp for stability.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: need (N, C) logits, got shape {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValidationError(f"smoothing must be in [0, 1), got {smoothing}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range "
                              f"[{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    target = np.full((n, c), smoothing / c)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / n

    def vjp(g):
        return ((np.exp(logp) - target) * (float(g) / n),)

    return _emit(loss, (logits,), vjp)


def entropy(logits: Tensor) -> Tensor:
    """Batch-mean Shannon entropy of softmax(logits), in nats (scalar)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"entropy: need (N, C) logits, got shape {logits.shape}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    rows = -(p * logp).sum(axis=1)

    def vjp(g):
        return (-p * (logp + rows[:, None]) * (float(g) / n),)

    return _emit(rows.mean(), (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into every Parameter reachable from loss.

    Repeated calls without zero_grad sum their contributions.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValidationError("backward: loss was not produced by taped operations")

    nodes = []
    owner = {}  # TapeEntry -> output Tensor
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        owner[id(node)] = t
        nodes.append(node)
        stack.extend(node.inputs)

    nodes.sort(key=lambda nd: nd.seq, reverse=True)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(owner[id(node)]), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            elif inp.node is not None:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi


def grad_check(f, params, h: float = 1e-5, coords_per_param: int | None = None,
               skip_nonsmooth: bool = False, nonsmooth_coords: list | None = None) -> float:
    """Max relative error between taped gradients and central differences.

    f must be a deterministic zero-argument callable returning a taped scalar.
    The error per coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|). coords_per_param limits the sweep to an evenly spaced subset
    of each parameter's coordinates; default checks every coordinate.

    skip_nonsmooth drops coordinates where the central difference itself is
    invalid because a relu/maxpool kink lies inside the +-h interval: for a
    smooth stretch the h and h/2 estimates agree to O(h^2), so a large
    disagreement flags the kink. Skipped (param index, coord) pairs are
    appended to nonsmooth_coords when given.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy().reshape(-1) for p in params]
    worst = 0.0
    with no_grad():
        def numeric_at(flat, i, orig, step):
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            return (fp - fm) / (2.0 * step)

        for pi, (p, ana) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            size = flat.size
            if coords_per_param is None or coords_per_param >= size:
                idxs = range(size)
            else:
                idxs = np.unique(np.linspace(0, size - 1, coords_per_param).astype(int))
            for i in idxs:
                orig = flat[i]
                numeric = numeric_at(flat, i, orig, h)
                err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
                if skip_nonsmooth and err > 1e-6:
                    half = numeric_at(flat, i, orig, h / 2.0)
                    agreement = abs(numeric - half) / max(1.0, abs(numeric), abs(half))
                    if agreement > 1e-7:  # orders above the O(h^2) smooth regime
                        if nonsmooth_coords is not None:
                            nonsmooth_coords.append((pi, int(i)))
                        continue
                worst = max(worst, err)
    return worst
