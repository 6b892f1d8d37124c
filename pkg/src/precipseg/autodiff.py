"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it provides exactly the operations the
segmentation network and its losses need, each with a hand-written
backward pass. Arrays are numpy-backed; float32 is the working precision
and float64 is supported end-to-end so gradient checks can run the same
code paths at oracle precision.

Recording model: operations executed inside a ``with Tape():`` block are
appended to that tape in execution order whenever an input is tracked
(``requires_grad`` or itself produced on the tape). ``Tape.backward``
walks the record once, in reverse, accumulating gradients across fan-out
by summation; it may be called exactly once per tape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng

_FLOAT_DTYPES = (np.float32, np.float64)


class TapeError(RuntimeError):
    """Misuse of the recording/backward protocol."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class Tensor:
    """N-dimensional float array, optionally participating in autodiff.

    4-D tensors are laid out [batch, channel, height, width], row-major.
    ``grad`` is populated on requires_grad leaves by ``Tape.backward``.
    Tensors are treated as immutable once produced by an operation; the
    optimizer mutates leaf parameters only between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "in_ids", "out_id", "backward")

    def __init__(self, op, inputs, in_ids, out_id, backward):
        self.op = op
        self.inputs = inputs
        self.in_ids = in_ids
        self.out_id = out_id
        self.backward = backward


_ACTIVE_TAPES: list = []


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: dict[int, int] = {}       # id(tensor) -> tape-local node id
        self._tensors: list[Tensor] = []     # node id -> tensor
        self._produced: set[int] = set()     # node ids with a producing op
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def _register(self, t: Tensor) -> int:
        tid = self._ids.get(id(t))
        if tid is None:
            tid = len(self._tensors)
            self._ids[id(t)] = tid
            self._tensors.append(t)
            t.node_id = tid
        return tid

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._ids

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        in_ids = tuple(self._register(t) for t in inputs)
        out_id = self._register(output)
        self._produced.add(out_id)
        self.nodes.append(_Node(op, tuple(inputs), in_ids, out_id, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of ``loss`` into requires_grad leaf tensors."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss_id = self._ids.get(id(loss))
        if loss_id is None:
            raise TapeError("loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(node.out_id, None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for t, tid, g in zip(node.inputs, node.in_ids, in_grads):
                if g is None or not self._tracks(t):
                    continue
                acc = grads.get(tid)
                # never accumulate in place: backward outputs may alias
                # buffers still referenced under other ids
                grads[tid] = g if acc is None else acc + g
        for tid, g in grads.items():
            t = self._tensors[tid]
            if t.requires_grad and tid not in self._produced:
                t.grad = g
        # Leaves that received no gradient flow still get a defined (zero) one.
        for tid, t in enumerate(self._tensors):
            if t.requires_grad and tid not in self._produced and t.grad is None:
                t.grad = np.zeros_like(t.data)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _current_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A float64 total is finite iff every element is (magnitudes can't
    # overflow float64 coming from float32/float64 inputs of sane size).
    if not math.isfinite(float(arr.sum(dtype=np.float64))):
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _current_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Public hook for modules that define their own differentiable ops."""
    return _emit(op, out_data, inputs, backward_fn)


# ---------------------------------------------------------------------------
# constructors


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=np.float32) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"zero or negative extent in shape {shape}")
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def randn(shape: Sequence[int], seed: int, stddev: float = 1.0,
          stream: int = 0, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Deterministic normal tensor from the portable generator."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"zero or negative extent in shape {shape}")
    n = int(np.prod(shape))
    vals = rng.normals(seed, stream, n) * stddev
    return Tensor(vals.reshape(shape).astype(dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a per-channel bias of shape [1,C,1,1]."""
    if a.shape != b.shape:
        bias_shape = a.data.ndim == 4 and b.shape == (1, a.shape[1], 1, 1)
        if not bias_shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return g, _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (used for attention gating)."""
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", out, (a, b), bwd)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)

    def bwd(g):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _emit("mul_scalar", out, (a,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1 of [N,C,H,W])."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _emit("concat_channels", out, (a, b), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _emit("sum_all", out, (a,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    out = np.where(mask, x.data, np.asarray(0, dtype=x.dtype))

    def bwd(g):
        return (g * mask,)

    return _emit("relu", out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (x,), bwd)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax along the channel axis, independently per (batch, row, col)."""
    if x.data.ndim != 4:
        raise ValueError("softmax_channel expects a 4-D tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_channel", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


_COL_INDEX_CACHE: dict = {}


def _col_indices(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    key = (h, w, kh, kw, stride, pad)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is None:
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        ki, kj = np.divmod(np.arange(kh * kw), kw)
        oi, oj = np.divmod(np.arange(oh * ow), ow)
        iy = ki[:, None] + stride * oi[None, :]            # [kh*kw, oh*ow]
        ix = kj[:, None] + stride * oj[None, :]
        hit = (iy, ix, oh, ow)
        _COL_INDEX_CACHE[key] = hit
    return hit


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    iy, ix, oh, ow = _col_indices(h, w, kh, kw, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = xp[:, :, iy, ix]                                # [N, C, kh*kw, oh*ow]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation with zero padding.

    x: [N,Cin,H,W]; w: [Cout,Cin,kh,kw] with odd kh,kw; b: [Cout] or None.
    padding="same" keeps the spatial extents at stride 1; an integer gives
    explicit symmetric zero padding. Output extents must divide exactly.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D x and w")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {cin_w}")
    if padding == "same":
        pad = (kh - 1) // 2
    else:
        pad = int(padding)
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ValueError(
            f"conv2d output extent is not exact: input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {pad}")

    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({cout},)")

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise convolution is a channel matmul
        w2 = w.data.reshape(cout, cin)
        xf = x.data.reshape(n, cin, h * wd)
        out = np.matmul(w2, xf)
        if b is not None:
            out += b.data[None, :, None]
        out = out.reshape(n, cout, h, wd)

        def bwd_pt(g):
            g2 = g.reshape(n, cout, h * wd)
            dw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            dx = np.matmul(w2.T, g2).reshape(x.shape)
            if b is None:
                return dx, dw
            return dx, dw, g.sum(axis=(0, 2, 3))

        inputs = (x, w) if b is None else (x, w, b)
        return _emit("conv2d", out, inputs, bwd_pt)

    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols)                              # [N,Cout,oh*ow]
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)
    x_shape = x.shape

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, cout, oh * ow))
        # recompute cols rather than keeping them alive on the tape
        cols_b, _, _ = _im2col(x.data, kh, kw, stride, pad)
        dw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, g2)
        dx = _col2im(dcols, x_shape, kh, kw, stride, pad)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first
    maximal cell in row-major order within each window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d requires even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)                             # first max wins
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        d = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (d.reshape(n, c, h, w),)

    return _emit("maxpool2d", out, (x,), bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling; backward sums each 2x2 block."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w).copy()

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample_nearest2", out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Per-channel running statistics, updated in train mode."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                state: BatchNormState, mode: str) -> Tensor:
    """Channel-wise batch normalization over (batch, height, width).

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running statistics with momentum 0.1; eval mode uses the
    running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if n < 1 or h * w < 1:
        raise ValueError("batchnorm2d on an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    xd = x.data
    gam = gamma.data[None, :, None, None]

    if mode == "train":
        m = n * h * w
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))             # biased
        state.running_mean = ((1 - BN_MOMENTUM) * state.running_mean
                              + BN_MOMENTUM * mean.astype(np.float32))
        state.running_var = ((1 - BN_MOMENTUM) * state.running_var
                             + BN_MOMENTUM * var.astype(np.float32))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv[None, :, None, None]
        out = gam * xhat + beta.data[None, :, None, None]

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gam
            # standard train-mode backward through the batch statistics
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
            return dx, dgamma, dbeta

        return _emit("batchnorm2d", out, (x, gamma, beta), bwd)

    inv = 1.0 / np.sqrt(state.running_var.astype(xd.dtype) + BN_EPS)
    xhat = (xd - state.running_mean.astype(xd.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = gam * xhat + beta.data[None, :, None, None]

    def bwd_eval(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = g * gam * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _emit("batchnorm2d", out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# dropout


def dropout(x: Tensor, p: float, seed: int, mode: str, stream: int = 0) -> Tensor:
    """Inverted dropout; the mask is a pure function of (seed, stream)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        out = x.data

        def bwd_id(g):
            return (g,)

        return _emit("dropout", out, (x,), bwd_id)

    keep = (rng.uniforms(seed, stream, x.data.size) >= p).reshape(x.shape)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _emit("dropout", out, (x,), bwd)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and an
    f64 central-difference estimate.

    ``f`` must be scalar-valued and deterministic (run dropout in eval mode
    or with a fixed seed). Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    xd = x.data.astype(np.float64)
    probe = Tensor(xd.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    tape.backward(y)
    analytic = probe.grad.reshape(-1)

    flat = xd.reshape(-1)
    numeric = np.empty_like(flat)
    work = Tensor(xd.copy())
    wflat = work.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        wflat[i] = orig + step
        hi = float(f(work).data)
        wflat[i] = orig - step
        lo = float(f(work).data)
        wflat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
