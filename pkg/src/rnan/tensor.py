"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the super-resolution network needs are provided. Every op
is a plain function taking and returning :class:`Tensor`; when any input
requires a gradient the op appends a record to the active :class:`Tape`, and
:func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "tensor",
    "zeros",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "get_tape",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv",
    "relu",
    "sigmoid",
    "layer_norm",
    "pixel_shuffle",
    "pixel_unshuffle",
    "concat_channels",
    "softmax_positions",
    "weighted_spatial_pool",
    "add",
    "mul_broadcast",
    "sum_all",
    "l1_loss",
    "backward",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
        _state.tape = Tape()
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type ("float32" or "float64")."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled() -> bool:
    return _st().grad_enabled


class Tensor:
    """A real-valued array of rank <= 4 with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        if arr.ndim > 4:
            raise ValueError(f"tensors are limited to 4 dimensions, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul_broadcast(self, other)


@dataclass
class Parameter:
    """A named trainable tensor; names are dotted paths unique within a network."""

    name: str
    tensor: Tensor


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = get_default_dtype() if dtype is None else dtype
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = get_default_dtype() if dtype is None else dtype
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Records are appended in execution order, which is already a topological
    order: every input of a record was produced before it (or is a leaf).
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def get_tape() -> Tape:
    return _st().tape


def _needs_grad(*xs: Tensor) -> bool:
    return is_grad_enabled() and any(x.requires_grad for x in xs)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule, op: str) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _needs_grad(*inputs):
        out.requires_grad = True
        get_tape().records.append(_Record(inputs, out, rule, op))
    return out


_debug_finite = False


def set_debug(enabled: bool) -> None:
    """Assert finite outputs after every op (slow)."""
    global _debug_finite
    _debug_finite = bool(enabled)


def _backprop(root: Tensor, seed: np.ndarray) -> None:
    tape = get_tape()
    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(root): seed.astype(root.dtype, copy=False)}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad and id(root) not in produced:
        leaves[id(root)] = root
    for rec in reversed(tape.records):
        for x in rec.inputs:
            if x.requires_grad and id(x) not in produced:
                leaves[id(x)] = x
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for x, gx in zip(rec.inputs, rec.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            grads[key] = grads[key] + gx if key in grads else gx
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=leaf.dtype, copy=True)
        else:
            leaf.grad += g
    tape.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves that appear on the tape but receive no gradient get a zero array.
    The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    _backprop(loss, np.ones_like(loss.data))


def backward_with(out: Tensor, grad_output: np.ndarray) -> None:
    """Vector-Jacobian product: backpropagate an explicit output cotangent."""
    grad_output = np.asarray(grad_output)
    if grad_output.shape != out.shape:
        raise ValueError(f"cotangent shape {grad_output.shape} != output shape {out.shape}")
    _backprop(out, grad_output)


# --------------------------------------------------------------------------
# convolutions


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation (no kernel flip)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(
            f"conv2d: output extent not integral for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xd, wdat = x.data, w.data

    if kh == 1 and kw == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        out = np.einsum("nchw,oc->nohw", xs, wdat[:, :, 0, 0], optimize=True)
        cols = None
    else:
        xp = _pad_hw(xd, pad)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # [N, Ho, Wo, Cout] -> [N, Cout, Ho, Wo]
        out = np.tensordot(cols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def rule(g: np.ndarray):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if cols is None:
            xs_ = xd[:, :, ::stride, ::stride]
            if w.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xs_, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gsub = np.einsum("nohw,oc->nchw", g, wdat[:, :, 0, 0], optimize=True)
                if stride == 1:
                    gx = gsub
                else:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gsub
            return gx, gw, gb
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            # [N, Ho, Wo, Cin, kh, kw]
            gcols = np.tensordot(g, wdat, axes=([1], [0]))
            gxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=xd.dtype)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                        gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, rule, "conv2d")


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution mixing channels at each position."""
    if w.data.ndim != 4 or w.shape[2:] != (1, 1):
        raise ValueError(f"pointwise_conv expects a [Cout, Cin, 1, 1] weight, got {w.shape}")
    return conv2d(x, w, b, stride=1, pad=0)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel k x k correlation with 'same' zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"depthwise_conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ValueError(f"depthwise_conv2d: weight {w.shape} does not match {c} input channels")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ValueError(f"depthwise_conv2d: kernel must be square and odd, got {w.shape[2:]}")
    if b is not None and b.shape != (c,):
        raise ValueError(f"depthwise_conv2d: bias shape {b.shape} != ({c},)")
    pad = k // 2
    xd, wdat = x.data, w.data
    xp = _pad_hw(xd, pad)
    out = np.zeros_like(xd)
    for u in range(k):
        for v in range(k):
            out += xp[:, :, u : u + h, v : v + wd] * wdat[None, :, 0, u, v, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def rule(g: np.ndarray):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            gw = np.empty_like(wdat)
            for u in range(k):
                for v in range(k):
                    gw[:, 0, u, v] = np.einsum("nchw,nchw->c", g, xp[:, :, u : u + h, v : v + wd])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u : u + h, v : v + wd] += g * wdat[None, :, 0, u, v, None, None]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, rule, "depthwise_conv2d")


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _spatial_singleton(x: Tensor, y: Tensor, op: str) -> bool:
    if y.shape == x.shape:
        return False
    if x.data.ndim != 4 or y.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError(f"{op}: cannot broadcast {y.shape} onto {x.shape}")
    return True


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; ``y`` may be full-shape or [N, C, 1, 1]."""
    spatial = _spatial_singleton(x, y, "add")

    def rule(g: np.ndarray):
        return g, (g.sum(axis=(2, 3), keepdims=True) if spatial else g)

    return _result(x.data + y.data, (x, y), rule, "add")


def mul_broadcast(x: Tensor, g: Tensor) -> Tensor:
    """Elementwise product; ``g`` may be full-shape or [N, C, 1, 1]."""
    spatial = _spatial_singleton(x, g, "mul_broadcast")
    xd, gd = x.data, g.data

    def rule(up: np.ndarray):
        gx = up * gd if x.requires_grad else None
        gg = None
        if g.requires_grad:
            gg = up * xd
            if spatial:
                gg = gg.sum(axis=(2, 3), keepdims=True)
        return gx, gg

    return _result(xd * gd, (x, g), rule, "mul_broadcast")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the gradient uses sign(0) = 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray(np.abs(diff).sum() / count, dtype=pred.dtype)

    def rule(g: np.ndarray):
        s = np.sign(diff) * (g / count)
        return s, (-s if target.requires_grad else None)

    return _result(out, (pred, target), rule, "l1_loss")


# --------------------------------------------------------------------------
# normalization and attention pieces


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of an [N, C, 1, 1] tensor."""
    if x.data.ndim != 4 or x.shape[2:] != (1, 1):
        raise ValueError(f"layer_norm expects [N, C, 1, 1], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({c},)")
    xd = x.data
    mean = xd.mean(axis=1, keepdims=True)
    cen = xd - mean
    var = (cen * cen).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv
    gm = gamma.data[None, :, None, None]
    out = xhat * gm + beta.data[None, :, None, None]

    def rule(g: np.ndarray):
        gx = None
        if x.requires_grad:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), rule, "layer_norm")


def softmax_positions(a: Tensor) -> Tensor:
    """Softmax over all H*W positions of an [N, 1, H, W] map, per sample."""
    if a.data.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"softmax_positions expects [N, 1, H, W], got {a.shape}")
    d = a.data
    z = d - d.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=(2, 3), keepdims=True)

    def rule(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=(2, 3), keepdims=True)),)

    return _result(out, (a,), rule, "softmax_positions")


def weighted_spatial_pool(x: Tensor, w: Tensor) -> Tensor:
    """out[n, c] = sum over positions of w[n, 0] * x[n, c]."""
    if x.data.ndim != 4 or w.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ValueError(f"weighted_spatial_pool: weights {w.shape} do not match input {x.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("nchw,nhw->nc", xd, wd[:, 0])[:, :, None, None]

    def rule(g: np.ndarray):
        gx = g * wd if x.requires_grad else None
        gw = np.einsum("nc,nchw->nhw", g[:, :, 0, 0], xd)[:, None] if w.requires_grad else None
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), rule, "weighted_spatial_pool")


# --------------------------------------------------------------------------
# rearrangements


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """[N, C*s*s, H, W] -> [N, C, s*H, s*W]; out[n,c,s*i+a,s*j+b] = x[n,c*s*s+a*s+b,i,j]."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_shuffle expects a 4-D tensor, got {x.shape}")
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ValueError(f"pixel_shuffle: {cs} channels not divisible by {s}^2")
    c = cs // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)
    return _result(np.ascontiguousarray(out), (x,), lambda g: (_unshuffle(g, s),), "pixel_shuffle")


def _unshuffle(d: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = d.shape
    h, w = hs // s, ws // s
    return np.ascontiguousarray(d.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_unshuffle expects a 4-D tensor, got {x.shape}")
    n, c, hs, ws = x.shape
    if s < 1 or hs % s or ws % s:
        raise ValueError(f"pixel_unshuffle: spatial extents {hs}x{ws} not divisible by {s}")

    def rule(g: np.ndarray):
        h, w = hs // s, ws // s
        back = g.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hs, ws)
        return (np.ascontiguousarray(back),)

    return _result(_unshuffle(x.data, s), (x,), rule, "pixel_unshuffle")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def rule(g: np.ndarray):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _result(out, xs, rule, "concat_channels")
