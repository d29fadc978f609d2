"""Small dense-tensor library with reverse-mode differentiation.

Every value is a float64 numpy array. Operations are free functions that
build a graph node recording their inputs and a local gradient rule;
``Tensor.backward`` replays the nodes in reverse creation order.

Shapes must agree exactly. The only implicit batching is the optional
leading batch axis accepted by the spatial ops (``[C,H,W]`` or
``[N,C,H,W]``) and the leading axes of ``dense``.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ShapeError", "tensor", "parameter", "no_grad",
    "add", "sub", "mul", "mul_scalar", "add_scalar", "relu", "sigmoid",
    "log", "absolute", "square", "clip", "total", "sum_axis", "reshape",
    "concat", "concat_channels", "take", "conv2d", "maxpool2",
    "upsample2_bilinear", "global_avg_pool", "global_max_pool",
    "channel_mean", "channel_max", "scale_channels", "scale_spatial",
    "dense", "correlate", "sample_bilinear", "numerical_grad",
]

_counter = itertools.count()
_grad_enabled = [True]


class ShapeError(ValueError):
    """Raised when operand shapes disagree."""


class no_grad:
    """Context manager that stops graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self._rule is None else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._rule is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                upstream[key] = pg if key not in upstream else upstream[key] + pg

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], rule) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._rule = rule
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _node(a.data + s, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split branches keep exp() from overflowing
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape

def total(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.data.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    axis = axis % nd
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        ref = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if t.data.ndim != nd or other != ref:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis of ``[C,H,W]`` or ``[N,C,H,W]`` maps."""
    return concat(tensors, axis=-3)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]`` along axis 0; index may be any integer array."""
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), rule)


# ---------------------------------------------------------------- spatial ops

def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.data.ndim == 4:
        return x, False
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` [K,C,kh,kw] plus per-channel bias."""
    given = x.shape
    x, squeeze = _batched(x, "conv2d")
    n, c, h, w = x.shape
    if kernel.data.ndim != 4 or kernel.shape[1] != c:
        raise ShapeError(f"conv2d: input {given} incompatible with kernel {kernel.shape}")
    k, _, kh, kw = kernel.shape
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kernel.shape}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d: need pad >= 0 and stride >= 1")
    hp, wp = h + 2 * pad, w + 2 * pad
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise ShapeError(f"conv2d: input {given} with kernel {kernel.shape}, "
                         f"stride {stride}, pad {pad} gives a non-integral output")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,kcij->nkhw", cols, kernel.data, optimize=True)
    out += bias.data[None, :, None, None]

    def rule(g):
        gk = np.einsum("nkhw,nchwij->kcij", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.einsum("nkhw,kcij->ncijhw", g, kernel.data, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    return _unbatch(_node(out, (x, kernel, bias), rule), squeeze)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; the gradient goes to the (first) argmax only."""
    x, squeeze = _batched(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _unbatch(_node(out, (x,), rule), squeeze)


def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel aligned bilinear x2 with edge replication
    u = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        u[o, min(max(lo, 0), n - 1)] += 1.0 - frac
        u[o, min(max(lo + 1, 0), n - 1)] += frac
    return u


def upsample2_bilinear(x: Tensor) -> Tensor:
    x, squeeze = _batched(x, "upsample2_bilinear")
    _, _, h, w = x.shape
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    out = np.einsum("ph,nchw,qw->ncpq", uh, x.data, uw, optimize=True)
    rule = lambda g: (np.einsum("ph,ncpq,qw->nchw", uh, g, uw, optimize=True),)
    return _unbatch(_node(out, (x,), rule), squeeze)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    _check4("global_avg_pool", x)
    n, c, h, w = x.shape
    rule = lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)
    return _node(x.data.mean(axis=(2, 3)), (x,), rule)


def global_max_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial max."""
    _check4("global_max_pool", x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)

    def rule(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(x.shape),)

    return _node(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], (x,), rule)


def channel_mean(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W] mean over channels."""
    _check4("channel_mean", x)
    c = x.shape[1]
    rule = lambda g: (np.broadcast_to(g / c, x.shape).copy(),)
    return _node(x.data.mean(axis=1, keepdims=True), (x,), rule)


def channel_max(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W] max over channels."""
    _check4("channel_max", x)
    arg = x.data.argmax(axis=1)[:, None]

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g, axis=1)
        return (gx,)

    return _node(np.take_along_axis(x.data, arg, axis=1), (x,), rule)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply map [N,C,H,W] by a per-channel gate [N,C]."""
    _check4("scale_channels", x)
    if gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: gate {gate.shape} does not match map {x.shape}")
    gd = gate.data[:, :, None, None]
    rule = lambda g: (g * gd, (g * x.data).sum(axis=(2, 3)))
    return _node(x.data * gd, (x, gate), rule)


def scale_spatial(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply map [N,C,H,W] by a per-pixel gate [N,1,H,W]."""
    _check4("scale_spatial", x)
    n, c, h, w = x.shape
    if gate.shape != (n, 1, h, w):
        raise ShapeError(f"scale_spatial: gate {gate.shape} does not match map {x.shape}")
    rule = lambda g: (g * gate.data, (g * x.data).sum(axis=1, keepdims=True))
    return _node(x.data * gate.data, (x, gate), rule)


def _check4(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected [N,C,H,W], got {x.shape}")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ W.T + b`` for x of shape [..., n]."""
    if weights.data.ndim != 2 or x.shape[-1:] != weights.shape[1:] or bias.shape != weights.shape[:1]:
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    out = x.data @ weights.data.T + bias.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        return g @ weights.data, g2.T @ x2, g2.sum(axis=0)

    return _node(out, (x, weights, bias), rule)


def correlate(f1: Tensor, f2: Tensor, max_disp: int) -> Tensor:
    """Channel-normalised correlation over displacements in [-max_disp, max_disp]^2.

    Output channel ``(dy + d) * (2d + 1) + (dx + d)`` holds
    ``mean_c f1[c, y, x] * f2[c, y + dy, x + dx]``; displaced samples falling
    outside the map read as zero.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"correlate: shape mismatch {f1.shape} vs {f2.shape}")
    if max_disp < 0:
        raise ValueError("correlate: max_disp must be >= 0")
    f1, squeeze = _batched(f1, "correlate")
    f2, _ = _batched(f2, "correlate")
    n, c, h, w = f1.shape
    d = max_disp
    side = 2 * d + 1
    a = f1.data
    bp = np.pad(f2.data, ((0, 0), (0, 0), (d, d), (d, d)))
    out = np.empty((n, side * side, h, w))
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            win = bp[:, :, d + dy:d + dy + h, d + dx:d + dx + w]
            out[:, (dy + d) * side + dx + d] = (a * win).sum(axis=1) / c

    def rule(g):
        ga = np.zeros_like(a)
        gbp = np.zeros_like(bp)
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                gk = g[:, (dy + d) * side + dx + d][:, None] / c
                win = bp[:, :, d + dy:d + dy + h, d + dx:d + dx + w]
                ga += gk * win
                gbp[:, :, d + dy:d + dy + h, d + dx:d + dx + w] += gk * a
        return ga, gbp[:, :, d:d + h, d:d + w]

    return _unbatch(_node(out, (f1, f2), rule), squeeze)


def sample_bilinear(feat: Tensor, points: np.ndarray) -> Tensor:
    """Bilinearly sample a [C,H,W] map at (x, y) pixel coordinates -> [M,C].

    Coordinates are clamped to the map extent; points are constants.
    """
    if feat.data.ndim != 3:
        raise ShapeError(f"sample_bilinear: expected [C,H,W], got {feat.shape}")
    c, h, w = feat.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    corners = [(y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
               (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)]
    out = np.zeros((len(pts), c))
    for yy, xx, wt in corners:
        out += feat.data[:, yy, xx].T * wt[:, None]

    def rule(g):
        gf = np.zeros_like(feat.data)
        for yy, xx, wt in corners:
            for ch in range(c):
                np.add.at(gf[ch], (yy, xx), g[:, ch] * wt)
        return (gf,)

    return _node(out, (feat,), rule)


# ---------------------------------------------------------------- checking

def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``leaf.data``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad
