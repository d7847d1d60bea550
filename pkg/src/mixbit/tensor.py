"""Minimal dense-tensor reverse-mode autodiff engine.

Just enough machinery to train a tiny CNN detector and the gating module:
dense row-major float32 arrays, a handful of primitives (conv2d, pooling,
pointwise math, losses) and a closure-based backward graph. The graph is
carried on the tensors themselves: every op records its parents and a
backward closure; ``Tensor.backward`` topologically sorts and replays them.

No views, no strides, no GPU. Ops are pure functions of their inputs and are
safe to call concurrently on disjoint data.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# When enabled, every forward op asserts its output is finite. Cheap insurance
# for debug runs and the test suite; off by default in training loops.
CHECK_FINITE = False

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data  # keep caller-chosen float precision (e.g. float64 oracles)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``data`` is a row-major float array; ``grad`` (same shape) is populated by
    ``backward`` and accumulates across calls until reset with ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] = lambda: None
        self._parents: tuple[Tensor, ...] = ()
        self._op = ""

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` of every reachable requires_grad tensor.

        Only defined for scalar outputs. Gradients accumulate; callers owning
        parameters are expected to zero them between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    """Allocate the output tensor of an op and wire up graph bookkeeping."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = lambda: None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic primitives ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        out._backward = _bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape) / count)
        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, (a,), "tanh")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * (1.0 - y * y))
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    out = _make(y, (a,), "sigmoid")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * y * (1.0 - y))
        out._backward = _bw
    return out


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # Stable for both signs; avoids overflow in exp.
    pos = z >= 0
    y = np.empty_like(z)
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    return y


def clamp01(a: Tensor) -> Tensor:
    """Bounded activation: hard clip to [0, 1].

    The gradient is 1 inside the interval (boundary included) and 0 outside,
    which keeps quantized activations exactly within their grid's domain.
    """
    y = np.clip(a.data, 0.0, 1.0)
    out = _make(y, (a,), "clamp01")
    if out.requires_grad:
        mask = ((a.data >= 0.0) & (a.data <= 1.0)).astype(a.data.dtype)
        def _bw():
            a._accumulate(out.grad * mask)
        out._backward = _bw
    return out


# -- convolution and pooling ---------------------------------------------------


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int,
               hp: int, wp: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, hp, wp), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * hp:stride,
                                  j:j + stride * wp:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c_in, h, wd = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_in != c_w:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weight expects {c_w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _conv_cols(xp, kh, kw, stride, hp, wp)
    y = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3]))  # N,Hp,Wp,O
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    out = _make(y, (x, w), "conv2d")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
                w._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gij = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                        gxp[:, :, i:i + stride * hp:stride,
                            j:j + stride * wp:stride] += gij.transpose(0, 3, 1, 2)
                if pad:
                    gxp = gxp[:, :, pad:pad + h, pad:pad + wd]
                x._accumulate(gxp)
        out._backward = _bw
    return out


def gap(a: Tensor) -> Tensor:
    """Global average pooling: NCHW -> NC (mean over the spatial map)."""
    if a.data.ndim != 4:
        raise ShapeError("gap expects a 4-d feature map")
    h, w = a.shape[2], a.shape[3]
    out = _make(a.data.mean(axis=(2, 3)), (a,), "gap")
    if out.requires_grad:
        def _bw():
            g = out.grad[:, :, None, None] / (h * w)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


def cap(a: Tensor) -> Tensor:
    """Channel-wise average pooling: NCHW -> NHW (mean over channels)."""
    if a.data.ndim != 4:
        raise ShapeError("cap expects a 4-d feature map")
    c = a.shape[1]
    out = _make(a.data.mean(axis=1), (a,), "cap")
    if out.requires_grad:
        def _bw():
            g = out.grad[:, None, :, :] / c
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


# -- structural ops ------------------------------------------------------------


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out = _make(a.data[:, start:stop].copy(), (a,), "slice_channels")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            a._accumulate(g)
        out._backward = _bw
    return out


def gather_cells(a: Tensor, cells: Sequence[tuple[int, int, int]]) -> Tensor:
    """Pick per-cell channel vectors: (n, i, j) rows of an NCHW map -> [P, C]."""
    idx = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    out = _make(a.data[idx[:, 0], :, idx[:, 1], idx[:, 2]], (a,), "gather_cells")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, (idx[:, 0], slice(None), idx[:, 1], idx[:, 2]), out.grad)
            a._accumulate(g)
        out._backward = _bw
    return out


def concat0(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along axis 0."""
    out = _make(np.concatenate([t.data for t in tensors], axis=0), tensors, "concat0")
    if out.requires_grad:
        sizes = [t.shape[0] for t in tensors]
        def _bw():
            ofs = 0
            for t, sz in zip(tensors, sizes):
                if t.requires_grad:
                    t._accumulate(out.grad[ofs:ofs + sz])
                ofs += sz
        out._backward = _bw
    return out


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d vector."""
    out = _make(np.array([t.data.reshape(()) for t in tensors],
                         dtype=tensors[0].data.dtype), tensors, "stack_scalars")
    if out.requires_grad:
        def _bw():
            for k, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(out.grad[k].reshape(t.shape))
        out._backward = _bw
    return out


def diag(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a vector."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("diag expects a square matrix")
    out = _make(np.diagonal(a.data).copy(), (a,), "diag")
    if out.requires_grad:
        m = a.shape[0]
        def _bw():
            g = np.zeros_like(a.data)
            g[np.arange(m), np.arange(m)] = out.grad
            a._accumulate(g)
        out._backward = _bw
    return out


def l2norm_spatial(a: Tensor) -> Tensor:
    """Euclidean norm of each sample's spatial map: [N, H, W] -> [N].

    Subgradient 0 at the origin so identical maps yield an exactly-zero,
    NaN-free gradient.
    """
    if a.data.ndim != 3:
        raise ShapeError("l2norm_spatial expects [N, H, W]")
    norms = np.sqrt((a.data ** 2).sum(axis=(1, 2)))
    out = _make(norms, (a,), "l2norm_spatial")
    if out.requires_grad:
        def _bw():
            safe = np.where(norms > 0, norms, 1.0)
            scale = (out.grad / safe) * (norms > 0)
            a._accumulate(a.data * scale[:, None, None])
        out._backward = _bw
    return out


# -- quantization / gating primitives -------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    """round() with half-away-from-zero ties (numpy's default rounds to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ste_round_grid(a: Tensor, k: int) -> Tensor:
    """Snap values in [0,1] to the uniform 2^k-level grid; identity gradient.

    The round step is not differentiable; the straight-through rule passes the
    upstream gradient unchanged while every smooth factor around it keeps its
    analytic derivative.
    """
    levels = float(2 ** k - 1)
    y = round_half_away(a.data * levels) / levels
    out = _make(y.astype(a.data.dtype), (a,), "ste_round_grid")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad)
        out._backward = _bw
    return out


def ste_binarize(a: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard 0/1 gate in the forward pass, soft gradient in the backward pass."""
    y = (a.data > threshold).astype(a.data.dtype)
    out = _make(y, (a,), "ste_binarize")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad)
        out._backward = _bw
    return out


# -- losses ---------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _make(loss, (logits,), "bce_with_logits")
    if out.requires_grad:
        def _bw():
            logits._accumulate(out.grad * (_sigmoid_np(z) - t))
        out._backward = _bw
    return out


def smooth_l1(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise smooth-L1 (Huber with unit transition point)."""
    t = np.asarray(targets, dtype=pred.data.dtype)
    e = pred.data - t
    ae = np.abs(e)
    loss = np.where(ae < 1.0, 0.5 * e * e, ae - 0.5)
    out = _make(loss.astype(pred.data.dtype), (pred,), "smooth_l1")
    if out.requires_grad:
        def _bw():
            g = np.where(ae < 1.0, e, np.sign(e))
            pred._accumulate(out.grad * g)
        out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy of [P, C] logits against integer labels [P]."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects [P, C] logits")
    lab = np.asarray(labels, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    losses = -logp[np.arange(z.shape[0]), lab]
    out = _make(losses.astype(z.dtype), (logits,), "softmax_ce")
    if out.requires_grad:
        def _bw():
            p = ez / sez
            p[np.arange(z.shape[0]), lab] -= 1.0
            logits._accumulate(out.grad[:, None] * p)
        out._backward = _bw
    return out


# -- gradient oracle --------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-4) -> float:
    """Compare the analytic gradient of a scalar map against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    Non-finite function values count as failure (returned as inf).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar-valued map")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.astype(np.float64).ravel()
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        up = f(Tensor(bumped.reshape(x.shape), dtype=x.data.dtype)).item()
        bumped[i] = flat[i] - eps
        dn = f(Tensor(bumped.reshape(x.shape), dtype=x.data.dtype)).item()
        if not (math.isfinite(up) and math.isfinite(dn)):
            return math.inf
        numeric = (up - dn) / (2.0 * eps)
        a = float(analytic.ravel()[i])
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
