"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 by default; float64 is
supported for high-precision oracle checks). Every op records its inputs
and a vector-Jacobian closure on the output tensor; ``backward`` builds a
topologically ordered tape from the loss and walks it in reverse,
accumulating gradients by sum over all paths. The tape is consumed by the
walk: calling ``backward`` twice on the same graph raises.

Convolutions use NHWC layout, valid padding only, via im2col + GEMM.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import NormError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None):
    a = np.asarray(x)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return a


class Tensor:
    """N-dimensional value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        extra = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{extra})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar; the module-level functions are the real op set
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _record(out: Tensor, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), vjp, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))

    def vjp(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _record(out, (a,), vjp, "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def vjp(g):
        return (g.T,)

    return _record(out, (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}")

    def vjp(g):
        return (g.reshape(old),)

    return _record(out, (a,), vjp, "reshape")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # derivative at 0 is taken as 0
    out = Tensor(np.where(mask, a.data, 0))

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), vjp, "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e)

    def vjp(g):
        return (g * e,)

    return _record(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp, "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside the interval."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp, "clip")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm along ``axis``; zero rows raise NormError."""
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise NormError(f"l2_normalize: zero-norm slice along axis {axis}")
    unit = a.data / norm
    out = Tensor(unit)

    def vjp(g):
        dot = (g * unit).sum(axis=axis, keepdims=True)
        return ((g - unit * dot) / norm,)

    return _record(out, (a,), vjp, "l2_normalize")


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p=0 is the identity (no mask is drawn)."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, a.dtype)
    out = Tensor(a.data * keep)

    def vjp(g):
        return (g * keep,)

    return _record(out, (a,), vjp, "dropout")


def cosine_similarity(a, b) -> Tensor:
    """cos(a, b) = a.b / (|a||b|) for 1-d vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: need equal 1-d shapes, got {a.shape} and {b.shape}")
    return tsum(mul(l2_normalize(a, axis=0), l2_normalize(b, axis=0)))


def softmax_cross_entropy(logits, target_index) -> Tensor:
    """Mean softmax cross-entropy over rows; targets are class indices."""
    logits = as_tensor(logits)
    idx = np.asarray(target_index, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs targets {idx.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    prob = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -(np.log(prob[np.arange(n), idx])).mean()
    out = Tensor(np.asarray(nll, dtype=z.dtype))

    def vjp(g):
        d = prob.copy()
        d[np.arange(n), idx] -= 1.0
        return (d * (g / n),)

    return _record(out, (logits,), vjp, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# convolution ops (NHWC, valid padding)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    B, H, W, C = x.shape
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (B, oh, ow, kh, kw, C), (s0, s1 * sh, s2 * sw, s1, s2, s3))
    return np.ascontiguousarray(view.reshape(B * oh * ow, kh * kw * C)), oh, ow


def conv2d(x, w, stride=(1, 1)) -> Tensor:
    """Valid 2-d convolution; x is (B,H,W,C), w is (kh,kw,C,O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/kernel, got {x.shape} and {w.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    B, H, W, C = x.data.shape
    kh, kw, cin, O = w.data.shape
    if cin != C:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: input {x.shape} narrower than kernel {w.shape}")
    xd = np.ascontiguousarray(x.data)
    cols, oh, ow = _im2col(xd, kh, kw, sh, sw)
    out = Tensor((cols @ w.data.reshape(-1, O)).reshape(B, oh, ow, O))

    def vjp(g):
        gm = g.reshape(-1, O)
        dw = (cols.T @ gm).reshape(kh, kw, C, O)
        dcols = (gm @ w.data.reshape(-1, O).T).reshape(B, oh, ow, kh, kw, C)
        dx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + oh * sh:sh, j:j + ow * sw:sw, :] += dcols[:, :, :, i, j, :]
        return dx, dw

    return _record(out, (x, w), vjp, "conv2d")


def crop2d(x, dh: int, dw: int) -> Tensor:
    """Center-crop the two spatial dims of an NHWC tensor by (dh, dw) total."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"crop2d: need 4-d input, got {x.shape}")
    B, H, W, C = x.data.shape
    if dh >= H or dw >= W or dh < 0 or dw < 0:
        raise ShapeError(f"crop2d: cannot crop ({dh},{dw}) from {x.shape}")
    t, l = dh // 2, dw // 2
    out = Tensor(x.data[:, t:H - (dh - t), l:W - (dw - l), :].copy())

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[:, t:H - (dh - t), l:W - (dw - l), :] = g
        return (dx,)

    return _record(out, (x,), vjp, "crop2d")


def global_avg_pool(x) -> Tensor:
    """Average over the two spatial dims of an NHWC tensor: (B,H,W,C) -> (B,C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-d input, got {x.shape}")
    B, H, W, C = x.data.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def vjp(g):
        gg = g[:, None, None, :] / np.asarray(H * W, dtype=g.dtype)
        return (np.broadcast_to(gg, x.data.shape).astype(g.dtype, copy=True),)

    return _record(out, (x,), vjp, "global_avg_pool")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """Topologically ordered record of the ops reachable from a loss."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @staticmethod
    def trace(root: Tensor) -> "GradTape":
        records: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                records.append(node)
                continue
            if id(node) in seen or node._vjp is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return GradTape(records)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable requires_grad
    tensor's ``.grad``. The tape is consumed; a second call raises."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")
    if loss._op == "(consumed)":
        raise RuntimeError("backward: tape already consumed")
    tape = GradTape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.records):
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            g = g.astype(parent.dtype, copy=False)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g
        node._parents = ()
        node._vjp = None
        node._op = "(consumed)"
        if node is not loss:
            node.grad = None
    loss._op = "(consumed)"


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-3,
               coords: Sequence[tuple] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of scalar ``f`` at ``x``; runs in float64 for the oracle.

    ``coords`` optionally restricts the finite-difference probe to a subset
    of flat indices (the analytic gradient is still the full backward pass).
    """
    x64 = np.array(x, dtype=np.float64)  # private copy: the probe mutates it
    xt = Tensor(x64.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad.reshape(-1)

    flat = x64.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x64.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x64.copy())).data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
