"""Reverse-mode automatic differentiation over dense float64 tensors.

A deliberately small engine: enough primitives to express small dense and
convolutional classifiers, sign-gradient attacks, and the composite training
loss, with per-forward tapes that are discarded after ``backward``.

Conventions baked in here (tests rely on them):
  * double precision everywhere
  * ReLU / abs / max-with-scalar take subgradient 0 at their kinks
  * gradients accumulate into ``Tensor.grad`` until ``zero_grad``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "PRIMITIVE_OPS",
    "apply_primitive",
    "backward",
    "zero_grad",
    "finite_diff_grad",
    "add",
    "subtract",
    "multiply",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "flatten",
    "reduce_sum",
    "reduce_mean",
    "log",
    "exp",
    "absolute",
    "max_with_scalar",
    "l2_norm",
    "log_softmax",
]


@dataclass
class TapeNode:
    """One recorded primitive application.

    ``backward_fn`` maps the output adjoint to one adjoint per input
    (``None`` for inputs that need no gradient). Saved forward values live in
    the closure.
    """

    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class Tensor:
    """Dense float64 array plus optional gradient and tape link."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor: non-finite values in input data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Copy of the values, cut off from any tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append(f"op={self.node.op}")
        inner = ", ".join([f"shape={self.shape}"] + flags)
        return f"Tensor({inner})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"{op}: non-finite input values")


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{op}: produced non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = any(t._tracked() for t in inputs)
    out.requires_grad = tracked
    out.node = TapeNode(op, tuple(inputs), backward_fn) if tracked else None
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias on the feature/channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("add", a, b)
    if a.shape == b.shape:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    # bias broadcast: (N,F)+(F,) or (N,C,H,W)+(C,)
    if a.data.ndim == 2 and b.data.shape == (a.shape[1],):
        return _result("add", a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=0)))
    if a.data.ndim == 4 and b.data.shape == (a.shape[1],):
        return _result("add", a.data + b.data.reshape(1, -1, 1, 1), (a, b),
                       lambda g: (g, g.sum(axis=(0, 2, 3))))
    raise ValueError(f"add: shapes {a.shape} and {b.shape} do not conform")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("subtract", a, b)
    if a.shape != b.shape:
        raise ValueError(f"subtract: shapes {a.shape} and {b.shape} differ")
    return _result("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("multiply", a, b)
    if a.shape != b.shape:
        raise ValueError(f"multiply: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated w.r.t. c)."""
    a = _as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise ValueError("scale: non-finite scalar")
    _check_finite("scale", a)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims {a.shape} x {b.shape} mismatch")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input by OIHW kernel, zero padding.

    Direct per-tap accumulation (no im2col buffer); valid output after the
    explicit zero pad.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    _check_finite("conv2d", x, w)
    stride, pad = int(stride), int(pad)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(
            f"conv2d: expects NCHW input and OIHW kernel, got {x.shape} and "
            f"{w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {ci}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input "
            f"({h + 2 * pad},{wd + 2 * pad})")

    xd, wdat = x.data, w.data
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    out = np.zeros((n, o, oh, ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out += np.einsum("nchw,oc->nohw", patch, wdat[:, :, i, j])

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * oh, stride),
                      slice(j, j + stride * ow, stride))
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl])
                gxp[sl] += np.einsum("nohw,oc->nchw", g, wdat[:, :, i, j])
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _result("conv2d", out, (x, w), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("relu", x)
    mask = x.data > 0.0
    return _result("relu", np.where(mask, x.data, 0.0), (x,),
                   lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first: (N, ...) -> (N, F)."""
    x = _as_tensor(x)
    _check_finite("flatten", x)
    if x.data.ndim < 2:
        raise ValueError(f"flatten: needs >= 2 dims, got shape {x.shape}")
    shp = x.shape
    return _result("flatten", x.data.reshape(shp[0], -1), (x,),
                   lambda g: (g.reshape(shp),))


def reduce_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("reduce_sum", x)
    shp = x.shape
    return _result("reduce_sum", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shp).copy(),))


def reduce_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("reduce_mean", x)
    shp, n = x.shape, x.data.size
    return _result("reduce_mean", np.asarray(x.data.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, shp).copy(),))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("log", x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: non-positive input")
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_finite("exp", x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x| with subgradient 0 at 0."""
    x = _as_tensor(x)
    _check_finite("abs", x)
    sgn = np.sign(x.data)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * sgn,))


def max_with_scalar(x: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c); gradient 0 where x <= c."""
    x = _as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise ValueError("max_with_scalar: non-finite scalar")
    _check_finite("max_with_scalar", x)
    mask = x.data > c
    return _result("max_with_scalar", np.maximum(x.data, c), (x,),
                   lambda g: (g * mask,))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm along the last axis; zero vectors get subgradient 0."""
    x = _as_tensor(x)
    _check_finite("l2_norm", x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1))
    safe = np.where(norm == 0.0, 1.0, norm)

    def backward_fn(g):
        return ((np.asarray(g) / safe)[..., np.newaxis] * xd,)

    return _result("l2_norm", norm, (x,), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last (class) axis."""
    x = _as_tensor(x)
    _check_finite("log_softmax", x)
    xd = x.data
    if xd.ndim < 1:
        raise ValueError("log_softmax: needs at least 1 dim")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def backward_fn(g):
        return (g - softmax * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), backward_fn)


PRIMITIVE_OPS = (
    "add", "subtract", "multiply", "scale", "matmul", "conv2d", "relu",
    "flatten", "reduce_sum", "reduce_mean", "log", "exp", "abs",
    "max_with_scalar", "l2_norm", "log_softmax",
)

_DISPATCH = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "flatten": flatten,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "log": log,
    "exp": exp,
    "abs": absolute,
    "max_with_scalar": max_with_scalar,
    "l2_norm": l2_norm,
    "log_softmax": log_softmax,
}


def apply_primitive(op_kind: str, inputs: Sequence[Tensor],
                    attrs: Optional[dict] = None) -> Tensor:
    """Uniform entry point over the primitive set, mainly for test sweeps."""
    if op_kind not in _DISPATCH:
        raise ValueError(f"unknown primitive op '{op_kind}'")
    return _DISPATCH[op_kind](*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar into requires_grad leaves.

    Leaf gradients accumulate across calls until ``zero_grad``. The tape
    hanging off ``loss`` is released afterwards, so a fresh forward pass is
    needed before differentiating again.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward: expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(
            f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    # topological order of the taped subgraph reachable from loss
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.node is not None or parent.requires_grad:
                    stack.append((parent, False))

    adjoint: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            continue
        grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.inputs, grads):
            if pg is None or not (parent.requires_grad or parent.node):
                continue
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if prev is None else prev + pg

    # discard the tape: the graph is single-use
    for t in order:
        t.node = None


def zero_grad(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-4) -> Tensor:
    """Central-difference gradient estimate of a scalar map, per coordinate.

    Independent of the tape machinery on purpose: this is the oracle the
    engine is checked against.
    """
    if h <= 0.0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")

    def _scalar(v):
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        if arr.size != 1:
            raise ValueError("finite_diff_grad: f must return a scalar")
        return float(arr.reshape(()))

    base = x.data.copy()
    grad = np.empty_like(base)
    flat_base = base.ravel()
    flat_grad = grad.ravel()
    for i in range(flat_base.size):
        bumped = flat_base.copy()
        bumped[i] = flat_base[i] + h
        fp = _scalar(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] = flat_base[i] - h
        fm = _scalar(f(Tensor(bumped.reshape(base.shape))))
        flat_grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
