"""A small reverse-mode automatic differentiation engine on float64 numpy arrays.

Tensors form a dynamically-built computation graph; ``backward()`` on a scalar
walks the graph once in reverse topological order and accumulates gradients.
Only the operations the scoring model needs are provided: elementwise
arithmetic, 2-D convolution, fully-connected layers, relu, L2 normalization,
and the reductions used by the contrastive and detection losses.

Forward evaluation is deterministic: identical inputs produce bit-identical
outputs. Inside a ``no_grad()`` block no graph is recorded, which makes plain
evaluation (finite-difference probes, inference-time scoring) cheap.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED: bool = True

# When not None, every relu() call appends the sign pattern of its
# pre-activation here. The gradient checker uses this to detect that a
# finite-difference probe stepped across a relu kink.
_RELU_TRACE: list[bytes] | None = None


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def relu_sign_trace() -> Iterator[list[bytes]]:
    """Record the sign pattern of every relu pre-activation inside the block."""
    global _RELU_TRACE
    prev = _RELU_TRACE
    trace: list[bytes] = []
    _RELU_TRACE = trace
    try:
        yield trace
    finally:
        _RELU_TRACE = prev


class Tensor:
    """A float64 array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; "
                            "multiply by a reciprocal scalar instead")
        return mul(self, 1.0 / float(other))

    # -- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every graph leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(out_data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build the output tensor, attaching the graph only when needed."""
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.data.shape} vs {b.data.shape}")


# -- arithmetic -------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        out = _wrap(a.data + scalar, (a,), lambda g: _accumulate(a, g))
        return out
    _check_same_shape(a, b, "add")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _wrap(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _wrap(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        return _wrap(a.data * scalar, (a,), lambda g: _accumulate(a, g * scalar))
    _check_same_shape(a, b, "mul")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _wrap(a.data * b.data, (a, b), backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _wrap(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return tensor_sum(a) * (1.0 / a.data.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors of equal length; returns a scalar."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"dot: expected 1-D operands, got {a.data.shape} and {b.data.shape}")
    _check_same_shape(a, b, "dot")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _wrap(np.asarray(a.data @ b.data), (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.data.shape))

    return _wrap(a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.size,))


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    if not parts:
        raise ShapeError("stack: need at least one tensor")
    for p in parts:
        if p.data.size != 1:
            raise ShapeError(f"stack: expected scalars, got shape {p.data.shape}")
    parts = tuple(parts)

    def backward(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            _accumulate(p, g.reshape(-1)[i].reshape(p.data.shape))

    return _wrap(np.array([float(p.data) for p in parts]), parts, backward)


# -- neural-network layers --------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(np.ascontiguousarray(mask).tobytes())

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * mask)

    return _wrap(a.data * mask, (a,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` for a 1-D input."""
    if x.data.ndim != 1:
        raise ShapeError(f"fully_connected: input must be 1-D, got {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"fully_connected: weight {weight.data.shape} does not "
                         f"match input {x.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.data.shape} does not match "
                         f"output dimension {weight.data.shape[0]}")

    def backward(g: np.ndarray) -> None:
        _accumulate(weight, np.outer(g, x.data))
        _accumulate(bias, g)
        _accumulate(x, weight.data.T @ g)

    return _wrap(weight.data @ x.data + bias.data, (x, weight, bias), backward)


# im2col gather indices keyed by (C_in, H, W, kH, kW, padding, stride);
# building them is pure index arithmetic, so the cache is shared globally.
_CONV_INDEX_CACHE: dict[tuple[int, ...], tuple[np.ndarray, int, int, int, int]] = {}


def _conv_indices(c_in: int, h: int, w: int, kh: int, kw: int,
                  padding: int, stride: int):
    key = (c_in, h, w, kh, kw, padding, stride)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    c = np.repeat(np.arange(c_in), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), c_in)
    kj = np.tile(np.arange(kw), c_in * kh)
    rows = (c * hp * wp + ki * wp + kj)[:, None]
    oi = np.repeat(np.arange(out_h), out_w) * stride
    oj = np.tile(np.arange(out_w), out_h) * stride
    cols = (oi * wp + oj)[None, :]
    idx = rows + cols
    cached = (idx, hp, wp, out_h, out_w)
    _CONV_INDEX_CACHE[key] = cached
    return cached


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation of a (C_in, H, W) map with a (C_out, C_in, kH, kW) kernel.

    Output spatial size is ``(H + 2*padding - kH) // stride + 1`` per axis.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be (C, H, W), got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, kH, kW), got {kernel.data.shape}")
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel input channels {kc} != input channels {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.data.shape} does not match {c_out} output channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel ({kh}x{kw}) larger than padded input "
                         f"({h + 2 * padding}x{w + 2 * padding})")
    if padding < 0 or stride < 1:
        raise ShapeError(f"conv2d: invalid padding={padding} / stride={stride}")

    idx, hp, wp, out_h, out_w = _conv_indices(c_in, h, w, kh, kw, padding, stride)
    if padding:
        xp = np.zeros((c_in, hp, wp))
        xp[:, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = xp.reshape(-1)[idx]                      # (C_in*kH*kW, out_h*out_w)
    km = kernel.data.reshape(c_out, -1)
    out = (km @ cols + bias.data[:, None]).reshape(c_out, out_h, out_w)

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(c_out, -1)
        _accumulate(kernel, (gm @ cols.T).reshape(kernel.data.shape))
        _accumulate(bias, gm.sum(axis=1))
        dcols = km.T @ gm
        dxp = np.zeros(c_in * hp * wp)
        np.add.at(dxp, idx, dcols)
        dxp = dxp.reshape(c_in, hp, wp)
        if padding:
            dxp = dxp[:, padding:padding + h, padding:padding + w]
        _accumulate(x, dxp)

    return _wrap(out, (x, kernel, bias), backward)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale a 1-D vector to unit Euclidean norm; rejects the zero vector."""
    if a.data.ndim != 1:
        raise ShapeError(f"l2_normalize: expected 1-D input, got {a.data.shape}")
    norm = float(np.linalg.norm(a.data))
    if norm == 0.0:
        raise ShapeError("l2_normalize: zero vector has no direction")
    y = a.data / norm

    def backward(g: np.ndarray) -> None:
        _accumulate(a, (g - y * (y @ g)) / norm)

    return _wrap(y, (a,), backward)


# -- reductions used in the losses ------------------------------------------

def logsumexp(a: Tensor) -> Tensor:
    """Numerically stable log(sum(exp(v))) of a 1-D tensor."""
    if a.data.ndim != 1:
        raise ShapeError(f"logsumexp: expected 1-D input, got {a.data.shape}")
    m = float(a.data.max())
    e = np.exp(a.data - m)
    s = e.sum()
    softmax = e / s

    def backward(g: np.ndarray) -> None:
        _accumulate(a, float(g) * softmax)

    return _wrap(np.asarray(m + np.log(s)), (a,), backward)


def bce_with_logit(logit: Tensor, target: float) -> Tensor:
    """Binary cross-entropy of a scalar logit against a 0/1 target.

    Computed as ``max(z, 0) - z*y + log(1 + exp(-|z|))``, which is stable for
    logits of either sign.
    """
    if logit.data.size != 1:
        raise ShapeError(f"bce_with_logit: logit must be scalar, got {logit.data.shape}")
    target = float(target)
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"bce_with_logit: target must be in [0, 1], got {target}")
    z = float(logit.data)
    loss = max(z, 0.0) - z * target + np.log1p(np.exp(-abs(z)))
    sigma = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))

    def backward(g: np.ndarray) -> None:
        _accumulate(logit, (float(g) * (sigma - target)) * np.ones_like(logit.data))

    return _wrap(np.asarray(loss).reshape(logit.data.shape), (logit,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Huber-style regression loss summed over elements.

    Quadratic ``0.5*d**2`` for |d| < 1, linear ``|d| - 0.5`` beyond; the
    gradient is ``clip(d, -1, 1)``.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.data.shape} vs target {target.shape}")
    d = pred.data - target
    a = np.abs(d)
    per_elem = np.where(a < 1.0, 0.5 * d * d, a - 0.5)

    def backward(g: np.ndarray) -> None:
        _accumulate(pred, float(g) * np.clip(d, -1.0, 1.0))

    return _wrap(np.asarray(per_elem.sum()), (pred,), backward)
