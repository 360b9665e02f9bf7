"""Reverse-mode differentiable tensor kernel.

Forward ops build a graph of Tensor nodes; ``Tensor.backward`` walks the graph
in reverse topological order and accumulates vector-Jacobian products into the
``grad`` buffers of leaves created with ``requires_grad=True``. Ops that only
touch constant inputs skip gradient bookkeeping entirely.

Arrays default to float64; float32 can be selected globally for speed at the
cost of looser numerical tolerances.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import KernelError, OptimizerError, ShapeError

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select the dtype used by newly created tensors (float64 or float32)."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported default dtype {dt}")
    _default_dtype = dt.type


def default_dtype():
    return _default_dtype


class Tensor:
    """A shaped value node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        # True when this node lies on a path from a requires_grad leaf.
        self._needs_grad = requires_grad

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

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node w.r.t. all requires_grad leaves.

        ``seed`` defaults to ones; a scalar output therefore gets d(out)/d(leaf).
        Calling twice without zeroing grads accumulates.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward without a seed needs a scalar output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match output shape {self.shape}"
                )
        # Iterative post-order topological sort over the needs-grad subgraph.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent._needs_grad and id(parent) not in seen:
                    stack.append((parent, False))
        # leaves keep accumulating across walks; interior grads start fresh
        for node in order:
            if node._backward is not None:
                node.grad = None
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        flags = "requires_grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, {flags})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # own a copy: g may be a view into another node's buffer or a user seed
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _node(data: np.ndarray, *parents: Tensor) -> Tensor:
    out = Tensor(data)
    out._needs_grad = any(p._needs_grad for p in parents)
    if out._needs_grad:
        out._parents = parents
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape {a.shape} vs {b.shape}")
    out = _node(a.data + b.data, a, b)
    if out._needs_grad:
        def backward(g):
            if a._needs_grad:
                _accumulate(a, g)
            if b._needs_grad:
                _accumulate(b, g)
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape {a.shape} vs {b.shape}")
    out = _node(a.data - b.data, a, b)
    if out._needs_grad:
        def backward(g):
            if a._needs_grad:
                _accumulate(a, g)
            if b._needs_grad:
                _accumulate(b, -g)
        out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _node(a.data * c, a)
    if out._needs_grad:
        def backward(g):
            _accumulate(a, g * c)
        out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    out = _node(np.maximum(a.data, 0.0), a)
    if out._needs_grad:
        mask = a.data > 0.0
        def backward(g):
            _accumulate(a, g * mask)
        out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    out = _node(data, a)
    if out._needs_grad:
        src = a.shape
        def backward(g):
            _accumulate(a, g.reshape(src))
        out._backward = backward
    return out


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two 1-D tensors."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat expects 1-D operands, got {a.shape} and {b.shape}")
    out = _node(np.concatenate([a.data, b.data]), a, b)
    if out._needs_grad:
        na = a.shape[0]
        def backward(g):
            if a._needs_grad:
                _accumulate(a, g[:na])
            if b._needs_grad:
                _accumulate(b, g[na:])
        out._backward = backward
    return out


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Select entries of a 1-D tensor; duplicates allowed (scatter-add backward)."""
    if a.data.ndim != 1:
        raise ShapeError(f"gather expects a 1-D operand, got {a.shape}")
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise ShapeError(f"gather index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(
            f"gather index out of range for length {a.shape[0]}: "
            f"[{index.min()}, {index.max()}]"
        )
    out = _node(a.data[index], a)
    if out._needs_grad:
        def backward(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            _accumulate(a, buf)
        out._backward = backward
    return out


def channel_upsample(y: Tensor, w: Tensor) -> Tensor:
    """Expand a length-M vector to length M*A: out[c*A + a] = w[a] * y[c]."""
    if y.data.ndim != 1 or w.data.ndim != 1:
        raise ShapeError(f"channel_upsample expects 1-D operands, got {y.shape} and {w.shape}")
    amp = w.shape[0]
    data = (y.data[:, None] * w.data[None, :]).reshape(-1)
    out = _node(data, y, w)
    if out._needs_grad:
        m = y.shape[0]
        def backward(g):
            g2 = g.reshape(m, amp)
            if y._needs_grad:
                _accumulate(y, g2 @ w.data)
            if w._needs_grad:
                _accumulate(w, y.data @ g2)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# dense / convolutional ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map w @ x (+ b) for a 1-D input; rows of w are output coefficients."""
    if x.data.ndim != 1:
        raise ShapeError(f"linear expects a 1-D input, got {x.shape}")
    if w.data.ndim != 2:
        raise ShapeError(f"linear expects a 2-D weight, got {w.shape}")
    o, n = w.shape
    if x.shape[0] != n:
        raise ShapeError(f"linear: weight {w.shape} incompatible with input {x.shape}")
    y = w.data @ x.data
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _node(y, *parents)
    if out._needs_grad:
        def backward(g):
            if x._needs_grad:
                _accumulate(x, w.data.T @ g)
            if w._needs_grad:
                _accumulate(w, g[:, None] * x.data[None, :])
            if b is not None and b._needs_grad:
                _accumulate(b, g)
        out._backward = backward
    return out


def _im2col(arr: np.ndarray, kh: int, kw: int, ph: int, pw: int) -> np.ndarray:
    """(C,H,W) -> (H*W, C*kh*kw) patch matrix under zero same-padding."""
    c, h, w = arr.shape
    padded = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=arr.dtype)
    padded[:, ph : ph + h, pw : pw + w] = arr
    patches = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # (C,H,W,kh,kw)
    return patches.transpose(1, 2, 0, 3, 4).reshape(h * w, c * kh * kw)


def conv2d_same(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 zero-padded cross-correlation keeping spatial size: (C,H,W)->(F,H,W)."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_same expects (C,H,W) input, got {x.shape}")
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d_same expects (F,C,kh,kw) kernel, got {k.shape}")
    f, c, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise KernelError(f"conv2d_same requires odd kernel sides, got {kh}x{kw}")
    if x.shape[0] != c:
        raise ShapeError(f"conv2d_same: kernel {k.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d_same: bias {b.shape} incompatible with kernel {k.shape}")
    _, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    cols = _im2col(x.data, kh, kw, ph, pw)           # (H*W, C*kh*kw)
    kmat = k.data.reshape(f, c * kh * kw)
    y = (cols @ kmat.T).T.reshape(f, h, w)
    if b is not None:
        y += b.data[:, None, None]
    parents = (x, k) if b is None else (x, k, b)
    out = _node(y, *parents)
    if out._needs_grad:
        def backward(g):
            g2 = g.reshape(f, h * w)
            if k._needs_grad:
                _accumulate(k, (g2 @ cols).reshape(f, c, kh, kw))
            if b is not None and b._needs_grad:
                _accumulate(b, g.sum(axis=(1, 2)))
            if x._needs_grad:
                # full correlation of the upstream grad with flipped kernels
                gcols = _im2col(g, kh, kw, ph, pw)   # (H*W, F*kh*kw)
                kflip = k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * kh * kw)
                _accumulate(x, (gcols @ kflip.T).T.reshape(c, h, w))
        out._backward = backward
    return out


def conv2d_valid_strided(x: Tensor, k: Tensor, stride: int) -> Tensor:
    """Non-overlapping valid cross-correlation: (1,H,W) with (F,1,B,B), stride B -> (F,H/B,W/B)."""
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"conv2d_valid_strided expects (1,H,W) input, got {x.shape}")
    if k.data.ndim != 4 or k.shape[1] != 1:
        raise ShapeError(f"conv2d_valid_strided expects (F,1,B,B) kernel, got {k.shape}")
    f, _, kh, kw = k.shape
    if not (kh == kw == stride):
        raise KernelError(
            f"conv2d_valid_strided requires kernel side == stride, got {kh}x{kw} at stride {stride}"
        )
    _, h, w = x.shape
    if h % stride or w % stride:
        from .errors import GeometryError
        raise GeometryError(f"frame {h}x{w} is not divisible into {stride}x{stride} blocks")
    gh, gw = h // stride, w // stride
    blocks = (
        x.data.reshape(gh, stride, gw, stride).transpose(0, 2, 1, 3).reshape(gh * gw, stride * stride)
    )
    kmat = k.data.reshape(f, stride * stride)
    y = (blocks @ kmat.T).T.reshape(f, gh, gw)
    out = _node(y, x, k)
    if out._needs_grad:
        def backward(g):
            g2 = g.reshape(f, gh * gw)
            if k._needs_grad:
                _accumulate(k, (g2 @ blocks).reshape(f, 1, stride, stride))
            if x._needs_grad:
                dblocks = g2.T @ kmat                # (gh*gw, B*B)
                dx = (
                    dblocks.reshape(gh, gw, stride, stride)
                    .transpose(0, 2, 1, 3)
                    .reshape(1, h, w)
                )
                _accumulate(x, dx)
        out._backward = backward
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Half mean squared error: sum((a-b)^2) / (2 * element_count)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.data.size
    out = _node(np.asarray(np.sum(diff * diff) / (2.0 * n)), a, b)
    if out._needs_grad:
        def backward(g):
            d = (g / n) * diff
            if a._needs_grad:
                _accumulate(a, d)
            if b._needs_grad:
                _accumulate(b, -d)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        if not self.params:
            raise OptimizerError("no parameters to optimize")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter '{name}' has no gradient")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
