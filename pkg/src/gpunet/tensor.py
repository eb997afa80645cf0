"""Dense float32 tensors with reverse-mode gradients for the GP-Unet layers.

Spatial tensors use the axis order (batch, channel, x, y, z).  Whenever a
"linear index" or "raster order" is needed (tie-breaking in max operations,
component numbering) the x axis varies fastest, i.e. the index of voxel
(x, y, z) is ``x + X * (y + Y * z)``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
IM2COL_MAX_CHANNELS = 2


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A float32 array plus an optional gradient buffer and the graph edge
    that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple["Tensor", ...] = ()):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if arr.ndim > 5:
            raise ShapeError(f"tensors have at most 5 axes, got {arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or (_grad_enabled and any(p.requires_grad for p in _parents))
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn: Callable[[], None] | None = None
        self.name = name

    @property
    def _backward(self) -> Callable[[], None] | None:
        return self._backward_fn

    @_backward.setter
    def _backward(self, fn: Callable[[], None] | None) -> None:
        # a backward closure refers to its own output, so keeping it on a
        # tensor that needs no gradient would only create a reference cycle
        self._backward_fn = fn if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(dtype=np.float64).astype(DTYPE), _parents=(self,))

        def backward():
            self._accumulate(np.broadcast_to(out.grad, self.shape))

        out._backward = backward
        return out

    def backward(self) -> None:
        """Populate ``grad`` on every tensor that feeds into this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones(self.shape, dtype=DTYPE)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward()
        # release the graph so its activations are freed without waiting for
        # the cycle collector; a second backward needs a fresh forward pass
        for t in order:
            t._backward_fn = None
            t._parents = ()


_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording a graph (inference and validation)."""
    global _grad_enabled
    saved, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = saved


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


class _PatternTape:
    """ReLU masks and max-pooling argmaxes in evaluation order.  Recording
    fills the tape; replaying makes those layers reuse the recorded choices,
    which pins a ReLU network to one linear piece."""

    def __init__(self, entries: list[np.ndarray] | None = None):
        self.replaying = entries is not None
        self.entries = list(entries) if entries is not None else []
        self.pos = 0

    def choose(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if not self.replaying:
            value = compute()
            self.entries.append(value)
            return value
        if self.pos >= len(self.entries):
            raise RuntimeError("replayed activation pattern is shorter than the evaluation")
        value = self.entries[self.pos]
        self.pos += 1
        return value


_tape: _PatternTape | None = None


def _choose(compute: Callable[[], np.ndarray]) -> np.ndarray:
    return compute() if _tape is None else _tape.choose(compute)


@contextmanager
def record_pattern():
    """Yield the list of activation choices made inside the block."""
    global _tape
    saved, _tape = _tape, _PatternTape()
    try:
        yield _tape.entries
    finally:
        _tape = saved


@contextmanager
def replay_pattern(entries: list[np.ndarray]):
    """Evaluate with ReLU masks and max argmaxes taken from ``entries``."""
    global _tape
    saved, _tape = _tape, _PatternTape(entries)
    try:
        yield
    finally:
        _tape = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ConvParams:
    """Kernel of shape (out, in, kx, ky, kz) and bias of shape (out,)."""

    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        k, b = self.kernel.shape, self.bias.shape
        if len(k) != 5:
            raise ShapeError(f"kernel must have 5 axes, got shape {k}")
        if any(e % 2 == 0 for e in k[2:]):
            raise ShapeError(f"kernel spatial extents must be odd, got {k[2:]}")
        if b != (k[0],):
            raise ShapeError(f"bias shape {b} does not match {k[0]} output channels")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def tensors(self) -> tuple[Tensor, Tensor]:
        return self.kernel, self.bias


_AXES = ("batch", "channel", "x", "y", "z")


def _require_5d(t: Tensor, op: str) -> None:
    if t.ndim != 5:
        raise ShapeError(f"{op}: expected 5 axes (batch, channel, x, y, z), got shape {t.shape}")


def conv3d(input: Tensor, params: ConvParams, bias: bool = True) -> Tensor:
    """Same-padded 3D convolution (cross-correlation) with zero padding.

    The padded volume is flattened so that every kernel offset is a plain
    slice of it; each offset then costs one matrix product without copying
    shifted windows.  Outputs are computed on the padded grid and cropped.
    """
    _require_5d(input, "conv3d")
    kernel, b = params.kernel, params.bias
    B, C, X, Y, Z = input.shape
    O, Ck, kx, ky, kz = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv3d: axis 'channel' of input has {C} entries, kernel expects {Ck}")
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    PX, PY, PZ = X + 2 * rx, Y + 2 * ry, Z + 2 * rz
    M = B * PX * PY * PZ

    padded = np.zeros((C, B, PX, PY, PZ), dtype=DTYPE)
    padded[:, :, rx:rx + X, ry:ry + Y, rz:rz + Z] = input.data.transpose(1, 0, 2, 3, 4)
    flat = padded.reshape(C, M)
    offsets = [i * PY * PZ + j * PZ + k for i, j, k in product(range(kx), range(ky), range(kz))]
    span = M - offsets[-1]
    # (offset, out, in) so each offset's weight matrix is contiguous
    w = np.ascontiguousarray(kernel.data.reshape(O, C, -1).transpose(2, 0, 1))

    acc = np.zeros((O, M), dtype=DTYPE)
    head = acc[:, :span]
    if C <= IM2COL_MAX_CHANNELS:
        # with very few input channels each per-offset product degenerates to
        # an outer product; gathering all offsets into one matrix is faster
        cols = np.empty((len(offsets), C, span), dtype=DTYPE)
        for k, off in enumerate(offsets):
            cols[k] = flat[:, off:off + span]
        np.matmul(w.transpose(1, 0, 2).reshape(O, -1), cols.reshape(-1, span), out=head)
    else:
        for k, off in enumerate(offsets):
            head += w[k] @ flat[:, off:off + span]
    out_cb = acc.reshape(O, B, PX, PY, PZ)[:, :, :X, :Y, :Z]
    if bias:
        out_cb = out_cb + b.data[:, None, None, None, None]
    parents = (input, kernel, b) if bias else (input, kernel)
    out = Tensor(out_cb.transpose(1, 0, 2, 3, 4), _parents=parents)

    def backward():
        g = np.zeros((O, B, PX, PY, PZ), dtype=DTYPE)
        g[:, :, :X, :Y, :Z] = out.grad.transpose(1, 0, 2, 3, 4)
        gflat = g.reshape(O, M)[:, :span]
        if kernel.requires_grad:
            dw = np.empty_like(w)
            for k, off in enumerate(offsets):
                dw[k] = gflat @ flat[:, off:off + span].T
            kernel._accumulate(dw.transpose(1, 2, 0).reshape(kernel.shape))
        if bias and b.requires_grad:
            b._accumulate(out.grad.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(DTYPE))
        if input.requires_grad:
            dflat = np.zeros((C, M), dtype=DTYPE)
            for k, off in enumerate(offsets):
                dflat[:, off:off + span] += w[k].T @ gflat
            dx = dflat.reshape(C, B, PX, PY, PZ)[:, :, rx:rx + X, ry:ry + Y, rz:rz + Z]
            input._accumulate(dx.transpose(1, 0, 2, 3, 4))

    out._backward = backward
    return out


def _blocks(data: np.ndarray) -> np.ndarray:
    """View (B, C, X, Y, Z) as (B, C, X/2, Y/2, Z/2, 8) with each block's
    voxels in raster order (x fastest)."""
    B, C, X, Y, Z = data.shape
    v = data.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2)
    # block-local order (dz, dy, dx) -> linear index dx + 2 dy + 4 dz
    v = v.transpose(0, 1, 2, 4, 6, 7, 5, 3)
    return v.reshape(B, C, X // 2, Y // 2, Z // 2, 8)


def maxpool3d(input: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2.  Gradient goes to the first maximal voxel
    of each block in raster order."""
    _require_5d(input, "maxpool3d")
    B, C, X, Y, Z = input.shape
    for name, e in zip(_AXES[2:], (X, Y, Z)):
        if e % 2:
            raise ShapeError(f"maxpool3d: axis '{name}' has odd extent {e}")
    blocks = _blocks(input.data)
    idx = _choose(lambda: blocks.argmax(axis=-1))
    pooled = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor(pooled, _parents=(input,))

    def backward():
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], out.grad[..., None], axis=-1)
        g = gb.reshape(B, C, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 7, 3, 6, 4, 5)
        input._accumulate(g.reshape(B, C, X, Y, Z))

    out._backward = backward
    return out


def upsample3d(input: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling along every spatial axis."""
    _require_5d(input, "upsample3d")
    B, C, X, Y, Z = input.shape
    up = np.broadcast_to(input.data[:, :, :, None, :, None, :, None], (B, C, X, 2, Y, 2, Z, 2))
    out = Tensor(up.reshape(B, C, 2 * X, 2 * Y, 2 * Z), _parents=(input,))

    def backward():
        g = out.grad.reshape(B, C, X, 2, Y, 2, Z, 2).sum(axis=(3, 5, 7))
        input._accumulate(g)

    out._backward = backward
    return out


def relu(input: Tensor) -> Tensor:
    mask = _choose(lambda: input.data > 0)
    out = Tensor(np.where(mask, input.data, DTYPE(0)), _parents=(input,))

    def backward():
        input._accumulate(np.where(mask, out.grad, DTYPE(0)))

    out._backward = backward
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s."""
    _require_5d(a, "concat_channels")
    _require_5d(b, "concat_channels")
    for axis in (0, 2, 3, 4):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: axis '{_AXES[axis]}' differs ({a.shape[axis]} vs {b.shape[axis]})")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), _parents=(a, b))

    def backward():
        a._accumulate(out.grad[:, :ca])
        b._accumulate(out.grad[:, ca:])

    out._backward = backward
    return out


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    _require_5d(input, "slice_channels")
    if not 0 <= start < stop <= input.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) outside {input.shape[1]} channels")
    out = Tensor(input.data[:, start:stop], _parents=(input,))

    def backward():
        g = np.zeros(input.shape, dtype=DTYPE)
        g[:, start:stop] = out.grad
        input._accumulate(g)

    out._backward = backward
    return out


def _spatial_raster(data: np.ndarray) -> np.ndarray:
    """(B, C, X, Y, Z) -> (B, C, X*Y*Z) in raster order, x fastest."""
    B, C = data.shape[:2]
    return data.transpose(0, 1, 4, 3, 2).reshape(B, C, -1)


def global_pool(input: Tensor, mode: str = "max") -> Tensor:
    """Reduce every feature map to one value; output shape (batch, channel)."""
    _require_5d(input, "global_pool")
    B, C, X, Y, Z = input.shape
    flat = _spatial_raster(input.data)
    if mode == "max":
        idx = _choose(lambda: flat.argmax(axis=-1))
        out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], _parents=(input,))

        def backward():
            g = np.zeros(flat.shape, dtype=DTYPE)
            np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
            input._accumulate(g.reshape(B, C, Z, Y, X).transpose(0, 1, 4, 3, 2))
    elif mode == "avg":
        n = X * Y * Z
        out = Tensor(flat.mean(axis=-1, dtype=np.float64).astype(DTYPE), _parents=(input,))

        def backward():
            g = (out.grad / DTYPE(n)).astype(DTYPE)
            input._accumulate(np.broadcast_to(g[:, :, None, None, None], input.shape))
    else:
        raise ValueError(f"unknown pooling mode {mode!r}; expected 'max' or 'avg'")
    out._backward = backward
    return out


def linear(input: Tensor, params: ConvParams) -> Tensor:
    """A 1x1x1 convolution applied to pooled vectors: (B, n) -> (B, out)."""
    if input.ndim != 2:
        raise ShapeError(f"linear: expected (batch, channel), got shape {input.shape}")
    kernel, b = params.kernel, params.bias
    if kernel.shape[2:] != (1, 1, 1):
        raise ShapeError(f"linear: kernel must be 1x1x1, got {kernel.shape[2:]}")
    if input.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"linear: axis 'channel' has {input.shape[1]} entries, kernel expects {kernel.shape[1]}")
    w = kernel.data[:, :, 0, 0, 0]
    out = Tensor(head_output(input.data, w, b.data), _parents=(input, kernel, b))

    def backward():
        g = out.grad
        kernel._accumulate((g.T @ input.data).reshape(kernel.shape))
        b._accumulate(g.sum(axis=0))
        input._accumulate(g @ w)

    out._backward = backward
    return out


def head_output(pooled: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """w . G(f) + b for pooled features (B, n), weights (out, n), bias (out,)."""
    return pooled @ w.T + b


def mse_loss(pred: Tensor, target: Sequence[float] | np.ndarray) -> Tensor:
    """Mean squared error between predicted and target counts."""
    p = pred.data.reshape(-1)
    t = np.asarray(target, dtype=DTYPE).reshape(-1)
    if p.size == 0:
        raise ShapeError("mse_loss: empty prediction vector")
    if p.size != t.size:
        raise ShapeError(f"mse_loss: {p.size} predictions vs {t.size} targets")
    diff = p - t
    out = Tensor(np.mean(diff.astype(np.float64) ** 2).astype(DTYPE), _parents=(pred,))

    def backward():
        g = (2.0 * diff / p.size).astype(DTYPE) * out.grad
        pred._accumulate(g.reshape(pred.shape))

    out._backward = backward
    return out


def parameters_of(params: Iterable[ConvParams]) -> list[Tensor]:
    return [t for p in params for t in p.tensors()]
