"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array plus an
optional gradient buffer, and a Tape records every differentiable op in
execution order.  backward() replays the records in reverse, so the
graph never needs explicit topological sorting.  When no tape is active
the ops run plain numpy with zero bookkeeping, which is the inference
fast path.

Binary elementwise ops require exactly matching shapes.  Anything that
looks like broadcasting is expressed through explicit primitives
(add_bias, tile_new_axis, ...) so every gradient rule stays local and
obvious.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64

_TAPE_STACK = threading.local()


def _stack() -> list:
    if not hasattr(_TAPE_STACK, "stack"):
        _TAPE_STACK.stack = []
    return _TAPE_STACK.stack


def active_tape():
    """Innermost active Tape on this thread, or None."""
    s = _stack()
    return s[-1] if s else None


class Rng:
    """Seeded random stream (PCG64) with deterministic child spawning."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "Rng":
        child = np.random.SeedSequence([self.seed & 0xFFFFFFFF, int(key)])
        return Rng(int(child.generate_state(1, dtype=np.uint64)[0]))

    def normal(self, shape, scale=1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape).astype(DEFAULT_DTYPE)

    def uniform(self, low, high, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(DEFAULT_DTYPE)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.float64)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)


class Tensor:
    """A dense array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; everything delegates to module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DEFAULT_DTYPE), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Execution-ordered record of one differentiable forward pass.

    Use as a context manager.  Ops executed while the tape is active and
    touching at least one grad-requiring tensor append (output, pullback)
    pairs.  backward() walks them last to first and clears the tape.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        if popped is not self:
            raise UsageError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, pullback):
        self._records.append((out, pullback))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into .grad of every reachable tensor.

        The loss must be a single-element tensor produced under this tape.
        The tape is cleared afterwards, so each forward pass supports one
        backward pass.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._records:
            raise UsageError("backward on an empty tape (forward pass not recorded?)")
        loss.grad = np.ones_like(loss.data)
        for out, pullback in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            pullback(g)
        self._records.clear()


def backward(tape: Tape, loss: Tensor):
    """Functional alias for tape.backward(loss)."""
    tape.backward(loss)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=DEFAULT_DTYPE)
    else:
        t.grad = t.grad + g


def _make_out(data, inputs) -> tuple[Tensor, Tape | None]:
    """Create the op output; returns (out, tape) with tape None when not recording."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    return out, (tape if track else None)


def _need_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise UsageError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_tensor(a, "a")
    _need_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out, tape = _make_out(a.data @ b.data, (a, b))
    if tape is not None:
        def pullback(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        tape.record(out, pullback)
    return out


def _binary_same_shape(a: Tensor, b: Tensor, opname: str):
    _need_tensor(a, "a")
    _need_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"{opname} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "add")
    out, tape = _make_out(a.data + b.data, (a, b))
    if tape is not None:
        def pullback(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)
        tape.record(out, pullback)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "hadamard")
    out, tape = _make_out(a.data * b.data, (a, b))
    if tape is not None:
        def pullback(g, a=a, b=b):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        tape.record(out, pullback)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    _need_tensor(a, "a")
    c = float(c)
    out, tape = _make_out(a.data * c, (a,))
    if tape is not None:
        def pullback(g, a=a, c=c):
            _accum(a, g * c)
        tape.record(out, pullback)
    return out


def sigmoid(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    x = a.data
    # Piecewise form avoids overflow in exp for large |x|.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out, tape = _make_out(y, (a,))
    if tape is not None:
        def pullback(g, a=a, y=y):
            _accum(a, g * y * (1.0 - y))
        tape.record(out, pullback)
    return out


def tanh(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    y = np.tanh(a.data)
    out, tape = _make_out(y, (a,))
    if tape is not None:
        def pullback(g, a=a, y=y):
            _accum(a, g * (1.0 - y * y))
        tape.record(out, pullback)
    return out


def relu(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    out, tape = _make_out(np.maximum(a.data, 0.0), (a,))
    if tape is not None:
        mask = a.data > 0
        def pullback(g, a=a, mask=mask):
            _accum(a, g * mask)
        tape.record(out, pullback)
    return out


def exp(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    y = np.exp(a.data)
    out, tape = _make_out(y, (a,))
    if tape is not None:
        def pullback(g, a=a, y=y):
            _accum(a, g * y)
        tape.record(out, pullback)
    return out


def log(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    if np.any(a.data <= 0):
        raise UsageError("log needs strictly positive inputs")
    out, tape = _make_out(np.log(a.data), (a,))
    if tape is not None:
        def pullback(g, a=a):
            _accum(a, g / a.data)
        tape.record(out, pullback)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D bias row to every row of a (..., D) tensor."""
    _need_tensor(x, "x")
    _need_tensor(b, "b")
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias needs x (..., D) and b (D,), got {x.shape} and {b.shape}")
    out, tape = _make_out(x.data + b.data, (x, b))
    if tape is not None:
        axes = tuple(range(x.ndim - 1))
        def pullback(g, x=x, b=b, axes=axes):
            _accum(x, g)
            _accum(b, g.sum(axis=axes) if axes else g)
        tape.record(out, pullback)
    return out


def sum_all(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    out, tape = _make_out(np.asarray(a.data.sum()), (a,))
    if tape is not None:
        def pullback(g, a=a):
            _accum(a, np.broadcast_to(g, a.shape).astype(DEFAULT_DTYPE))
        tape.record(out, pullback)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    _need_tensor(a, "a")
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    out, tape = _make_out(data, (a,))
    if tape is not None:
        def pullback(g, a=a):
            _accum(a, g.reshape(a.shape))
        tape.record(out, pullback)
    return out


def transpose2d(a: Tensor) -> Tensor:
    _need_tensor(a, "a")
    if a.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-D tensor, got {a.shape}")
    out, tape = _make_out(a.data.T.copy(), (a,))
    if tape is not None:
        def pullback(g, a=a):
            _accum(a, g.T)
        tape.record(out, pullback)
    return out


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat needs at least one tensor")
    for p in parts:
        _need_tensor(p, "parts[*]")
    ref = parts[0].ndim
    if any(p.ndim != ref for p in parts):
        raise ShapeError("concat operands must share rank")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    out, tape = _make_out(out_data, tuple(parts))
    if tape is not None:
        sizes = [p.shape[axis] for p in parts]
        def pullback(g, parts=parts, sizes=sizes, axis=axis):
            start = 0
            for p, s in zip(parts, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + s)
                _accum(p, g[tuple(idx)])
                start += s
        tape.record(out, pullback)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    _need_tensor(a, "a")
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of bounds for axis "
                         f"{axis} of shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out, tape = _make_out(a.data[tuple(idx)].copy(), (a,))
    if tape is not None:
        def pullback(g, a=a, idx=tuple(idx)):
            buf = np.zeros(a.shape, dtype=DEFAULT_DTYPE)
            buf[idx] = g
            _accum(a, buf)
        tape.record(out, pullback)
    return out


def tile_new_axis(a: Tensor, axis: int, copies: int) -> Tensor:
    """Insert a new axis of the given length filled with copies of `a`."""
    _need_tensor(a, "a")
    if copies < 1:
        raise ShapeError(f"tile_new_axis needs copies >= 1, got {copies}")
    if not (0 <= axis <= a.ndim):
        raise ShapeError(f"tile_new_axis axis {axis} out of range for shape {a.shape}")
    data = np.repeat(np.expand_dims(a.data, axis), copies, axis=axis)
    out, tape = _make_out(data, (a,))
    if tape is not None:
        def pullback(g, a=a, axis=axis):
            _accum(a, g.sum(axis=axis))
        tape.record(out, pullback)
    return out


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    _need_tensor(a, "a")
    if before < 0 or after < 0:
        raise ShapeError("pad_axis amounts must be nonnegative")
    if not (0 <= axis < a.ndim):
        raise ShapeError(f"pad_axis axis {axis} out of range for shape {a.shape}")
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out, tape = _make_out(np.pad(a.data, widths), (a,))
    if tape is not None:
        def pullback(g, a=a, axis=axis, before=before):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(before, before + a.shape[axis])
            _accum(a, g[tuple(idx)])
        tape.record(out, pullback)
    return out


def stack(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("stack needs at least one tensor")
    shape0 = parts[0].shape
    for p in parts:
        _need_tensor(p, "parts[*]")
        if p.shape != shape0:
            raise ShapeError("stack operands must share shape")
    out, tape = _make_out(np.stack([p.data for p in parts], axis=axis), tuple(parts))
    if tape is not None:
        def pullback(g, parts=parts, axis=axis):
            for i, p in enumerate(parts):
                _accum(p, np.take(g, i, axis=axis))
        tape.record(out, pullback)
    return out


def take_columns(a: Tensor, ids) -> Tensor:
    """Gather columns of a (D, K) tensor; backward scatter-adds into them."""
    _need_tensor(a, "a")
    if a.ndim != 2:
        raise ShapeError(f"take_columns needs a 2-D tensor, got {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("take_columns needs a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[1]):
        raise ShapeError(f"take_columns index out of range for {a.shape[1]} columns")
    out, tape = _make_out(a.data[:, ids], (a,))
    if tape is not None:
        def pullback(g, a=a, ids=ids):
            buf = np.zeros(a.shape, dtype=DEFAULT_DTYPE)
            np.add.at(buf.T, ids, g.T)
            _accum(a, buf)
        tape.record(out, pullback)
    return out


def take_rows(a: Tensor, ids) -> Tensor:
    """Gather rows of a (K, D) tensor; backward scatter-adds into them."""
    _need_tensor(a, "a")
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("take_rows needs a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for {a.shape[0]} rows")
    out, tape = _make_out(a.data[ids], (a,))
    if tape is not None:
        def pullback(g, a=a, ids=ids):
            buf = np.zeros(a.shape, dtype=DEFAULT_DTYPE)
            np.add.at(buf, ids, g)
            _accum(a, buf)
        tape.record(out, pullback)
    return out


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log softmax of a (B, K) tensor, numerically stable."""
    _need_tensor(a, "a")
    if a.ndim != 2:
        raise ShapeError(f"log_softmax needs a 2-D tensor, got {a.shape}")
    x = a.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    out, tape = _make_out(y, (a,))
    if tape is not None:
        def pullback(g, a=a, y=y):
            p = np.exp(y)
            _accum(a, g - p * g.sum(axis=1, keepdims=True))
        tape.record(out, pullback)
    return out


# ---------------------------------------------------------------------------
# Structured ops: convolution, pooling, batch norm, dropout
# ---------------------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride):
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent underflow: input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}")
    return ho, wo


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, H, W, C) -> read-only view (B, Ho, Wo, kh, kw, C)
    bsz, h, w, c = x.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride)
    sb, sh, sw, sc = x.strides
    shape = (bsz, ho, wo, kh, kw, c)
    strides = (sb, sh * stride, sw * stride, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides, writeable=False)


def conv2d(x: Tensor, kernels: Tensor, stride: int, bias: Tensor) -> Tensor:
    """Valid (unpadded) 2-D convolution over channels-last maps.

    x: (B, H, W, C) or (H, W, C); kernels: (kh, kw, C, C'); bias: (C',).
    Output extent per axis is floor((extent - k) / stride) + 1.
    """
    _need_tensor(x, "x")
    _need_tensor(kernels, "kernels")
    _need_tensor(bias, "bias")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d needs (B, H, W, C) or (H, W, C) input, got {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be (kh, kw, C, C'), got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {xd.shape[3]}, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    bsz, h, w, _ = xd.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride)

    cols = _windows(xd, kh, kw, stride).reshape(bsz * ho * wo, kh * kw * cin)
    kflat = kernels.data.reshape(kh * kw * cin, cout)
    y = (cols @ kflat + bias.data).reshape(bsz, ho, wo, cout)
    out, tape = _make_out(y[0] if squeeze else y, (x, kernels, bias))
    if tape is not None:
        def pullback(g, x=x, kernels=kernels, bias=bias, cols=cols, kflat=kflat,
                     geom=(bsz, h, w, cin, ho, wo, kh, kw, cout, stride, squeeze)):
            bsz, h, w, cin, ho, wo, kh, kw, cout, s, squeeze = geom
            gflat = (g[None] if squeeze else g).reshape(bsz * ho * wo, cout)
            _accum(bias, gflat.sum(axis=0))
            _accum(kernels, (cols.T @ gflat).reshape(kernels.shape))
            if x.requires_grad:
                dcols = (gflat @ kflat.T).reshape(bsz, ho, wo, kh, kw, cin)
                dx = np.zeros((bsz, h, w, cin), dtype=DEFAULT_DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        dx[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
                _accum(x, dx[0] if squeeze else dx)
        tape.record(out, pullback)
    return out


def mean_pool(x: Tensor, window: int) -> Tensor:
    """Average over the full spatial extent; window must equal that extent."""
    _need_tensor(x, "x")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"mean_pool needs (B, H, W, C) or (H, W, C) input, got {x.shape}")
    bsz, h, w, c = xd.shape
    if window != h or window != w:
        raise ShapeError(f"mean_pool window {window} must equal spatial extent {h}x{w}")
    y = xd.mean(axis=(1, 2), keepdims=True)
    out, tape = _make_out(y[0] if squeeze else y, (x,))
    if tape is not None:
        def pullback(g, x=x, geom=(bsz, h, w, c, squeeze)):
            bsz, h, w, c, squeeze = geom
            gd = g[None] if squeeze else g
            dx = np.broadcast_to(gd / (h * w), (bsz, h, w, c)).astype(DEFAULT_DTYPE)
            _accum(x, dx[0] if squeeze else dx)
        tape.record(out, pullback)
    return out


TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str):
    if mode not in (TRAIN, INFER):
        raise UsageError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


class BatchNormStats:
    """Running mean/variance maintained as an exponential moving average."""

    __slots__ = ("mean", "var")

    def __init__(self, dim: int):
        self.mean = np.zeros(dim, dtype=DEFAULT_DTYPE)
        self.var = np.ones(dim, dtype=DEFAULT_DTYPE)

    def copy(self) -> "BatchNormStats":
        s = BatchNormStats(self.mean.shape[0])
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               mode: str, decay: float = 0.99, eps: float = 1e-5,
               update_stats: bool | None = None) -> Tensor:
    """Feature-wise batch normalization over the rows of a (B, D) tensor.

    Training mode normalizes with batch statistics (biased variance) and,
    unless update_stats=False, folds them into the running averages.
    Inference mode normalizes with the running averages only and needs no
    minimum batch size.
    """
    _need_tensor(x, "x")
    _need_tensor(gamma, "gamma")
    _need_tensor(beta, "beta")
    _check_mode(mode)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm needs a (B, D) tensor, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batch_norm gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    if stats.mean.shape[0] != d:
        raise ShapeError(f"batch_norm stats dim {stats.mean.shape[0]} != feature dim {d}")
    if update_stats is None:
        update_stats = mode == TRAIN

    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ConfigError(f"batch_norm training mode needs batch size >= 2, got {x.shape[0]}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        if update_stats:
            stats.mean = decay * stats.mean + (1.0 - decay) * mu
            stats.var = decay * stats.var + (1.0 - decay) * var
        out, tape = _make_out(gamma.data * xhat + beta.data, (x, gamma, beta))
        if tape is not None:
            def pullback(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv_std=inv_std):
                _accum(beta, g.sum(axis=0))
                _accum(gamma, (g * xhat).sum(axis=0))
                if x.requires_grad:
                    dxhat = g * gamma.data
                    dx = (dxhat - dxhat.mean(axis=0)
                          - xhat * (dxhat * xhat).mean(axis=0)) * inv_std
                    _accum(x, dx)
            tape.record(out, pullback)
        return out

    inv_std = 1.0 / np.sqrt(stats.var + eps)
    xhat = (x.data - stats.mean) * inv_std
    out, tape = _make_out(gamma.data * xhat + beta.data, (x, gamma, beta))
    if tape is not None:
        def pullback(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv_std=inv_std):
            _accum(beta, g.sum(axis=0))
            _accum(gamma, (g * xhat).sum(axis=0))
            if x.requires_grad:
                _accum(x, g * gamma.data * inv_std)
        tape.record(out, pullback)
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: train scales kept units by 1/(1-rate); infer is identity."""
    _need_tensor(x, "x")
    _check_mode(mode)
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == INFER or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out, tape = _make_out(x.data * keep, (x,))
    if tape is not None:
        def pullback(g, x=x, keep=keep):
            _accum(x, g * keep)
        tape.record(out, pullback)
    return out


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f, params, eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite-difference gradient of scalar f() w.r.t. each parameter.

    f takes no arguments, must not mutate state, and must return a float
    deterministically.  Parameters are perturbed in place one coordinate
    at a time and restored exactly.
    """
    grads = []
    for p in params:
        _need_tensor(p, "params[*]")
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads
