"""Dense tensors with tape-based reverse-mode differentiation.

Data lives in row-major numpy arrays: float32 for training, float64 for the
verification suites (finite differences are unreliable in single precision).
Operations executed while a Tape is active append a record with a closure that
maps the output gradient to input gradients; `backward` replays the records in
reverse and accumulates into the grad buffer of every `requires_grad` leaf.

Also home to the on-disk tensor format shared by all modules:
magic "MMFA", version u8, dtype u8 (0=f32, 1=f64), ndim u8, ndim little-endian
u32 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BatchSizeError,
    ContractError,
    DimensionError,
    LabelError,
    ParameterError,
)

_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _DTYPES:
        raise ParameterError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dt


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the construction dtype (tests run under float64)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """N-dimensional float array; immutable by convention outside optimizer updates."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Arithmetic sugar over the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param:
    """Trainable weight: value tensor plus a persistent gradient accumulator.

    `decay` marks whether the optimizer applies weight decay; the convention is
    decay=True exactly for conv/linear weight matrices.
    """

    __slots__ = ("name", "value", "decay")

    def __init__(self, value, name: str = "param", decay: bool = True, dtype=None):
        v = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        v.requires_grad = True
        if v.grad is None:
            v.grad = np.zeros_like(v.data)
        self.value = v
        self.name = name
        self.decay = decay

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def requires_grad(self) -> bool:
        return self.value.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.shape}, decay={self.decay})"


class Tape:
    """Ordered record of primitive applications; consumed by `backward`."""

    def __init__(self):
        self.records: list[tuple[str, Tensor, Callable]] = []

    def record(self, op: str, out: Tensor, backward_fn: Callable) -> None:
        self.records.append((op, out, backward_fn))

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(op: str, out: Tensor, backward_fn: Callable) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(op, out, backward_fn)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf; consumes the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for _op, out, backward_fn in reversed(tape.records):
        entry = grads.pop(id(out), None)
        if entry is None:
            continue
        for t, g in backward_fn(entry[1]):
            if g is None:
                continue
            cur = grads.get(id(t))
            grads[id(t)] = (t, g) if cur is None else (t, cur[1] + g)
    for t, g in grads.values():
        if t.requires_grad:
            t.grad += g
    tape.records.clear()


def _lift(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    bd = _lift(b)
    out = Tensor._wrap(a.data + bd)
    if isinstance(b, Tensor):
        def bw(g):
            return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, bd.shape))]
    else:
        def bw(g):
            return [(a, _unbroadcast(g, a.data.shape))]
    _record("add", out, bw)
    return out


def sub(a: Tensor, b) -> Tensor:
    bd = _lift(b)
    out = Tensor._wrap(a.data - bd)
    if isinstance(b, Tensor):
        def bw(g):
            return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, bd.shape))]
    else:
        def bw(g):
            return [(a, _unbroadcast(g, a.data.shape))]
    _record("sub", out, bw)
    return out


def mul(a: Tensor, b) -> Tensor:
    bd = _lift(b)
    out = Tensor._wrap(a.data * bd)
    if isinstance(b, Tensor):
        def bw(g):
            return [
                (a, _unbroadcast(g * bd, a.data.shape)),
                (b, _unbroadcast(g * a.data, bd.shape)),
            ]
    else:
        def bw(g):
            return [(a, _unbroadcast(g * bd, a.data.shape))]
    _record("mul", out, bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._wrap(a.data * s)
    _record("scale", out, lambda g: [(a, g * s)])
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.exp(a.data))
    _record("exp", out, lambda g: [(a, g * out.data)])
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))
    _record("log", out, lambda g: [(a, g / a.data)])
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))
    _record("transpose", out, lambda g: [(a, np.ascontiguousarray(g.T))])
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor._wrap(a.data.reshape(shape))
    _record("reshape", out, lambda g: [(a, g.reshape(a.data.shape))])
    return out


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)))

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.data.shape).copy())]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(ge, a.data.shape).copy())]

    _record("sum", out, bw)
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor._wrap(np.asarray(a.data.mean()))
    _record("mean", out, lambda g: [(a, np.broadcast_to(g / n, a.data.shape).copy())])
    return out


# ---------------------------------------------------------------------------
# Network primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def bw(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    _record("matmul", out, bw)
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)
    if not (0.0 < slope < 1.0):
        raise ParameterError(f"leaky_relu slope must lie in (0,1), got {slope}")
    pos = a.data > 0
    out = Tensor._wrap(np.where(pos, a.data, slope * a.data))
    _record("leaky_relu", out, lambda g: [(a, np.where(pos, g, slope * g))])
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, mode: str) -> Tensor:
    """Inverted dropout: train-time scaling so eval is the identity.

    rate=0 and eval mode return the input untouched and consume no RNG.
    """
    rate = float(rate)
    if not (0.0 <= rate < 1.0):
        raise ParameterError(f"dropout rate must lie in [0,1), got {rate}")
    _check_mode(mode)
    if mode == "eval" or rate == 0.0:
        out = Tensor._wrap(a.data)
        _record("dropout", out, lambda g: [(a, g)])
        return out
    if rng is None:
        raise ParameterError("train-mode dropout with rate > 0 needs an rng")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    factor = keep / (1.0 - rate)
    out = Tensor._wrap(a.data * factor)
    _record("dropout", out, lambda g: [(a, g * factor)])
    return out


def global_max_pool(fmaps: Tensor) -> Tensor:
    pooled, _ = global_max_pool_argmax(fmaps)
    return pooled


def global_max_pool_argmax(fmaps: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-channel spatial max and its (row, col) position.

    Accepts [C,H,W] (single image) or [N,C,H,W]; positions have shape [...,C,2].
    Ties resolve to the first flat index, so results are deterministic.
    """
    single = fmaps.ndim == 3
    if fmaps.ndim not in (3, 4):
        raise DimensionError(f"global_max_pool expects 3- or 4-d input, got {fmaps.shape}")
    x = fmaps.data[None] if single else fmaps.data
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_max_pool needs a nonempty spatial extent")
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    vals = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    pos = np.stack(np.unravel_index(idx, (h, w)), axis=-1)
    out = Tensor._wrap(vals[0] if single else vals)
    if single:
        pos = pos[0]

    def bw(g):
        gb = g[None] if single else g
        dflat = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(dflat, idx[..., None], gb[..., None], axis=2)
        dx = dflat.reshape(n, c, h, w)
        return [(fmaps, dx[0] if single else dx)]

    _record("global_max_pool", out, bw)
    return out, pos


class BNState:
    """Per-feature affine parameters plus running statistics for batch norm."""

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=None, name: str = "bn"):
        dt = np.dtype(dtype).type if dtype is not None else get_default_dtype()
        self.gamma = Param(np.ones(dim, dtype=dt), name=f"{name}.gamma", decay=False)
        self.beta = Param(np.zeros(dim, dtype=dt), name=f"{name}.beta", decay=False)
        self.running_mean = np.zeros(dim, dtype=dt)
        self.running_var = np.ones(dim, dtype=dt)
        self.eps = float(eps)
        self.momentum = float(momentum)

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")


def batch_norm(x: Tensor, state: BNState, mode: str, update_running: bool = True) -> Tensor:
    """Normalize per feature (biased batch variance in train mode), then γ·x̂+β."""
    _check_mode(mode)
    if x.ndim != 2 or x.shape[1] != state.dim:
        raise DimensionError(f"batch_norm expects [B,{state.dim}], got {x.shape}")
    gamma, beta = state.gamma.value, state.beta.value
    if mode == "train":
        b = x.shape[0]
        if b < 2:
            raise BatchSizeError(f"train-mode batch_norm needs B >= 2, got {b}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * invstd
        if update_running:
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * var

        def bw(g):
            dxhat = g * gamma.data
            dx = (invstd / b) * (
                b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return [
                (x, dx),
                (gamma, (g * xhat).sum(axis=0)),
                (beta, g.sum(axis=0)),
            ]
    else:
        invstd = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * invstd

        def bw(g):
            return [
                (x, g * gamma.data * invstd),
                (gamma, (g * xhat).sum(axis=0)),
                (beta, g.sum(axis=0)),
            ]

    out = Tensor._wrap(gamma.data * xhat + beta.data)
    _record("batch_norm", out, bw)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 1) -> Tensor:
    """2-d cross-correlation, NCHW layout, square kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/kernel, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d output extent {oh}x{ow} is empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, cin, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    out_data = np.einsum("ocij,ncijhw->nohw", w.data, cols, optimize=True)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    out = Tensor._wrap(np.ascontiguousarray(out_data))

    def bw(g):
        dw = np.einsum("nohw,ncijhw->ocij", g, cols, optimize=True)
        dcols = np.einsum("ocij,nohw->ncijhw", w.data, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        grads = [(x, np.ascontiguousarray(dx)), (w, dw)]
        if b is not None:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    _record("conv2d", out, bw)
    return out


def pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between rows of x [n,d] and y [m,d].

    Uses the norm expansion; cancellation noise below zero is clamped (the true
    gradient at coincident points is zero, so the analytic backward stays exact).
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"pairwise_sqdist dims disagree: {x.shape} vs {y.shape}")
    xx = (x.data * x.data).sum(axis=1)
    yy = (y.data * y.data).sum(axis=1)
    d2 = xx[:, None] + yy[None, :] - 2.0 * (x.data @ y.data.T)
    np.maximum(d2, 0.0, out=d2)
    out = Tensor._wrap(d2)

    def bw(g):
        dx = 2.0 * (g.sum(axis=1)[:, None] * x.data - g @ y.data)
        dy = 2.0 * (g.sum(axis=0)[:, None] * y.data - g.T @ x.data)
        return [(x, dx), (y, dy)]

    _record("pairwise_sqdist", out, bw)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample -log softmax(logits)[label], via log-sum-exp. Returns shape [n]."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [n,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"label outside [0,{k}) in {labels}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = (m + np.log(sez))[:, 0]
    rows = np.arange(n)
    out = Tensor._wrap(lse - z[rows, labels])

    def bw(g):
        dz = ez / sez
        dz[rows, labels] -= 1.0
        return [(logits, g[:, None] * dz)]

    _record("softmax_cross_entropy", out, bw)
    return out


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Elementwise stable binary cross entropy from logits: max(z,0)-z·a+log1p(e^-|z|)."""
    z = logits.data
    a = np.broadcast_to(np.asarray(targets, dtype=z.dtype), z.shape)
    out = Tensor._wrap(np.maximum(z, 0.0) - z * a + np.log1p(np.exp(-np.abs(z))))

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return [(logits, g * (sig - a))]

    _record("sigmoid_cross_entropy", out, bw)
    return out


# ---------------------------------------------------------------------------
# Tensor file format
# ---------------------------------------------------------------------------

_MAGIC = b"MMFA"
_FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor_file(path, array) -> None:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise ParameterError(f"tensor files hold f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255 or any(d > 0xFFFFFFFF for d in arr.shape):
        raise DimensionError(f"shape {arr.shape} not representable in the tensor format")
    header = _MAGIC + struct.pack(
        "<BBB", _FORMAT_VERSION, _DTYPE_CODES[arr.dtype], arr.ndim
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 7 or raw[:4] != _MAGIC:
        raise ParameterError(f"{path}: not a tensor file (bad magic)")
    version, dtype_code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != _FORMAT_VERSION:
        raise ParameterError(f"{path}: unsupported tensor format version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise ParameterError(f"{path}: unknown dtype code {dtype_code}")
    off = 7 + 4 * ndim
    if len(raw) < off:
        raise ParameterError(f"{path}: truncated header")
    shape = struct.unpack(f"<{ndim}I", raw[7:off])
    dt = _CODE_DTYPES[dtype_code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) - off != expected:
        raise ParameterError(
            f"{path}: payload is {len(raw) - off} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype=dt, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))  # fresh writable native-order copy
