"""Dense float tensors with a recorded backward pass.

Layout is channels-first throughout: ``[C, H, W]`` for a single feature-map
stack, ``[N, C, H, W]`` for a batch. Buffers are contiguous row-major numpy
arrays, float32 by default and float64 when a computation needs to survive
finite-difference checking.

A ``Tensor`` doubles as a node in the implicitly recorded computation graph:
every op that produces a tensor may attach the parent tensors and a closure
that scatters the output gradient back onto them. ``rrseg.autodiff.backward``
walks that graph.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got shape {shape}")
    return shape


class Tensor:
    """N-d float array that optionally remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        _check_shape(self.data.shape)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # arithmetic sugar; the real ops live below so they can record gradients
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording parents only when a gradient can flow."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# construction

def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype))


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def he_normal_init(shape, fan_in: int, seed, dtype=np.float32) -> Tensor:
    """Normal init with std sqrt(2/fan_in); deterministic for a given seed."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(_check_shape(shape)).astype(dtype) * dtype(std) if False
                  else (rng.standard_normal(_check_shape(shape)) * std).astype(dtype))


@dataclass(frozen=True)
class Shape2d:
    """Channel/height/width triple for a single feature-map stack."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError(f"extents must be positive: {self}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


# ---------------------------------------------------------------------------
# index algebra for [C, H, W] buffers

def flatten_index(shape, idx) -> int:
    """Row-major buffer offset of element ``idx``."""
    flat = 0
    for extent, i in zip(shape, idx):
        if not 0 <= i < extent:
            raise IndexError(f"index {idx} out of bounds for shape {tuple(shape)}")
        flat = flat * extent + i
    return flat


def unflatten_index(shape, flat: int) -> tuple[int, ...]:
    idx = []
    for extent in reversed(shape):
        idx.append(flat % extent)
        flat //= extent
    return tuple(reversed(idx))


# ---------------------------------------------------------------------------
# elementwise ops

def _broadcast_ok(a_shape, b_shape) -> bool:
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        return False
    # result must coincide with one operand; no "outer" broadcasts
    return out == tuple(a_shape) or out == tuple(b_shape)


def reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"shapes {a.shape} and {b.shape} do not line up for add")
    out = a.data + b.data

    def backward(g):
        accumulate_grad(a, reduce_to_shape(g, a.shape))
        accumulate_grad(b, reduce_to_shape(g, b.shape))

    return make_result(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"shapes {a.shape} and {b.shape} do not line up for mul")
    out = a.data * b.data

    def backward(g):
        accumulate_grad(a, reduce_to_shape(g * b.data, a.shape))
        accumulate_grad(b, reduce_to_shape(g * a.data, b.shape))

    return make_result(out, (a, b), backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape).astype(x.dtype, copy=False) * np.ones((), dtype=x.dtype))

    return make_result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def backward(g):
        accumulate_grad(x, g.reshape(x.shape))

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# spatial cropping

def crop_offsets(src: int, dst: int) -> int:
    """Top/left offset of a centered ``dst`` window in ``src`` (floor rule)."""
    if dst > src:
        raise ValueError(f"crop target {dst} exceeds source extent {src}")
    return (src - dst) // 2


def center_crop(x, target):
    """Center-crop the trailing two axes to ``target = (h, w)``.

    Odd differences drop the extra row/column on the bottom/right. Works on
    plain numpy arrays (e.g. label maps) and on ``Tensor``s, where the crop is
    recorded and the gradient is zero-padded back to the source extent.
    """
    th, tw = int(target[0]), int(target[1])
    arr = x.data if isinstance(x, Tensor) else x
    h, w = arr.shape[-2], arr.shape[-1]
    oy, ox = crop_offsets(h, th), crop_offsets(w, tw)
    window = (Ellipsis, slice(oy, oy + th), slice(ox, ox + tw))
    if not isinstance(x, Tensor):
        return arr[window]
    out = arr[window]

    def backward(g):
        gx = np.zeros_like(arr)
        gx[window] = g
        accumulate_grad(x, gx)

    return make_result(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# binary tensor file format
#
# magic "RRSE" | version u8 (=1) | dtype u8 (0=f32, 1=u8) | ndim u8
# | ndim x extent u32 LE | raw row-major little-endian payload

_MAGIC = b"RRSE"
_FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_KIND = {("f", 4): 0, ("u", 1): 1}


def save_tensor(path, array) -> None:
    """Write an f32 or u8 array in the RRSE container; round-trips bit-exact."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise ValueError(f"tensor file format stores f32 or u8, not {arr.dtype}")
    code = _CODE_FOR_KIND[key]
    arr = np.ascontiguousarray(arr.astype(_DTYPE_CODES[code], copy=False))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBB", _FORMAT_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic {blob[:4]!r})")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", blob[7 : 7 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    payload = blob[7 + 4 * ndim :]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return np.ascontiguousarray(arr)
