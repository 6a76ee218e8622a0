"""Dense tensors, seeded sampling and the DTEN file format.

Tensors are plain ``numpy.ndarray`` objects of rank 1 to 4 in row-major
N, C, H, W order with dtype float32 or float64. The helpers here validate
that contract and provide the few primitives the rest of the package relies
on with a fixed, documented accumulation order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError

DTYPES = (np.float32, np.float64)
DTEN_MAGIC = b"DTEN"
DTEN_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 4:
        raise ShapeError(f"rank must be between 1 and 4, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"extents must be positive, got {list(dims)}")
    return dims


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Copy ``x`` into a fresh contiguous tensor, validating rank and extents."""
    arr = np.array(x, dtype=_check_dtype(dtype), order="C", copy=True)
    _check_dims(arr.shape)
    return arr


def tensor_new(dims: Sequence[int], fill: float = 0.0, dtype=np.float64) -> np.ndarray:
    return np.full(_check_dims(dims), fill, dtype=_check_dtype(dtype))


_EWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def ewise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise ``op`` on equal shapes, or ``b`` per-channel ``[1, C, 1, 1]``."""
    try:
        fn = _EWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if a.shape != b.shape:
        per_channel = (
            a.ndim == 4 and b.shape == (1, a.shape[1], 1, 1)
        )
        if not per_channel:
            raise ShapeError(f"cannot combine {a.shape} with {b.shape}")
    return fn(a, b).astype(a.dtype, copy=False)


def reduce(op: str, x: np.ndarray, axes=None) -> np.ndarray:
    """Sum or mean over ``axes``; reduced extents collapse to 1.

    Summation is carried out in float64 strictly left to right over the
    row-major order of the reduced elements, so results do not depend on
    blocking or thread count. The result has the dtype of ``x``.
    """
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(axes)))
    if any(a < 0 or a >= x.ndim for a in axes):
        raise ShapeError(f"invalid axes {axes} for rank {x.ndim}")
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.astype(np.float64), keep + list(axes))
    count = int(np.prod([x.shape[a] for a in axes]))
    flat = moved.reshape(tuple(x.shape[a] for a in keep) + (count,))
    total = np.cumsum(flat, axis=-1)[..., -1]
    if op == "mean":
        total = total / count
    out_shape = tuple(1 if a in axes else x.shape[a] for a in range(x.ndim))
    return total.reshape(out_shape).astype(x.dtype)


@dataclass
class Rng:
    """Seeded generator: numpy PCG64 bit stream, ziggurat normals.

    The same seed yields the same stream on every platform numpy supports.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def spawn(self, key: int) -> "Rng":
        """Independent child generator identified by ``key``."""
        seq = np.random.SeedSequence([self.seed, key])
        return Rng(int(seq.generate_state(1, np.uint64)[0]))


def rand_normal(rng: Rng, dims, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be nonnegative")
    dims = _check_dims(dims)
    samples = rng.gen.standard_normal(dims)
    return (mean + std * samples).astype(_check_dtype(dtype))


def to_bytes(t: np.ndarray) -> bytes:
    dtype = _check_dtype(t.dtype)
    dims = _check_dims(t.shape)
    header = DTEN_MAGIC + struct.pack("<BBB", DTEN_VERSION, _DTYPE_CODES[dtype], len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    payload = np.ascontiguousarray(t, dtype=dtype.newbyteorder("<")).tobytes()
    return header + payload


def from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one DTEN record starting at ``offset``; return it and the end offset."""
    view = memoryview(buf)
    if len(view) < offset + 7 or bytes(view[offset:offset + 4]) != DTEN_MAGIC:
        raise FormatError("missing DTEN magic")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != DTEN_VERSION:
        raise FormatError(f"unsupported DTEN version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown DTEN dtype code {code}")
    if not 1 <= rank <= 4:
        raise FormatError(f"invalid DTEN rank {rank}")
    pos = offset + 7
    if len(view) < pos + 4 * rank:
        raise FormatError("truncated DTEN header")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid DTEN extents {dims}")
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(view) < pos + nbytes:
        raise FormatError("truncated DTEN payload")
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=pos)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="))
    return arr, pos + nbytes


def save(path, t: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        arr, end = from_bytes(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after DTEN payload")
    return arr
