"""Immutable float64 tensors and the binary container format.

Container layout (little endian)::

    b"MMDTENS0" | u32 rank | u64 extents[rank] | f64 payload (row-major)

Named parameter sets are written as a sequence of containers in one ``.bin``
file plus a JSON sidecar listing the names in file order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

MAGIC = b"MMDTENS0"


class TensorError(ValueError):
    pass


class Tensor:
    """Dense float64 array with shape metadata.

    The wrapped array is read-only; construction rejects NaN and Inf.
    """

    __slots__ = ("_data",)

    def __init__(self, data, shape: Iterable[int] | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise TensorError(f"data length {arr.size} does not match shape {shape}")
            arr = arr.reshape(shape)
        if any(s <= 0 for s in arr.shape):
            raise TensorError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains non-finite values")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted internal path: caller guarantees float64 + finite
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise TensorError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._wrap(self._data.reshape(shape))

    def __array__(self, dtype=None, copy=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = as_array(t)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = fh.read(8)
    if magic != MAGIC:
        raise TensorError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    n = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise TensorError("truncated payload")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape))


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_named(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write ``path`` (.bin) and its ``.json`` sidecar."""
    path = Path(path)
    names = list(tensors)
    with open(path, "wb") as fh:
        for name in names:
            write_tensor(fh, tensors[name])
    sidecar = {"tensors": [{"name": n, "shape": list(as_array(tensors[n]).shape)} for n in names]}
    if meta:
        sidecar["meta"] = meta
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_named(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    out: dict[str, Tensor] = {}
    with open(path, "rb") as fh:
        for entry in sidecar["tensors"]:
            t = read_tensor(fh)
            if list(t.shape) != entry["shape"]:
                raise TensorError(f"{entry['name']}: shape {t.shape} != sidecar {entry['shape']}")
            out[entry["name"]] = t
    return out, sidecar.get("meta", {})
