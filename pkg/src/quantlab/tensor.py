"""Activation tensors and the ``QLT1`` binary dump format.

A dump is a 21-byte header followed by a raw little-endian payload::

    offset  size  field
    0       4     magic  b"QLT1"
    4       1     dtype  0 = float32, 1 = float64
    5       8     rows   uint64 LE
    13      8     cols   uint64 LE
    21      ...   rows * cols values, row-major

Framework export scripts flatten ``(batch, seq, hidden)`` activations to
``(batch * seq, hidden)`` before writing.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import IoFailure, MalformedHeader, NonFiniteValue, ShapeMismatch

MAGIC = b"QLT1"
HEADER = struct.Struct("<4sBQQ")
HEADER_SIZE = HEADER.size

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, "os.PathLike[str]"]


class ActivationTensor:
    """Immutable 2-D matrix of finite activations (rows = tokens, cols = channels).

    The backing array is copied on construction and marked read-only.
    float32 and float64 payloads keep their precision; any other numeric
    input is promoted to float64.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, copy=True)
        if arr.dtype not in _DTYPE_TO_CODE:
            arr = arr.astype(np.float64)
        if arr.ndim != 2:
            raise ValueError(f"activation tensor must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"activation tensor needs rows >= 1 and cols >= 1, got {arr.shape}")
        finite = np.isfinite(arr)
        if not finite.all():
            r, c = np.argwhere(~finite)[0]
            raise NonFiniteValue((int(r), int(c)), float(arr[r, c]))
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _trusted(cls, arr: np.ndarray) -> "ActivationTensor":
        # Skips the copy and finiteness scan for arrays produced internally
        # from already-validated tensors.
        obj = cls.__new__(cls)
        arr.setflags(write=False)
        obj._data = arr
        return obj

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, ActivationTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and np.array_equal(self._data, other._data)
        )

    __hash__ = None

    def __repr__(self):
        return f"ActivationTensor(rows={self.rows}, cols={self.cols}, dtype={self.dtype.name})"

    def bit_equal(self, other: "ActivationTensor") -> bool:
        """True when both tensors have identical shape, dtype and bytes."""
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self._data.tobytes() == other._data.tobytes()
        )

    def with_columns(self, columns) -> "ActivationTensor":
        """New tensor holding the selected columns, in the given order."""
        return ActivationTensor._trusted(np.ascontiguousarray(self._data[:, columns]))

    def head(self, rows: int) -> "ActivationTensor":
        """New tensor with the first ``rows`` rows (all rows if fewer exist)."""
        return ActivationTensor._trusted(self._data[: max(1, rows)].copy())


def save_dump(t: ActivationTensor, path: PathLike) -> None:
    """Write ``t`` as a QLT1 dump, keeping its float32/float64 precision."""
    code = _DTYPE_TO_CODE[t.dtype]
    payload = np.ascontiguousarray(t.data, dtype=_CODE_TO_DTYPE[code]).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, code, t.rows, t.cols))
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write dump {os.fspath(path)!r}: {exc}") from exc


def load_dump(path: PathLike, narrow: bool = False) -> ActivationTensor:
    """Read a QLT1 dump.

    float64 payloads stay float64 unless ``narrow`` is set, in which case
    they are converted to float32 (values overflowing float32 then fail the
    finiteness check).
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read dump {os.fspath(path)!r}: {exc}") from exc

    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{os.fspath(path)!r}: {len(raw)} bytes, header needs {HEADER_SIZE}")
    magic, code, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedHeader(f"{os.fspath(path)!r}: bad magic {magic!r}")
    if code not in _CODE_TO_DTYPE:
        raise MalformedHeader(f"{os.fspath(path)!r}: unknown dtype code {code}")
    if rows < 1 or cols < 1:
        raise MalformedHeader(f"{os.fspath(path)!r}: empty shape ({rows}, {cols})")

    dtype = _CODE_TO_DTYPE[code]
    expected = rows * cols * dtype.itemsize
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise ShapeMismatch(
            f"{os.fspath(path)!r}: shape ({rows}, {cols}) needs {expected} payload bytes, found {actual}"
        )

    arr = np.frombuffer(raw, dtype=dtype, offset=HEADER_SIZE).reshape(rows, cols)
    arr = arr.astype(dtype.newbyteorder("="))
    if narrow and arr.dtype == np.float64:
        with np.errstate(over="ignore"):
            arr = arr.astype(np.float32)
    return ActivationTensor(arr)
