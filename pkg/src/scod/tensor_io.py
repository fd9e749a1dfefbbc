"""On-disk tensor format (SCT1), CSV ingestion and dataset bundles.

Layout of an SCT1 file, all integers little-endian::

    offset 0   4 bytes   magic b"SCT1"
    offset 4   u8        dtype code, 0x01 = IEEE-754 binary32
    offset 5   u8        rank r, 1 <= r <= 4
    offset 6   2 bytes   zero padding
    offset 8   r x u64   dims
    then       prod(dims) x f32 payload, row-major

Nothing may follow the payload. Tensors live in memory as C-contiguous
``float32`` numpy arrays; arithmetic elsewhere in the package is float64.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SCT1"
DTYPE_F32 = 0x01
MAX_RANK = 4
HEADER_SIZE = 8
# refuse to allocate more than this many elements from a header
MAX_ELEMENTS = 1 << 40


class TensorFormatError(DataError):
    """Malformed SCT1 content; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class BadMagic(TensorFormatError):
    pass


class BadHeader(TensorFormatError):
    pass


class DimOverflow(TensorFormatError):
    pass


class Truncated(TensorFormatError):
    pass


class TrailingBytes(TensorFormatError):
    pass


class NonFinite(TensorFormatError):
    pass


class RaggedRow(DataError):
    def __init__(self, row: int):
        super().__init__(f"ragged row {row}")
        self.row = row


class BadCell(DataError):
    def __init__(self, row: int, col: int):
        super().__init__(f"non-numeric cell ({row}, {col})")
        self.row = row
        self.col = col


def as_tensor(values) -> np.ndarray:
    """Coerce ``values`` to a valid in-memory TensorF32 or raise DataError."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise DataError(f"tensor rank must be in [1, {MAX_RANK}], got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise DataError(f"every dim must be >= 1, got {list(arr.shape)}")
    return arr


def encode_tensor(t) -> bytes:
    arr = as_tensor(t)
    header = MAGIC + struct.pack("<BBxx", DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes, allow_nonfinite: bool = False) -> np.ndarray:
    """Parse SCT1 bytes. Never reads past the declared payload."""
    n = len(buf)
    if n < HEADER_SIZE:
        if buf[: min(n, 4)] != MAGIC[: min(n, 4)]:
            raise BadMagic("bad magic", 0)
        raise Truncated(f"header needs {HEADER_SIZE} bytes, file has {n}", n)
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}", 0)
    dtype, rank, pad = buf[4], buf[5], buf[6:8]
    if dtype != DTYPE_F32:
        raise BadHeader(f"unsupported dtype code {dtype:#04x}", 4)
    if not 1 <= rank <= MAX_RANK:
        raise BadHeader(f"rank {rank} outside [1, {MAX_RANK}]", 5)
    if pad != b"\x00\x00":
        raise BadHeader("non-zero padding", 6)

    dims_end = HEADER_SIZE + 8 * rank
    if n < dims_end:
        raise Truncated(f"dims need {dims_end} bytes, file has {n}", n)
    dims = struct.unpack_from(f"<{rank}Q", buf, HEADER_SIZE)
    count = 1
    for i, d in enumerate(dims):
        if d < 1:
            raise BadHeader(f"dim {i} is zero", HEADER_SIZE + 8 * i)
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflow(f"element count exceeds {MAX_ELEMENTS}", HEADER_SIZE + 8 * i)

    payload_end = dims_end + 4 * count
    if n < payload_end:
        raise Truncated(
            f"declared {count} floats, found {(n - dims_end) // 4}", n
        )
    if n > payload_end:
        raise TrailingBytes(f"{n - payload_end} bytes after payload", payload_end)

    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end)
    arr = arr.astype(np.float32).reshape(dims)
    if not allow_nonfinite:
        bad = np.flatnonzero(~np.isfinite(arr.ravel()))
        if bad.size:
            raise NonFinite("non-finite value", dims_end + 4 * int(bad[0]))
    return arr


def load_tensor(path, allow_nonfinite: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_tensor(buf, allow_nonfinite=allow_nonfinite)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(t, path) -> None:
    atomic_write_bytes(path, encode_tensor(t))


def load_csv_matrix(path, expected_cols: int | None = None) -> np.ndarray:
    """Read a numeric CSV into a rank-2 tensor. Blank lines are skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        text = fh.read()
    return parse_csv_matrix(text, expected_cols)


def parse_csv_matrix(text: str, expected_cols: int | None = None) -> np.ndarray:
    rows = []
    width = expected_cols
    for i, row in enumerate(r for r in csv.reader(io.StringIO(text)) if r):
        if width is None:
            width = len(row)
        if len(row) != width:
            raise RaggedRow(i)
        vals = []
        for j, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise BadCell(i, j) from None
        rows.append(vals)
    if not rows:
        raise DataError("empty CSV")
    return as_tensor(np.array(rows, dtype=np.float64))


def load_matrix(path, allow_nonfinite: bool = False) -> np.ndarray:
    """Dispatch on extension: ``.csv`` goes through the CSV reader."""
    if str(path).lower().endswith(".csv"):
        return load_csv_matrix(path)
    return load_tensor(path, allow_nonfinite=allow_nonfinite)


@dataclass
class DatasetBundle:
    """Logits (N x K), features (N x L) and, for ID splits, labels (N,)."""

    name: str
    logits: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits)
        self.features = np.asarray(self.features)
        if self.logits.ndim != 2 or self.features.ndim != 2:
            raise DataError(f"{self.name}: logits and features must be rank 2")
        if self.logits.shape[0] != self.features.shape[0]:
            raise DataError(
                f"{self.name}: logits have {self.logits.shape[0]} rows, "
                f"features {self.features.shape[0]}"
            )
        if self.labels is not None:
            labels = np.asarray(self.labels).reshape(-1)
            if labels.shape[0] != self.n:
                raise DataError(f"{self.name}: {labels.shape[0]} labels for {self.n} rows")
            if not np.all(labels == np.round(labels)):
                raise DataError(f"{self.name}: labels must be integers")
            labels = labels.astype(np.int64)
            if labels.min() < 0 or labels.max() >= self.k:
                raise DataError(f"{self.name}: labels outside [0, {self.k})")
            self.labels = labels

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def k(self) -> int:
        return self.logits.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def load_bundle(name: str, paths: dict, allow_nonfinite: bool = False) -> DatasetBundle:
    """``paths`` holds ``logits``, ``features`` and optionally ``labels``."""
    for key in ("logits", "features"):
        if key not in paths:
            raise DataError(f"{name}: missing '{key}' path")
    logits = load_matrix(paths["logits"], allow_nonfinite)
    features = load_matrix(paths["features"], allow_nonfinite)
    labels = None
    if paths.get("labels"):
        labels = load_matrix(paths["labels"]).reshape(-1)
    return DatasetBundle(name, logits, features, labels)


def save_bundle(bundle: DatasetBundle, directory) -> dict:
    """Write ``<name>.{logits,features,labels}.sct``; return the path map."""
    directory = Path(directory)
    paths = {}
    parts = [("logits", bundle.logits), ("features", bundle.features)]
    if bundle.labels is not None:
        parts.append(("labels", bundle.labels))
    for key, arr in parts:
        p = directory / f"{bundle.name}.{key}.sct"
        save_tensor(arr, p)
        paths[key] = str(p)
    return paths
