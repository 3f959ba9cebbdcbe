"""
Binary container for named numeric arrays.

Every artifact the lab persists (models, sequences, checkpoints, face maps)
goes through this one format:

    magic "HGAR" | version u8 | attrs length u32 | attrs (UTF-8 YAML)
    array count u32
    per array: name length u16 | name | dtype u8 | ndim u8 | dims u32 * ndim | payload

All integers and payloads are little-endian. Supported payloads are float32
(dtype 0) and int32 (dtype 1).
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ContainerError


MAGIC = b"HGAR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


@dataclass
class ArrayBundle:
    """Arrays plus scalar attributes read from a container."""
    arrays: dict[str, np.ndarray]
    attrs: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.arrays[name]
        except KeyError:
            raise ContainerError(f"Array '{name}' not found in container") from None

    def __contains__(self, name: str) -> bool:
        return name in self.arrays


def _dtype_code(array: np.ndarray, name: str) -> tuple[int, np.ndarray]:
    if np.issubdtype(array.dtype, np.floating):
        return 0, array.astype("<f4", copy=False)
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        info = np.iinfo(np.int32)
        if array.size and (array.min() < info.min or array.max() > info.max):
            raise ContainerError(f"Array '{name}' has values outside int32 range")
        return 1, array.astype("<i4", copy=False)
    raise ContainerError(f"Array '{name}' has unsupported dtype {array.dtype}")


def save_arrays(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    attrs: dict[str, Any] | None = None,
) -> Path:
    """
    Write arrays (and optional scalar attributes) to a container file.

    The file is written to a temporary sibling and moved into place, so a
    crash never leaves a half-written container behind.

    Args:
        path: Destination file.
        arrays: Name -> array. Floats are stored as float32, ints as int32.
        attrs: Optional YAML-serializable scalars (preset, seed, step, ...).

    Returns:
        The path written.

    Raises:
        ContainerError: If an array can't be represented.
    """
    path = Path(path)
    attrs_blob = yaml.safe_dump(attrs or {}, sort_keys=True).encode("utf-8")

    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(attrs_blob)), attrs_blob]
    chunks.append(struct.pack("<I", len(arrays)))

    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        code, stored = _dtype_code(array, name)
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise ContainerError(f"Array name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", code, stored.ndim))
        chunks.append(struct.pack(f"<{stored.ndim}I", *stored.shape))
        chunks.append(np.ascontiguousarray(stored).tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with open(tmp_path, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp_path, path)
    except OSError as e:
        raise ContainerError(f"Cannot write container {path}: {e}") from e
    return path


class _Reader:
    """Cursor over container bytes with truncation checks."""

    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ContainerError(f"Truncated container: {self.path}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_arrays(path: str | Path) -> ArrayBundle:
    """
    Read a container file.

    Args:
        path: Container file to read.

    Returns:
        ArrayBundle with arrays (float32/int32) and attributes.

    Raises:
        ContainerError: On missing file, bad magic/version or truncation.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"Cannot read container {path}: {e}") from e

    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise ContainerError(f"Not an array container (bad magic): {path}")
    (version,) = reader.unpack("<B")
    if version != VERSION:
        raise ContainerError(f"Unsupported container version {version}: {path}")

    (attrs_len,) = reader.unpack("<I")
    attrs = yaml.safe_load(reader.take(attrs_len).decode("utf-8")) or {}

    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise ContainerError(f"Unsupported dtype code {code} for '{name}': {path}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(nbytes)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    if reader.offset != len(data):
        raise ContainerError(f"Trailing bytes after last array: {path}")
    return ArrayBundle(arrays=arrays, attrs=attrs)
