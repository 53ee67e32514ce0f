"""Binary container helpers shared by the basis / checkpoint / dataset formats.

All on-disk artifacts use the same skeleton: a 4-byte ASCII magic, a u32
format version, format-specific header fields, raw little-endian tensor
payloads, and a trailing CRC32 (zlib) over everything after the magic.
Multi-byte integers are little-endian throughout.  Writes are atomic
(temp file in the same directory, then ``os.replace``) so a crashed writer
can never leave a half-written artifact behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Any

import numpy as np

from .errors import ArtifactError

__all__ = [
    "Reader",
    "Writer",
    "atomic_write_bytes",
    "canonical_json",
    "crc32",
]


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def canonical_json(obj: Any) -> str:
    """Canonical JSON: sorted keys, compact separators, UTF-8, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` via a same-directory temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class Writer:
    """Accumulates one container; tracks the CRC region automatically.

    Everything appended after the magic participates in the trailing CRC32.
    """

    def __init__(self, magic: bytes):
        if len(magic) != 4:
            raise ValueError("magic must be exactly 4 bytes")
        self._parts: list[bytes] = [magic]

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack("<B", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack("<I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack("<Q", value))
        return self

    def f64(self, value: float) -> "Writer":
        self._parts.append(struct.pack("<d", value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def json_block(self, obj: Any) -> "Writer":
        """u32 byte length followed by canonical JSON."""
        blob = canonical_json(obj).encode("utf-8")
        self.u32(len(blob))
        self.raw(blob)
        return self

    def array(self, arr: np.ndarray, dtype: str) -> "Writer":
        """Raw little-endian C-order bytes of ``arr`` cast to ``dtype``."""
        a = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self.raw(a.tobytes())
        return self

    def finish(self) -> bytes:
        """Append CRC32 over everything after the magic and return the blob."""
        body = b"".join(self._parts[1:])
        return self._parts[0] + body + struct.pack("<I", crc32(body))


class Reader:
    """Sequential reader with magic/version/CRC validation."""

    def __init__(self, data: bytes, magic: bytes, what: str = "artifact"):
        self._what = what
        if len(data) < 8:
            raise ArtifactError(f"{what}: file truncated ({len(data)} bytes)")
        if data[:4] != magic:
            raise ArtifactError(
                f"{what}: bad magic {data[:4]!r}, expected {magic!r}"
            )
        body, tail = data[4:-4], data[-4:]
        (stored,) = struct.unpack("<I", tail)
        actual = crc32(body)
        if stored != actual:
            raise ArtifactError(
                f"{what}: checksum mismatch (stored 0x{stored:08x}, "
                f"computed 0x{actual:08x})"
            )
        self._buf = body
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._buf):
            raise ArtifactError(
                f"{self._what}: truncated payload (wanted {n} bytes at offset "
                f"{self._pos}, {len(self._buf) - self._pos} available)"
            )
        out = self._buf[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def json_block(self) -> Any:
        n = self.u32()
        blob = self._take(n)
        try:
            return json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArtifactError(f"{self._what}: corrupt JSON block: {exc}") from exc

    def array(self, shape: tuple[int, ...], dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self._take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dtype)

    def expect_end(self) -> None:
        if self._pos != len(self._buf):
            raise ArtifactError(
                f"{self._what}: {len(self._buf) - self._pos} trailing bytes"
            )

    def expect_version(self, version: int) -> int:
        got = self.u32()
        if got != version:
            raise ArtifactError(
                f"{self._what}: unsupported format version {got} "
                f"(this build reads version {version})"
            )
        return got
