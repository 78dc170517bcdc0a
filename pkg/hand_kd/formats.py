"""
Little-endian binary codec shared by the rig ("HKDR"), model ("HKDM") and dataset
("HKDD") files.

A file is a 4-byte magic, a u32 format version, format-specific header fields and a
sequence of named sections. A section is a u16 name length, the UTF-8 name, a u64
element count and that many f64 values.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A file is malformed, truncated, or of the wrong kind or version."""


class BinaryWriter:
    """Accumulates a file body in memory; `write_atomic` puts it on disk."""

    def __init__(self, magic: bytes, version: int = FORMAT_VERSION):
        if len(magic) != 4:
            raise ValueError(f"Magic must be 4 bytes, got {magic!r}")
        self._buffer = bytearray(magic)
        self.u32(version)

    def u8(self, value: int) -> "BinaryWriter":
        self._buffer += struct.pack("<B", int(value))
        return self

    def u16(self, value: int) -> "BinaryWriter":
        self._buffer += struct.pack("<H", int(value))
        return self

    def u32(self, value: int) -> "BinaryWriter":
        self._buffer += struct.pack("<I", int(value))
        return self

    def u64(self, value: int) -> "BinaryWriter":
        self._buffer += struct.pack("<Q", int(value))
        return self

    def f64(self, values) -> "BinaryWriter":
        """Raw f64 block without a section header."""
        self._buffer += np.ascontiguousarray(values, dtype="<f8").tobytes()
        return self

    def section(self, name: str, values) -> "BinaryWriter":
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(values, dtype="<f8").ravel()
        self.u16(len(encoded))
        self._buffer += encoded
        self.u64(array.size)
        self._buffer += array.tobytes()
        return self

    def __len__(self) -> int:
        return len(self._buffer)

    def getvalue(self) -> bytes:
        return bytes(self._buffer)

    def write_atomic(self, path: PathLike) -> Path:
        return write_atomic(path, bytes(self._buffer))


class BinaryReader:
    """Sequential reader over a file body; every failure names what was being read."""

    def __init__(self, payload: bytes, source: str = "<bytes>"):
        self._payload = payload
        self._offset = 0
        self.source = source

    @classmethod
    def from_path(cls, path: PathLike) -> "BinaryReader":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
        return cls(path.read_bytes(), str(path))

    @property
    def offset(self) -> int:
        return self._offset

    @property
    def remaining(self) -> int:
        return len(self._payload) - self._offset

    def _take(self, n: int, what: str) -> bytes:
        if self.remaining < n:
            raise FormatError(
                f"{self.source}: truncated while reading {what} "
                f"(needed {n} bytes, {self.remaining} left)"
            )
        chunk = self._payload[self._offset:self._offset + n]
        self._offset += n
        return chunk

    def expect_header(self, magic: bytes, kind: str, version: int = FORMAT_VERSION) -> None:
        found = self._take(4, "magic")
        if found != magic:
            raise FormatError(f"{self.source}: not a {kind} file (magic {found!r}, expected {magic!r})")
        found_version = self.u32("format version")
        if found_version != version:
            raise FormatError(
                f"{self.source}: unsupported {kind} format version {found_version} (expected {version})"
            )

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self._take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self._take(8, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        raw = self._take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def read_section(self, name: str, count: Optional[int] = None) -> np.ndarray:
        """
        Read the next section and check it is `name`.

        Raises:
            FormatError: If the section is missing, misnamed, of unexpected length or truncated
        """
        if self.remaining == 0:
            raise FormatError(f"{self.source}: missing section '{name}' (end of file)")
        length = self.u16(f"section '{name}' name length")
        found = self._take(length, f"section '{name}' name").decode("utf-8", errors="replace")
        if found != name:
            raise FormatError(f"{self.source}: expected section '{name}', found '{found}'")
        n = self.u64(f"section '{name}' element count")
        if count is not None and n != count:
            raise FormatError(f"{self.source}: section '{name}' holds {n} values, expected {count}")
        return self.f64(n, f"section '{name}' payload")

    def next_section(self) -> Tuple[str, np.ndarray]:
        """Read the next section whatever its name."""
        length = self.u16("section name length")
        name = self._take(length, "section name").decode("utf-8", errors="replace")
        n = self.u64(f"section '{name}' element count")
        return name, self.f64(n, f"section '{name}' payload")

    def expect_end(self) -> None:
        if self.remaining:
            raise FormatError(f"{self.source}: {self.remaining} unexpected trailing bytes")


def file_digest(path: PathLike) -> str:
    """sha256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_atomic(path: PathLike, payload: bytes) -> Path:
    """Write via a temporary sibling and rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix(path.suffix + ".tmp")
    with open(temp_file, "wb") as f:
        f.write(payload)
    temp_file.replace(path)
    logger.debug(f"Wrote {len(payload)} bytes to {path}")
    return path
