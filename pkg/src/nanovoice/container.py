"""Binary checkpoint container shared by banks, nets and dataset dumps.

Layout::

    magic (4 bytes) | version u16 | module header ... | header crc32 u32
    | payload: little-endian float64 values | payload crc32 u32

The header crc covers every byte before it, the payload crc covers the payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import FormatError

VERSION = 1


class Writer:
    def __init__(self, magic: bytes):
        self.header = bytearray(magic) + struct.pack("<H", VERSION)
        self.arrays = []

    def pack(self, fmt, *values):
        self.header += struct.pack("<" + fmt, *values)

    def string(self, text):
        raw = text.encode("utf-8")
        self.pack("H", len(raw))
        self.header += raw

    def add(self, arr):
        self.arrays.append(np.ascontiguousarray(arr, dtype="<f8"))

    def to_bytes(self) -> bytes:
        payload = b"".join(a.tobytes() for a in self.arrays)
        head = bytes(self.header) + struct.pack("<I", zlib.crc32(self.header))
        return head + payload + struct.pack("<I", zlib.crc32(payload))

    def write(self, path):
        write_atomic(path, self.to_bytes())


class Reader:
    def __init__(self, data: bytes, magic: bytes):
        self.data = data
        self.offset = 0
        got = self.take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        (version,) = self.unpack("H")
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}", 4)

    def take(self, n):
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes, {len(self.data) - self.offset} left", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def string(self):
        (n,) = self.unpack("H")
        start = self.offset
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("invalid utf-8 in name", start) from None

    def end_header(self):
        header_end = self.offset
        (crc,) = self.unpack("I")
        if crc != zlib.crc32(self.data[:header_end]):
            raise FormatError("header checksum mismatch", header_end)
        self.payload_start = self.offset

    def arrays(self, shapes):
        """Read the payload for ``shapes`` and check its length and checksum."""
        sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
        nbytes = 8 * sum(sizes)
        expected_end = self.payload_start + nbytes + 4
        if len(self.data) != expected_end:
            raise FormatError(
                f"payload size mismatch: file has {len(self.data)} bytes, header implies {expected_end}",
                min(len(self.data), expected_end),
            )
        payload = self.data[self.payload_start : self.payload_start + nbytes]
        (crc,) = struct.unpack("<I", self.data[-4:])
        if crc != zlib.crc32(payload):
            raise FormatError("payload checksum mismatch", self.payload_start)
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        out, pos = [], 0
        for shape, size in zip(shapes, sizes):
            out.append(flat[pos : pos + size].reshape(shape).copy())
            pos += size
        return out


def read_file(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def write_atomic(path, data: bytes):
    """Write via a temp file in the same directory and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
