"""Binary file conventions shared by snapshots, datasets, and the store.

Every on-disk artifact is little-endian, starts with a four-byte magic and a
format version, and ends with a CRC-64 of everything before the trailer.
"""

from __future__ import annotations

import struct

from .errors import IoFailureError


def _crc64_table() -> list[int]:
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, value: int = 0) -> int:
    """CRC-64/XZ: reflected 0xC96C5795D7870F42, init and xorout all-ones."""
    crc = value ^ 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def seal(body: bytes) -> bytes:
    """Append the CRC-64 trailer."""
    return body + struct.pack("<Q", crc64(body))


def unseal(blob: bytes, what: str) -> bytes:
    """Verify and strip the CRC-64 trailer; raises IoFailure on mismatch."""
    if len(blob) < 8:
        raise IoFailureError(f"{what} is truncated")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if crc64(body) != stored:
        raise IoFailureError(f"{what} fails its checksum")
    return body


def write_sealed(path, body: bytes) -> None:
    try:
        with open(path, "wb") as f:
            f.write(seal(body))
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def read_sealed(path, what: str) -> bytes:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    return unseal(blob, what)
