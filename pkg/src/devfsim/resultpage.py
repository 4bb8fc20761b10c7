"""Result-page record layout shared by frontend and backend.

Each guest thread that uses non-blocking operations owns one page; the
host worker writes a completed operation's record there and the guest
thread reads it after the completion interrupt.  Layout, little endian:

    status    u32
    flags     u32   bit 0: payload was staged to the caller's buffer
    values    6 x u32
    blob_len  u32
    blob      up to PAGE_SIZE - 36 bytes

A record with a maximum-size inline blob fills the page exactly; larger
payloads are staged through the user-buffer copy path and only the
header travels on the page.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .memvirt import PAGE_SIZE

_HEADER = struct.Struct("<II6II")
HEADER_BYTES = _HEADER.size
BLOB_CAPACITY = PAGE_SIZE - HEADER_BYTES

FLAG_STAGED = 0x1


@dataclass(frozen=True)
class ResultRecord:
    status: int
    values: tuple[int, ...]
    blob: bytes | None
    staged: bool

    @property
    def total_bytes(self) -> int:
        return HEADER_BYTES + (len(self.blob) if self.blob else 0)


def encode(status: int, values: tuple[int, ...], blob: bytes | None = None,
           staged: bool = False) -> bytes:
    if blob is not None and len(blob) > BLOB_CAPACITY:
        raise ValueError("inline blob exceeds the result page")
    padded = tuple(values[:6]) + (0,) * (6 - min(len(values), 6))
    flags = FLAG_STAGED if staged else 0
    head = _HEADER.pack(status, flags, *padded, len(blob) if blob else 0)
    return head + (blob or b"")


def decode(page: bytes) -> ResultRecord:
    status, flags, *rest = _HEADER.unpack_from(page, 0)
    values, blob_len = tuple(rest[:6]), rest[6]
    staged = bool(flags & FLAG_STAGED)
    blob = None
    if blob_len and not staged:
        blob = bytes(page[HEADER_BYTES : HEADER_BYTES + blob_len])
    return ResultRecord(status, values, blob, staged)
