"""Status codes that cross the guest/host boundary in result slots."""

from __future__ import annotations

import enum


class Status(enum.IntEnum):
    OK = 0
    ACCEPTED = 1          # non-blocking op queued; completion interrupt follows
    CONTINUE = 2          # first frame of a two-frame operation received
    NEED_GVA_RANGE = 3    # driver-initiated map recorded; re-execute with a range

    ERR_BAD_HANDLE = 9
    ERR_BUSY = 16
    ERR_BAD_ADDRESS = 14
    ERR_INVALID_CMD = 22
    ERR_UNSUPPORTED = 95
    ERR_STALE_REQUEST = 116
    ERR_NO_RESULT_PAGE = 117
    ERR_INTERNAL = 125


def is_error(status: int) -> bool:
    return status >= Status.ERR_BAD_HANDLE
