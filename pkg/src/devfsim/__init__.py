"""devfsim: a user-space simulator of device-file I/O forwarding.

Guest applications issue device-file operations against virtual device
files; a split driver forwards them over a hypercall channel to
synthetic host devices, with software or hardware hybrid address
spaces for cross-domain memory access, dual host threads for
non-blocking operation, and virtual interrupts for the way back.
"""

from .world import World

__all__ = ["World"]
__version__ = "0.1.0"
