"""Named sub-seeds derived from one root seed."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *names: object) -> int:
    """Stable 63-bit seed for ``(root, *names)``; independent of PYTHONHASHSEED."""
    key = repr((int(root),) + tuple(str(n) for n in names)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1
