"""Deterministic seed derivation.

Every stochastic decision in the pipeline draws its seed from a digest of
the master seed plus the decision's identity, never from a shared stream, so
results do not depend on execution order or parallelism.
"""

from __future__ import annotations

import hashlib

_MAX_SEED = 2**64


def derive_seed(*parts: int | str | bytes) -> int:
    """64-bit unsigned seed from a typed, length-prefixed digest of the parts."""
    if not parts:
        raise TypeError("derive_seed requires at least one part")
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str, bytes)):
            raise TypeError(f"seed parts must be int, str, or bytes, got {type(part).__name__}")
        if isinstance(part, int):
            tag, payload = b"i", str(part).encode("ascii")
        elif isinstance(part, str):
            tag, payload = b"s", part.encode("utf-8")
        else:
            tag, payload = b"b", part
        h.update(tag + str(len(payload)).encode("ascii") + b":" + payload)
    return int.from_bytes(h.digest()[:8], "big") % _MAX_SEED
