"""Single-root seed expansion: every random stream is keyed by name."""

import hashlib


def derive_seed(root, *parts):
    """64-bit seed from the root seed and a component path (e.g. name, scene id)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")
