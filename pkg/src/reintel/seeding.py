"""Named random substreams derived from one root seed."""

import hashlib

SUBSTREAMS = ("split", "image-choice", "init", "shuffle", "synthetic", "mice")


def stable_hash(text: str) -> int:
    """Process-independent 32-bit hash (``hash()`` is salted per interpreter)."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=4).digest(), "little")


def derive_seed(root: int, name: str) -> int:
    return stable_hash(f"{int(root)}/{name}")
