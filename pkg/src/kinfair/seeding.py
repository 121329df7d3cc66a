"""Deterministic seed derivation.

All randomness in the pipeline flows from one global seed. Stage- and
item-level seeds are derived by hashing ``"<seed>:<name>"`` with SHA-256 and
taking the first four bytes, so adding or reordering unrelated work never
shifts another component's random stream.
"""

from __future__ import annotations

import hashlib


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")
