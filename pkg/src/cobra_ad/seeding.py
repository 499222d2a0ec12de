"""Named random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("craft", "views", "attack", "init", "data", "eval")


def stream_seed(root: int, name: str, *index: int) -> int:
    """Deterministic 62-bit seed for stream ``name`` at position ``index``.

    Different names never share a sequence; the result does not depend on
    call order, so a resumed run draws the same numbers as an uninterrupted one.
    """
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(int(root), spawn_key=key)
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 2
