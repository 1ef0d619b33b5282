"""Counter-based uniforms keyed by (seed, counter).

Both the incremental sampler and its from-scratch oracle draw through
:func:`uniform`, so identical keys always give identical tokens regardless of
batch layout or call order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def uniform(seed: int, counter: int) -> float:
    """A double in [0, 1) from the Philox4x64 stream keyed by ``seed``."""
    bitgen = np.random.Philox(key=seed & _MASK64, counter=counter & _MASK64)
    return float(np.random.Generator(bitgen).random())


def uniforms(seeds, counters) -> np.ndarray:
    return np.array([uniform(int(s), int(c)) for s, c in zip(seeds, counters)], dtype=np.float64)


def derive_seed(root: int, *labels) -> int:
    """Stable 64-bit child seed for ``root`` and a path of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(root & _MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return int.from_bytes(h.digest(), "little")
