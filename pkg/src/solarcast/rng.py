"""Counter-based random streams derived from a single root seed."""

import zlib

import numpy as np


def _word(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from a root seed and any labels/counters."""
    ss = np.random.SeedSequence([_word(p) for p in parts])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(*parts) -> np.random.Generator:
    """Philox generator keyed on ``parts``; the same parts give the same stream."""
    ss = np.random.SeedSequence([_word(p) for p in parts])
    return np.random.Generator(np.random.Philox(ss))
