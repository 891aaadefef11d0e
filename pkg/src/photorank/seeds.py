"""Deterministic derivation of per-component RNG seeds from one master seed."""

import hashlib


def derive_seed(base: int, *labels) -> int:
    """Hash a master seed and a label path into an independent 63-bit seed.

    Every randomized component (corpus generation, samplers, parameter init,
    baseline scorers) gets its own labeled stream so that one CLI-level seed
    reproduces a whole run without the components sharing RNG state.
    """
    h = hashlib.sha256(str(int(base)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    # Keep it non-negative and within SeedSequence's comfortable range.
    return int.from_bytes(h.digest()[:8], "little") >> 1
