"""Named, independent RNG streams derived from one run seed.

Every stochastic consumer (weight init, per-domain batch sampling and
augmentation, per-domain dropout, synthetic generation, eval splits) owns its
own stream, so disabling one consumer never shifts the draws seen by another.
In particular a source-only training loop consumes exactly the same source-side
draws as a paired run, which is what makes the zero-weight ablation bitwise
reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Deterministic generator for (seed, label); independent across labels."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(label)])
    return np.random.Generator(np.random.PCG64(ss))


def capture_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return gen.bit_generator.state


def restore_state(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
