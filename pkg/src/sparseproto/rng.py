"""Deterministic random streams derived from a single root seed.

Every source of randomness in a run (scene synthesis, parameter init,
dropout, denoising noise, point sampling, benchmark workloads) draws from a
named substream. Substreams are independent Philox generators, so re-seeding
or re-ordering one component never perturbs the draws of another.

Dropout additionally needs *counter* addressing: the mask for a given
(step, site) must not depend on how many other masks were drawn before it.
Philox is counter-based, so we open a fresh generator at an explicit counter
instead of consuming a shared stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Open the named substream of ``root_seed`` at its origin."""
    key = [int(root_seed) & _MASK64, _name_key(name)]
    return np.random.Generator(np.random.Philox(key=key))


def counter_stream(
    root_seed: int, name: str, counter: tuple[int, ...]
) -> np.random.Generator:
    """Open the named substream at an explicit counter position.

    ``counter`` may hold up to four nonnegative integers, e.g.
    ``(step, site_id)``. The same (seed, name, counter) always yields the
    same draws, regardless of call order.
    """
    if len(counter) > 4:
        raise ValueError("counter supports at most 4 components")
    ctr = [int(c) & _MASK64 for c in counter] + [0] * (4 - len(counter))
    key = [int(root_seed) & _MASK64, _name_key(name)]
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))
