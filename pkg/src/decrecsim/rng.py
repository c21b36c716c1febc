"""Seed-stream derivation for reproducible simulations.

Every randomized step draws from an independent generator derived from the
root seed plus a domain tag and the relevant ids (client, round, ...), so
results never depend on execution order or interleaving.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for different purposes disjoint even when the
# remaining key components collide.
DOMAIN_CLIENT_INIT = 1
DOMAIN_ROUND_SHUFFLE = 2
DOMAIN_TARGET_CHOICE = 3
DOMAIN_ADVERSARY_DATA = 4
DOMAIN_HYPERPLANES = 5
DOMAIN_SHARED_USER = 6


def stream(*keys: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by the given integer tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
