"""Deterministic random-stream fan-out from a single master seed.

Every consumer of randomness (model init, data generation, per-node batch
shuffling, per-node noise, per-node timing, ...) gets its own independent
generator derived from ``(master_seed, role, node_id)``. The derivation
hashes the triple, so adding node K+1 to an experiment never perturbs the
streams of nodes 0..K. Philox is used as the bit generator: it is
counter-based, so draws are reproducible and independent of platform
math-library sampling order.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream_seed", "stream"]


def stream_seed(master_seed: int, role: str, node_id: int = 0) -> np.random.SeedSequence:
    """Derive the seed material for one named stream.

    The triple is serialized to text and hashed with SHA-256; the digest
    words become the SeedSequence entropy. Text serialization (rather than
    Python ``hash``) keeps the mapping stable across processes and runs.
    """
    token = f"feldsim:{master_seed}:{role}:{node_id}".encode()
    digest = hashlib.sha256(token).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.SeedSequence(entropy=[int(w) for w in words])


def stream(master_seed: int, role: str, node_id: int = 0) -> np.random.Generator:
    """Return a fresh counter-based generator for ``(master, role, node_id)``."""
    return np.random.Generator(np.random.Philox(stream_seed(master_seed, role, node_id)))
