"""
Seed derivation: every random stream in a run comes from one master seed.
"""
import hashlib

import numpy as np


def _tag_entropy(role):
    # Stable across processes and Python versions (unlike hash())
    digest = hashlib.sha256(role.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_seed(master, role, index=0):
    """
    Split a master seed into an independent 64-bit seed

    Args:
        master: Master seed of the run
        role: Tag naming what the stream is for ("chain", "subsample", ...)
        index: Position within the role (seed index, labeller slot, ...)

    Returns:
        Non-negative integer seed
    """
    seq = np.random.SeedSequence(entropy=[int(master) & 0xFFFFFFFFFFFFFFFF, _tag_entropy(role), int(index) & 0xFFFFFFFFFFFFFFFF])
    return int(seq.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(master, role, index=0):
    """Generator for the (master, role, index) stream"""
    return np.random.default_rng(derive_seed(master, role, index))
