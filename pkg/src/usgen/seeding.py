"""Deterministic RNG plumbing.

Every source of randomness in the package is an explicit seed or a generator
derived from one.  Training loops derive per-epoch / per-step seeds with
``derive_seed`` so that a resumed run draws exactly the same numbers as an
uninterrupted one.
"""

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of ints/strings into a 63-bit child seed."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def as_generator(seed_or_gen) -> torch.Generator:
    """Accept either an int seed or an existing torch.Generator."""
    if isinstance(seed_or_gen, torch.Generator):
        return seed_or_gen
    return torch_generator(int(seed_or_gen))


def seeded_module(factory, seed: int):
    """Construct an nn.Module with its default initializers driven by `seed`.

    Module __init__ methods draw from torch's global RNG; fork it so the
    construction is reproducible without disturbing the caller's RNG stream.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return factory()
