"""Derived PRNG streams.

Every consumer of randomness owns its own stream, derived from an integer
seed plus a stream name, so runs are reproducible regardless of call order
between unrelated consumers.
"""

import zlib

import numpy as np
import torch


def _stream_key(stream: str) -> int:
    return zlib.crc32(stream.encode("utf-8"))


def derive_seed(seed: int, stream: str) -> int:
    """Deterministic 63-bit seed for a named stream"""
    sequence = np.random.SeedSequence([int(seed), _stream_key(stream)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """numpy Generator for a named stream"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _stream_key(stream)]))


def seed_torch(seed: int, stream: str) -> int:
    """Seed torch's global generator (weight init, dropout) for a named stream"""
    value = derive_seed(seed, stream)
    torch.manual_seed(value)
    return value
