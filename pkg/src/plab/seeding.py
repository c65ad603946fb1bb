"""Deterministic RNG derivation and the shared init distributions."""
from __future__ import annotations

import numpy as np


def derive_rng(*keys: int) -> np.random.Generator:
    """Independent generator for a hierarchical integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std by resampling."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x
