"""
Small numeric utilities used by every computational module: seeded random
streams, canonical hashing and stable log-sum-exp.
"""

import hashlib
import json
from typing import Any

import numpy as np
from scipy.special import logsumexp


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """
    Derive an independent random stream from a base seed and integer keys.

    Streams derived from different key tuples never share state, so callers
    can skip a stream (for example the mask stream when the boost term is
    disabled) without shifting any other stream.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def canonical_json(payload: Any) -> str:
    """Serialise a JSON-compatible payload with sorted keys and no whitespace drift."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def array_digest(arrays: dict[str, np.ndarray]) -> str:
    """Hash a named collection of arrays in name order (little-endian float64 bytes)."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return digest.hexdigest()


def stable_logsumexp(values: np.ndarray, axis: int = -1) -> np.ndarray:
    return logsumexp(values, axis=axis)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (B, K) array."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def derive_seed(seed: int, *keys: int) -> int:
    """Collapse a base seed and integer keys into one 32-bit seed for seed-taking APIs."""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
