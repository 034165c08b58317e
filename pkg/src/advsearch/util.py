"""Seeding, hashing, and deterministic parallel evaluation helpers."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def rng_from(seed, *salts):
    """Build a Generator from an integer seed plus optional string/int salts.

    The same (seed, salts) always yields the same stream, and different salts
    decorrelate streams sharing one user-facing seed.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for s in salts:
        if isinstance(s, str):
            h = hashlib.sha256(s.encode()).digest()[:4]
            entropy.append(int.from_bytes(h, "little"))
        else:
            entropy.append(int(s) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_arrays(*arrays) -> str:
    """Content hash of numpy arrays (shape-aware)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON used for hashing payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def parallel_map(fn, items, jobs=1):
    """Apply fn over items, optionally on a thread pool.

    Results are returned in input order, so jobs > 1 never changes outcomes
    for pure fn.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
