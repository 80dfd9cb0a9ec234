"""Shared helpers: deterministic seeding, hashing, artifact text formatting."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(*parts) -> int:
    """64-bit seed from a stable hash of the parts (order-sensitive)."""
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def fmt17(x: float) -> str:
    """Format a float at 17 significant digits (lossless float64 round trip)."""
    return format(float(x), ".17g")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def params_fingerprint(params: dict[str, np.ndarray]) -> str:
    """Hash of a named-parameter set: names, shapes, and raw float64 bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        a = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
