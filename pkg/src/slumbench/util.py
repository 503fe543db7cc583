"""Small shared helpers: stable seed derivation, content hashing, float
formatting for reports."""

from __future__ import annotations

import hashlib
import json
import math


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from string-able parts (never Python's salted hash)."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFFFFFFFFFFFFFF


def content_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fmt_float(x, precision: int = 6) -> str:
    """Fixed-precision float for report CSVs (round-half-even); empty for
    missing/NaN."""
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return ""
    return f"{float(x):.{precision}f}"
