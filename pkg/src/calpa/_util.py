from __future__ import annotations

import hashlib
import json
import math


def round_half_up(x: float) -> int:
    # the small slack absorbs float noise such as 0.15000000000000002 * 10
    return int(math.floor(x + 0.5 + 1e-9))


def snap(value: float, step: float) -> float:
    """Round ``value`` to the nearest multiple of ``step`` (half-up)."""
    return round(round_half_up(value / step) * step, 10)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    if isinstance(obj, bytes):
        data = obj
    else:
        data = canonical_json(obj).encode()
    return hashlib.sha256(data).hexdigest()[:16]
