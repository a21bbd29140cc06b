from __future__ import annotations
from typing import Any, Iterable

import hashlib
import json
import textwrap

import numpy as np


def derive_seed(seed: int, stream: str, index: int = 0) -> int:
    """Derive an independent 32-bit seed for `stream` at `index`.

    All randomness in a run is drawn from seeds derived this way, so any
    step of a run can be replayed without carrying generator state around.
    """
    entropy = [int(seed) & 0xFFFFFFFF, int(index) & 0xFFFFFFFF]
    entropy += list(stream.encode("utf8"))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_jsonable)


def fingerprint(data: Any) -> str:
    """SHA-256 of the canonical JSON encoding of `data`."""
    return hashlib.sha256(canonical_json(data).encode("utf8")).hexdigest()


def array_digest(*arrays: Iterable) -> str:
    """Short digest over raw array bytes, used to tag rendered states."""
    h = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(np.asarray(array))
        h.update(str(array.dtype).encode("ascii"))
        h.update(str(array.shape).encode("ascii"))
        h.update(array.tobytes())
    return h.hexdigest()[:16]


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_record(data: dict) -> str:
    """Serialize one metrics/episode record as a single JSON line."""
    return json.dumps(data, sort_keys=True, default=_jsonable)


def cfg(code: str) -> str:
    """Nicer indentation for inline YAML snippets.

    The snippet might be triple-quoted, so leading newlines are dropped
    before dedenting.
    """
    code = code.lstrip("\n")
    return textwrap.dedent(code)
