"""Digest algorithm registry.

Only ``sha256`` is registered; unknown names are rejected wherever a
manifest is parsed or built.
"""

import hashlib

from .errors import UnsupportedAlgorithm

_ALGORITHMS = {
    "sha256": (hashlib.sha256, 32),
}

DEFAULT_ALGORITHM = "sha256"


def digest_size(algorithm: str) -> int:
    try:
        return _ALGORITHMS[algorithm][1]
    except KeyError:
        raise UnsupportedAlgorithm(f"unsupported digest algorithm {algorithm!r}") from None


def hasher(algorithm: str = DEFAULT_ALGORITHM):
    try:
        return _ALGORITHMS[algorithm][0]()
    except KeyError:
        raise UnsupportedAlgorithm(f"unsupported digest algorithm {algorithm!r}") from None


def digest(data: bytes, algorithm: str = DEFAULT_ALGORITHM) -> bytes:
    h = hasher(algorithm)
    h.update(data)
    return h.digest()


def is_supported(algorithm: str) -> bool:
    return algorithm in _ALGORITHMS
