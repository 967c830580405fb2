"""Shared test utilities: random manifest generation and independent oracles."""

from __future__ import annotations

import hashlib
import random
import struct
from datetime import datetime, timedelta, timezone

from amp.chunking import merkle_authenticator, merkle_build
from amp.manifest import (
    DerivationSort,
    FacsimileDescriptor,
    FacsimileType,
    IsoBoxAuthenticator,
    LedgerAttestation,
    ManifestReference,
    OtherClaims,
    PublisherAttestation,
    PublisherInfo,
    SimpleChunkListAuthenticator,
    SourceWork,
    SourceWorkInfo,
    TypedDigest,
    WorkInfo,
    build_manifest,
)

_ALPHABET = "abcXYZ 019_-/\\\"'\n\téß中文\U0001f600€\x7f\x01"
_BASE = datetime(2000, 1, 1, tzinfo=timezone.utc)


def rand_text(rng: random.Random, lo: int = 1, hi: int = 24) -> str:
    return "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(lo, hi)))


def rand_time(rng: random.Random) -> datetime:
    return _BASE + timedelta(milliseconds=rng.randrange(0, 40 * 365 * 86400 * 1000))


def _maybe(rng, make, p=0.5):
    return make() if rng.random() < p else None


def rand_claims(rng):
    out = []
    for _ in range(rng.randint(1, 3)):
        external = _maybe(rng, lambda: "https://claims.example/" + rand_text(rng, 1, 8))
        embedded = rand_text(rng) if external is None or rng.random() < 0.5 else None
        out.append(OtherClaims(
            claim_sort=rand_text(rng, 1, 8),
            embedded_claims=embedded,
            external_claims=external,
            external_claims_digest=rng.randbytes(32) if external and rng.random() < 0.5 else None,
        ))
    return tuple(out)


def rand_authenticator(rng):
    kind = rng.randrange(3)
    if kind == 0:
        n = rng.randint(0, 6)
        return SimpleChunkListAuthenticator(rng.randint(1, 1 << 20), n, tuple(rng.randbytes(32) for _ in range(n)))
    if kind == 1:
        n = rng.randint(0, 6)
        return IsoBoxAuthenticator(n, tuple(rng.randbytes(32) for _ in range(n)))
    n = rng.randint(1, 20)
    tree = merkle_build([rng.randbytes(32) for _ in range(n)])
    row = rng.choice([-1] + list(range(tree.depth)))
    return merkle_authenticator(tree, row)


def rand_facsimile(rng):
    return FacsimileDescriptor(
        facsimile_major_type=rng.choice(list(FacsimileType)),
        container_type=rng.choice(["mp4", "jpg", "wav", rand_text(rng, 1, 6)]),
        encoding_information=rand_text(rng),
        length=rng.randint(0, 2**53 - 1),
        object_digest=rng.randbytes(32),
        encoding_information2=_maybe(rng, lambda: rand_text(rng)),
        facsimile_locator=_maybe(rng, lambda: "https://cdn.example/" + rand_text(rng, 1, 10)),
        object_containers=_maybe(rng, lambda: rand_text(rng), 0.2),
        additional_claims=_maybe(rng, lambda: rand_claims(rng), 0.3),
        chunk_data=_maybe(rng, lambda: tuple(rand_authenticator(rng) for _ in range(rng.randint(1, 3))), 0.7),
    )


def rand_container(rng: random.Random, *, attested: bool = None):
    """A structurally valid container exercising most optional fields."""
    publisher = PublisherInfo(
        rand_text(rng), other_info=_maybe(rng, lambda: rand_text(rng)),
        additional_claims=_maybe(rng, lambda: rand_claims(rng), 0.3),
    )
    work = WorkInfo(
        title=rand_text(rng),
        title2=_maybe(rng, lambda: rand_text(rng)),
        other_info=_maybe(rng, lambda: rand_text(rng)),
        copyright=_maybe(rng, lambda: rand_text(rng)),
        creation_time=_maybe(rng, lambda: rand_time(rng)),
        master_copy_locator=_maybe(rng, lambda: "https://master.example/" + rand_text(rng, 1, 8)),
        duration=_maybe(rng, lambda: rng.randint(0, 2**53 - 1)),
        additional_claims=_maybe(rng, lambda: rand_claims(rng), 0.3),
    )
    origins = None
    if rng.random() < 0.4:
        origins = SourceWorkInfo(tuple(
            SourceWork(
                ManifestReference(TypedDigest("sha256", rng.randbytes(32)),
                                  manifest_locator=_maybe(rng, lambda: rand_text(rng))),
                rng.choice(list(DerivationSort)),
                additional_claims=_maybe(rng, lambda: rand_claims(rng), 0.2),
            )
            for _ in range(rng.randint(1, 3))
        ))
    facs = [rand_facsimile(rng) for _ in range(rng.randint(1, 10))]
    container = build_manifest(publisher, work, facs, origins, media_id=rng.randbytes(rng.randint(1, 32)),
                               creation_time=rand_time(rng), rng=rng)
    if attested is None:
        attested = rng.random() < 0.5
    if attested:
        from dataclasses import replace

        att = PublisherAttestation(
            cose_signature_token=rng.randbytes(rng.randint(40, 120)),
            json_web_token=_maybe(rng, lambda: "eyJ" + rand_text(rng, 10, 40).encode("utf-8", "replace").hex()),
            pem_encoded_certificates=_maybe(rng, lambda: tuple(
                "-----BEGIN CERTIFICATE-----\n" + rng.randbytes(30).hex() + "\n-----END CERTIFICATE-----\n"
                for _ in range(rng.randint(1, 4)))),
        )
        container = replace(container, publisher_attestation=att,
                            ledger_attestation=_maybe(rng, lambda: LedgerAttestation(rand_text(rng, 8, 40))),
                            manifest_locator=_maybe(rng, lambda: rand_text(rng)))
    return container


# --------------------------------------------------------------------------
# independent canonical CBOR encoder (length-first key ordering)


def _head(major: int, n: int) -> bytes:
    if n < 24:
        return bytes([major << 5 | n])
    for ai, fmt, limit in ((24, ">B", 1 << 8), (25, ">H", 1 << 16), (26, ">I", 1 << 32), (27, ">Q", 1 << 64)):
        if n < limit:
            return bytes([major << 5 | ai]) + struct.pack(fmt, n)
    raise OverflowError(n)


def oracle_cbor(value) -> bytes:
    if value is True:
        return b"\xf5"
    if value is False:
        return b"\xf4"
    if value is None:
        return b"\xf6"
    if isinstance(value, int):
        return _head(0, value) if value >= 0 else _head(1, -1 - value)
    if isinstance(value, (bytes, bytearray)):
        return _head(2, len(value)) + bytes(value)
    if isinstance(value, str):
        raw = value.encode("utf-8")
        return _head(3, len(raw)) + raw
    if isinstance(value, (list, tuple)):
        return _head(4, len(value)) + b"".join(oracle_cbor(v) for v in value)
    if isinstance(value, dict):
        items = sorted(((oracle_cbor(k), oracle_cbor(v)) for k, v in value.items()),
                       key=lambda kv: (len(kv[0]), kv[0]))
        return _head(5, len(items)) + b"".join(k + v for k, v in items)
    raise TypeError(type(value))


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- Merkle oracle: padded ranges by plain recursion


def oracle_node(leaves, lo, hi):
    """Hash of the padded range [lo, hi) by direct recursion; None if all padding."""
    if lo >= len(leaves):
        return None
    if hi - lo == 1:
        return leaves[lo]
    mid = (lo + hi) // 2
    left, right = oracle_node(leaves, lo, mid), oracle_node(leaves, mid, hi)
    return left if right is None else sha256(left + right)


def oracle_row(leaves, encoded_row):
    width = 1
    while width < len(leaves):
        width *= 2
    span = width >> encoded_row if encoded_row >= 0 else 1
    return [oracle_node(leaves, i, i + span) for i in range(0, width, span)]


def leaves_for(n, seed=0):
    r = random.Random(seed * 1000 + n)
    return [r.randbytes(32) for _ in range(n)]


# -- acceptance bookkeeping, printed by the terminal-summary hook

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
