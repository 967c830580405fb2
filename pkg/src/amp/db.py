"""Indexed manifest database: containers plus receipts, looked up by MediaID,
object digest, chunk digest or ManifestID.

Revocation marks a record and filters it from queries; ``get`` still returns
it with ``revoked=True``. Only leaf-level chunk digests are indexed (simple
lists, ISO box lists and Merkle authenticators whose stored row is the leaf
row), since interior Merkle nodes never match a chunk hash.
"""

from __future__ import annotations

import enum
import os
import struct
import threading
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Iterable, Optional

from . import codec
from .chunking import tree_depth
from .errors import ManifestError, ReceiptRejected
from .ledger.log import EntryKind, Receipt, verify_receipt, verify_receipt_offline
from .manifest import (
    IsoBoxAuthenticator,
    ManifestContainer,
    MerkleTreeAuthenticator,
    SimpleChunkListAuthenticator,
    TypedDigest,
    compute_manifest_id,
    now_utc,
    validate_container,
)
from .pki import TrustPolicy
from .signing import verify_publisher_attestation

INDEX_ENTRY_BYTES = 64  # 32-byte hash key + 32 bytes of record reference


class IndexKind(enum.Enum):
    BY_MEDIA_ID = "media_id"
    BY_OBJECT_DIGEST = "object_digest"
    BY_CHUNK_DIGEST = "chunk_digest"
    BY_MANIFEST_ID = "manifest_id"


@dataclass(frozen=True)
class IndexKey:
    kind: IndexKind
    key: bytes


@dataclass
class DbRecord:
    container: ManifestContainer
    receipt: Receipt
    manifest_id: TypedDigest
    ingest_time: datetime
    revoked: bool = False
    revocation: Optional[Receipt] = None

    @property
    def creation_time(self) -> datetime:
        return self.container.core_manifest.creation_time

    @property
    def ledger_index(self) -> int:
        return self.receipt.entry_index


@dataclass(frozen=True)
class ObjectHit:
    record: DbRecord
    facsimile_index: int


@dataclass(frozen=True)
class ChunkHit:
    record: DbRecord
    facsimile_index: int
    hits: dict  # chunk digest -> sorted chunk indices within that facsimile


def leaf_digests(auth) -> Optional[tuple]:
    """Chunk digests an authenticator stores at leaf level, or None."""
    if isinstance(auth, (SimpleChunkListAuthenticator, IsoBoxAuthenticator)):
        return auth.chunk_digest
    if isinstance(auth, MerkleTreeAuthenticator):
        if auth.encoded_row == -1 or auth.encoded_row == tree_depth(auth.num_chunks) - 1:
            return auth.chunk_digest
    return None


class ManifestDatabase:
    def __init__(
        self,
        service_public_key,
        *,
        trust_policy: Optional[TrustPolicy] = None,
        journal_path: Optional[str] = None,
        clock: Callable[[], datetime] = now_utc,
    ):
        self.service_public_key = service_public_key
        self.trust_policy = trust_policy
        self.clock = clock
        self._lock = threading.RLock()
        self._records: dict = {}  # manifest id bytes -> DbRecord
        self._by_media: dict = {}
        self._by_object: dict = {}  # digest -> set of (mid, facsimile index)
        self._by_chunk: dict = {}  # digest -> set of (mid, facsimile index, chunk index)
        self._fh = None
        if journal_path is not None:
            if os.path.exists(journal_path):
                self._replay(journal_path)
            self._fh = open(journal_path, "ab")

    # -- writes

    def ingest(self, container: ManifestContainer, receipt: Receipt, *, _journal: bool = True,
               _verify_attestation: bool = True) -> TypedDigest:
        manifest_id = compute_manifest_id(container.core_manifest)
        with self._lock:
            if manifest_id.digest_value in self._records:
                return manifest_id
            check = verify_receipt_offline(container, receipt, self.service_public_key)
            if not check:
                raise ReceiptRejected(f"receipt does not verify: {check.reason}")
            report = validate_container(container)
            if not report.ok:
                raise ManifestError(f"container is inconsistent: {report.issues[0].message}")
            if _verify_attestation and self.trust_policy is not None:
                verify_publisher_attestation(container, self.trust_policy)
            rec = DbRecord(container, receipt, manifest_id, self.clock())
            self._index(rec)
            if _journal and self._fh is not None:
                self._write({"op": "ingest", "container": codec.encode_canonical_cbor(container),
                             "receipt": receipt.to_cbor()})
            return manifest_id

    def _index(self, rec: DbRecord) -> None:
        mid = rec.manifest_id.digest_value
        self._records[mid] = rec
        self._by_media.setdefault(rec.container.core_manifest.media_id, set()).add(mid)
        for tagged in rec.container.facsimile_info.records:
            fac = tagged.facsimile
            self._by_object.setdefault(fac.object_digest, set()).add((mid, tagged.index))
            for auth in fac.chunk_data or ():
                for pos, d in enumerate(leaf_digests(auth) or ()):
                    self._by_chunk.setdefault(d, set()).add((mid, tagged.index, pos))

    def apply_revocation(self, manifest_id: TypedDigest, ledger_evidence: Receipt, *, _journal: bool = True) -> bool:
        """Mark a record revoked given a ledger receipt for its Revocation entry."""
        with self._lock:
            rec = self._records.get(manifest_id.digest_value)
            if rec is None:
                return False
            check = verify_receipt(ledger_evidence, self.service_public_key)
            if not check:
                raise ReceiptRejected(f"revocation evidence does not verify: {check.reason}")
            entry = ledger_evidence.entry
            if entry.kind != EntryKind.REVOCATION or entry.manifest_id != manifest_id:
                raise ReceiptRejected("evidence is not a revocation of this manifest")
            rec.revoked = True
            rec.revocation = ledger_evidence
            if _journal and self._fh is not None:
                self._write({"op": "revoke", "manifest_id": codec.to_wire(manifest_id, "cbor"),
                             "evidence": ledger_evidence.to_cbor()})
            return True

    # -- reads

    def get(self, manifest_id: TypedDigest) -> Optional[DbRecord]:
        """Direct fetch; revoked records are returned (with ``revoked`` set)."""
        return self._records.get(manifest_id.digest_value)

    def __len__(self) -> int:
        return len(self._records)

    @staticmethod
    def _order(records: Iterable[DbRecord], order: str) -> list:
        if order == "creation":
            return sorted(records, key=lambda r: (r.creation_time, r.ledger_index))
        if order == "ledger":
            return sorted(records, key=lambda r: r.ledger_index)
        raise ValueError(f"unknown ordering {order!r}")

    def query_media_id(self, media_id: bytes, *, include_revoked: bool = False, order: str = "creation") -> list:
        with self._lock:
            recs = [self._records[m] for m in self._by_media.get(media_id, ())]
        return self._order((r for r in recs if include_revoked or not r.revoked), order)

    def query_object_digest(self, digest: bytes, *, include_revoked: bool = False, order: str = "creation") -> list:
        with self._lock:
            pairs = list(self._by_object.get(digest, ()))
            hits = [ObjectHit(self._records[m], idx) for m, idx in pairs]
        hits = [h for h in hits if include_revoked or not h.record.revoked]
        ranked = self._order({id(h.record): h.record for h in hits}.values(), order)
        rank = {id(r): i for i, r in enumerate(ranked)}
        return sorted(hits, key=lambda h: (rank[id(h.record)], h.facsimile_index))

    def query_chunk_digest(self, digests, *, include_revoked: bool = False, order: str = "creation") -> list:
        """Facsimiles holding every digest in ``digests``, with where each one sits."""
        if isinstance(digests, (bytes, bytearray)):
            digests = [bytes(digests)]
        digests = list(dict.fromkeys(digests))
        if not digests:
            return []
        with self._lock:
            per = {d: list(self._by_chunk.get(d, ())) for d in digests}
            groups: Optional[set] = None
            for d in digests:
                keys = {(m, f) for m, f, _ in per[d]}
                groups = keys if groups is None else groups & keys
            out = []
            for m, f in groups or ():
                rec = self._records[m]
                if rec.revoked and not include_revoked:
                    continue
                hitmap = {d: sorted(c for mm, ff, c in per[d] if mm == m and ff == f) for d in digests}
                out.append(ChunkHit(rec, f, hitmap))
        ranked = self._order({id(h.record): h.record for h in out}.values(), order)
        rank = {id(r): i for i, r in enumerate(ranked)}
        return sorted(out, key=lambda h: (rank[id(h.record)], h.facsimile_index))

    def lookup(self, key: IndexKey, **kw) -> list:
        if key.kind is IndexKind.BY_MEDIA_ID:
            return self.query_media_id(key.key, **kw)
        if key.kind is IndexKind.BY_OBJECT_DIGEST:
            return self.query_object_digest(key.key, **kw)
        if key.kind is IndexKind.BY_CHUNK_DIGEST:
            return self.query_chunk_digest([key.key], **kw)
        rec = self._records.get(key.key)
        return [rec] if rec is not None and (kw.get("include_revoked") or not rec.revoked) else []

    def stats(self) -> dict:
        with self._lock:
            counts = {
                "manifests": len(self._records),
                "revoked": sum(r.revoked for r in self._records.values()),
                "media_id_entries": sum(len(v) for v in self._by_media.values()),
                "object_digest_entries": sum(len(v) for v in self._by_object.values()),
                "chunk_digest_entries": sum(len(v) for v in self._by_chunk.values()),
            }
        counts["manifest_id_entries"] = counts["manifests"]
        counts["index_entries"] = sum(counts[k] for k in counts if k.endswith("_entries"))
        counts["index_bytes"] = counts["index_entries"] * INDEX_ENTRY_BYTES
        return counts

    # -- journal

    def _write(self, record: dict) -> None:
        data = codec.cbor_dumps(record)
        self._fh.write(struct.pack(">I", len(data)) + data)
        self._fh.flush()

    def _replay(self, path: str) -> None:
        with open(path, "rb") as fh:
            blob = fh.read()
        offset = 0
        while offset + 4 <= len(blob):
            (length,) = struct.unpack_from(">I", blob, offset)
            rec = codec.cbor_loads(blob[offset + 4 : offset + 4 + length])
            offset += 4 + length
            if rec["op"] == "ingest":
                container = codec.decode_cbor(rec["container"])
                # attestations were checked at first ingest; certificates may have expired since
                self.ingest(container, Receipt.from_cbor(rec["receipt"]), _journal=False, _verify_attestation=False)
            elif rec["op"] == "revoke":
                self.apply_revocation(codec.from_wire(TypedDigest, rec["manifest_id"], "cbor"), Receipt.from_cbor(rec["evidence"]),
                                      _journal=False)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
