"""Append-only provenance ledger with service-signed roots and offline receipts.

The log is an RFC 6962-shaped Merkle tree whose leaves are entry
digests and whose interior nodes are ``sha256(0x01 || left || right)``.
An entry digest is the sha256 of the canonical CBOR entry with its index
removed.
"""

from __future__ import annotations

import enum
import os
import struct
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Callable, Optional, Sequence

import cbor2
from cryptography.hazmat.primitives.asymmetric import ec

from .. import codec
from .. import digest as _digest
from ..errors import EmptyLedger, NotYetSigned, RangeError, RegistrationRejected, TrustError
from ..manifest import ManifestContainer, TypedDigest, compute_manifest_id, now_utc
from ..pki import EkuPurpose, TrustChain, TrustPolicy, fingerprint, verify_chain
from ..signing import ecdsa_sign, ecdsa_verify

NODE_PREFIX = b"\x01"
DEFAULT_SIGN_EVERY = 1000
DEFAULT_SIGN_INTERVAL = 1.0
CHAIN_CACHE_SECONDS = 60.0  # how long a validated signer chain is trusted without re-checking


class EntryKind(enum.IntEnum):
    REGISTRATION = 1
    REVOCATION = 2
    GOVERNANCE = 3


@dataclass(frozen=True)
class LedgerEntry:
    index: int
    kind: EntryKind
    manifest_id: TypedDigest
    copyright: str
    publisher_signature: bytes
    signer: bytes  # sha256 fingerprint of the signing certificate
    timestamp: datetime

    def digest(self) -> bytes:
        return _digest.digest(cbor2.dumps(self.cbor_tree(with_index=False), canonical=True))

    def cbor_tree(self, with_index: bool = True) -> dict:
        """Same tree as ``codec.to_wire(entry, "cbor")``, built directly for the hot path."""
        tree = {
            "Kind": int(self.kind),
            "ManifestID": {"DigestAlgorithm": self.manifest_id.digest_algorithm,
                           "DigestValue": self.manifest_id.digest_value},
            "Copyright": self.copyright,
            "PublisherSignature": self.publisher_signature,
            "Signer": self.signer,
            "Timestamp": codec.time_to_ms(self.timestamp),
        }
        if with_index:
            tree["Index"] = self.index
        return tree


@dataclass(frozen=True)
class SignedTreeRoot:
    tree_size: int
    root_hash: bytes
    signing_time: datetime
    service_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        tree = codec.to_wire(self, "cbor")
        tree.pop("ServiceSignature", None)
        return codec.cbor_dumps(tree)

    def verify(self, service_public_key) -> bool:
        return ecdsa_verify(service_public_key, self.service_signature, self.signed_bytes())


@dataclass(frozen=True)
class Receipt:
    entry_index: int
    entry_digest: bytes
    inclusion_path: tuple[bytes, ...]
    signed_root: SignedTreeRoot
    entry: LedgerEntry

    def to_cbor(self) -> bytes:
        return codec.encode_canonical_cbor(self)

    @classmethod
    def from_cbor(cls, data: bytes) -> "Receipt":
        return codec.from_wire(cls, codec.cbor_loads(data), "cbor")

    def to_json_tree(self):
        return codec.to_wire(self, "json")

    @classmethod
    def from_json_tree(cls, tree) -> "Receipt":
        return codec.from_wire(cls, tree, "json")

    def to_attestation_value(self) -> str:
        """Compact string for ``LedgerAttestation.LedgerAttestationValue``."""
        return codec.b64e(self.to_cbor())

    @classmethod
    def from_attestation_value(cls, value: str) -> "Receipt":
        return cls.from_cbor(codec.b64d(value))


def registration_message(manifest_id: TypedDigest, copyright: str) -> bytes:
    """The bytes a publisher signs to register: hex ManifestID then the copyright string."""
    return manifest_id.digest_value.hex().encode("ascii") + copyright.encode("utf-8")


def revocation_message(manifest_id: TypedDigest) -> bytes:
    return b"revoke:" + manifest_id.digest_value.hex().encode("ascii")


def governance_message(action: str, subject: str) -> bytes:
    return f"governance:{action}:{subject}".encode("utf-8")


def sign_registration(chain: TrustChain, manifest_id: TypedDigest, copyright: str) -> bytes:
    return ecdsa_sign(chain.leaf_key, registration_message(manifest_id, copyright))


def sign_revocation(chain: TrustChain, manifest_id: TypedDigest) -> bytes:
    return ecdsa_sign(chain.leaf_key, revocation_message(manifest_id))


# --------------------------------------------------------------------------
# Merkle log


def _node(left: bytes, right: bytes) -> bytes:
    return _digest.digest(NODE_PREFIX + left + right)


def _split(n: int) -> int:
    """Largest power of two strictly less than n (n >= 2)."""
    return 1 << ((n - 1).bit_length() - 1)


class MerkleLog:
    """Leaves plus every complete power-of-two subtree hash, built incrementally."""

    def __init__(self):
        self._levels: list = [[]]

    def __len__(self) -> int:
        return len(self._levels[0])

    def append(self, leaf: bytes) -> None:
        self._levels[0].append(leaf)
        level = 0
        while len(self._levels[level]) % 2 == 0:
            row = self._levels[level]
            if len(self._levels) == level + 1:
                self._levels.append([])
            self._levels[level + 1].append(_node(row[-2], row[-1]))
            level += 1

    def leaf(self, index: int) -> bytes:
        return self._levels[0][index]

    def subtree(self, start: int, size: int) -> bytes:
        if size & (size - 1) == 0 and start % size == 0:
            level = size.bit_length() - 1
            return self._levels[level][start >> level]
        k = _split(size)
        return _node(self.subtree(start, k), self.subtree(start + k, size - k))

    def root(self, size: Optional[int] = None) -> bytes:
        size = len(self) if size is None else size
        if not 1 <= size <= len(self):
            raise RangeError(f"no tree of size {size} (log has {len(self)} leaves)")
        return self.subtree(0, size)

    def inclusion_path(self, index: int, size: int) -> list:
        if not 0 <= index < size <= len(self):
            raise RangeError(f"leaf {index} not in a tree of size {size}")
        path = []
        start = 0
        n = size
        while n > 1:
            k = _split(n)
            if index - start < k:
                path.append(self.subtree(start + k, n - k))
                n = k
            else:
                path.append(self.subtree(start, k))
                start += k
                n -= k
        path.reverse()
        return path


def reference_root(leaves: Sequence[bytes]) -> bytes:
    """Recursive tree hash straight from the definition (no caching)."""
    if len(leaves) == 1:
        return leaves[0]
    k = _split(len(leaves))
    return _node(reference_root(leaves[:k]), reference_root(leaves[k:]))


def fold_inclusion(leaf: bytes, index: int, size: int, path: Sequence[bytes]) -> Optional[bytes]:
    """Recompute the root from an audit path; None if the path has the wrong shape."""
    if not 0 <= index < size:
        return None
    fn, sn, r = index, size - 1, leaf
    for p in path:
        if sn == 0:
            return None
        if fn & 1 or fn == sn:
            r = _node(p, r)
            while not fn & 1 and fn != 0:
                fn >>= 1
                sn >>= 1
        else:
            r = _node(r, p)
        fn >>= 1
        sn >>= 1
    if sn != 0:
        return None
    return r


# --------------------------------------------------------------------------
# receipt verification


@dataclass(frozen=True)
class ReceiptCheck:
    ok: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.ok


def verify_receipt(receipt: Receipt, service_public_key) -> ReceiptCheck:
    """Check the receipt's own consistency: entry digest, path and root signature."""
    try:
        if receipt.entry.index != receipt.entry_index:
            return ReceiptCheck(False, "entry-index-mismatch")
        if receipt.entry.digest() != receipt.entry_digest:
            return ReceiptCheck(False, "entry-digest-mismatch")
        root = receipt.signed_root
        reached = fold_inclusion(receipt.entry_digest, receipt.entry_index, root.tree_size, receipt.inclusion_path)
        if reached is None:
            return ReceiptCheck(False, "malformed-path")
        if reached != root.root_hash:
            return ReceiptCheck(False, "path-does-not-reach-root")
        if not root.verify(service_public_key):
            return ReceiptCheck(False, "root-not-endorsed")
    except Exception as exc:  # malformed receipts never raise out of here
        return ReceiptCheck(False, f"malformed-receipt: {exc}")
    return ReceiptCheck(True)


def verify_receipt_offline(manifest: ManifestContainer, receipt: Receipt, service_public_key) -> ReceiptCheck:
    """Verify a registration receipt using only the manifest, the receipt and the service key."""
    try:
        core = manifest.core_manifest
        manifest_id = compute_manifest_id(core)
        entry = receipt.entry
        if entry.kind != EntryKind.REGISTRATION:
            return ReceiptCheck(False, "not-a-registration")
        if entry.manifest_id != manifest_id:
            return ReceiptCheck(False, "manifest-digest-mismatch")
        if entry.copyright != (core.work.copyright or ""):
            return ReceiptCheck(False, "copyright-mismatch")
        att = manifest.publisher_attestation
        if att is not None and att.pem_encoded_certificates:
            leaf = TrustChain.from_pem(att.pem_encoded_certificates).leaf
            if fingerprint(leaf) != entry.signer:
                return ReceiptCheck(False, "signer-mismatch")
            if not ecdsa_verify(leaf.public_key(), entry.publisher_signature,
                                registration_message(manifest_id, entry.copyright)):
                return ReceiptCheck(False, "publisher-signature-invalid")
    except Exception as exc:
        return ReceiptCheck(False, f"malformed-input: {exc}")
    return verify_receipt(receipt, service_public_key)


# --------------------------------------------------------------------------
# the ledger


class Ledger:
    """Single-node ledger; appends are serialized behind one lock.

    ``trust_policy`` (if given) is used to validate signer chains; without
    one, only the signature under the presented leaf and its EKU are checked.
    """

    def __init__(
        self,
        service_key: Optional[ec.EllipticCurvePrivateKey] = None,
        *,
        trust_policy: Optional[TrustPolicy] = None,
        path: Optional[str] = None,
        sign_every: int = DEFAULT_SIGN_EVERY,
        sign_interval: float = DEFAULT_SIGN_INTERVAL,
        auto_sign: bool = True,
        clock: Callable[[], datetime] = now_utc,
    ):
        self.service_key = service_key or ec.generate_private_key(ec.SECP256R1())
        self.trust_policy = trust_policy
        self.sign_every = sign_every
        self.sign_interval = sign_interval
        self.auto_sign = auto_sign
        self.clock = clock
        self._lock = threading.RLock()
        self._entries: list = []
        self._chains: list = []  # signer chain (PEM tuple) per entry
        self._log = MerkleLog()
        self._roots: list = []
        self._last_sign = time.monotonic()
        self._valid_chains: dict = {}
        self._chain_cache: dict = {}
        self._by_manifest: dict = {}
        self._path = path
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                self._replay(path)
            self._fh = open(path, "ab")

    # -- introspection

    @property
    def service_public_key(self):
        return self.service_key.public_key()

    @property
    def size(self) -> int:
        return len(self._entries)

    def __len__(self) -> int:
        return self.size

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def entry(self, index: int) -> LedgerEntry:
        return self._entries[index]

    def signer_chain(self, index: int) -> tuple:
        return self._chains[index]

    @property
    def latest_root(self) -> Optional[SignedTreeRoot]:
        return self._roots[-1] if self._roots else None

    @property
    def signed_roots(self) -> tuple:
        return tuple(self._roots)

    def root_at(self, size: int) -> bytes:
        return self._log.root(size)

    def indices_for(self, manifest_id: TypedDigest) -> list:
        return list(self._by_manifest.get(manifest_id.digest_value, ()))

    # -- appends

    def _chain_info(self, chain: TrustChain) -> tuple:
        """(leaf fingerprint, PEM tuple, leaf public key), memoized per chain object.

        Certificates hash slowly, so the memo is keyed by identity and holds
        a reference to the chain to keep the id from being reused.
        """
        hit = self._chain_cache.get(id(chain))
        if hit is not None and hit[0] is chain:
            return hit[1]
        info = (fingerprint(chain.leaf), tuple(chain.pem()), chain.leaf.public_key())
        self._chain_cache[id(chain)] = (chain, info)
        return info

    def _check_chain(self, chain: TrustChain, purpose: EkuPurpose) -> None:
        key = (self._chain_info(chain)[1], purpose)
        checked_at = self._valid_chains.get(key)
        if checked_at is not None and time.monotonic() - checked_at < CHAIN_CACHE_SECONDS:
            return
        if self.trust_policy is not None:
            verify_chain(chain, self.trust_policy, purpose)
        else:
            from ..pki import cert_purposes
            from ..errors import PurposeViolation

            if purpose not in cert_purposes(chain.leaf):
                raise PurposeViolation(f"{chain.name!r} lacks the {purpose.name} EKU")
        self._valid_chains[key] = time.monotonic()

    def _append(self, kind, manifest_id, copyright, signature, chain: TrustChain) -> int:
        with self._lock:
            signer, pems, _ = self._chain_info(chain)
            entry = LedgerEntry(
                index=len(self._entries), kind=kind, manifest_id=manifest_id, copyright=copyright,
                publisher_signature=signature, signer=signer, timestamp=self.clock(),
            )
            self._commit(entry, pems)
            if self._fh is not None:
                self._write_record({"entry": entry.cbor_tree(), "chain": list(pems)})
            if self.auto_sign:
                self._maybe_sign()
            return entry.index

    def _commit(self, entry: LedgerEntry, pems: tuple) -> None:
        self._entries.append(entry)
        self._chains.append(pems)
        self._log.append(entry.digest())
        self._by_manifest.setdefault(entry.manifest_id.digest_value, []).append(entry.index)

    def append_registration(
        self, manifest_id: TypedDigest, copyright: str, publisher_signature: bytes, publisher_chain: TrustChain
    ) -> int:
        try:
            self._check_chain(publisher_chain, EkuPurpose.MANIFEST_SIGNING)
        except TrustError as exc:
            raise RegistrationRejected(f"signer chain rejected: {exc}") from exc
        public_key = self._chain_info(publisher_chain)[2]
        if not ecdsa_verify(public_key, publisher_signature, registration_message(manifest_id, copyright)):
            raise RegistrationRejected("publisher signature does not verify over ManifestID || copyright")
        return self._append(EntryKind.REGISTRATION, manifest_id, copyright, publisher_signature, publisher_chain)

    def append_revocation(self, manifest_id: TypedDigest, revoker_signature: bytes, revoker_chain: TrustChain) -> int:
        """Record a revocation; the revoker must belong to the registering organization."""
        registrations = [i for i in self.indices_for(manifest_id)
                         if self._entries[i].kind == EntryKind.REGISTRATION]
        if not registrations:
            raise RegistrationRejected("no registration exists for this ManifestID")
        try:
            self._check_chain(revoker_chain, EkuPurpose.MANIFEST_SIGNING)
        except TrustError as exc:
            raise RegistrationRejected(f"revoker chain rejected: {exc}") from exc
        original = TrustChain.from_pem(self._chains[registrations[0]])
        if original.organization() != revoker_chain.organization():
            raise RegistrationRejected("revoker is not in the registering organization")
        if not ecdsa_verify(revoker_chain.leaf.public_key(), revoker_signature, revocation_message(manifest_id)):
            raise RegistrationRejected("revocation signature does not verify")
        return self._append(EntryKind.REVOCATION, manifest_id, "", revoker_signature, revoker_chain)

    def append_governance(self, action: str, subject: str, signature: bytes, member_chain: TrustChain) -> int:
        """Record a signed consortium action (member add/remove etc.) for audit."""
        try:
            self._check_chain(member_chain, EkuPurpose.LEDGER_REGISTRATION)
        except TrustError as exc:
            raise RegistrationRejected(f"member chain rejected: {exc}") from exc
        message = governance_message(action, subject)
        if not ecdsa_verify(member_chain.leaf.public_key(), signature, message):
            raise RegistrationRejected("governance signature does not verify")
        digest_id = TypedDigest("sha256", _digest.digest(message))
        return self._append(EntryKind.GOVERNANCE, digest_id, f"{action} {subject}", signature, member_chain)

    # -- roots and receipts

    def _maybe_sign(self) -> None:
        signed = self._roots[-1].tree_size if self._roots else 0
        pending = len(self._entries) - signed
        if pending >= self.sign_every or (
            pending and time.monotonic() - self._last_sign >= self.sign_interval
        ):
            self.sign_root()

    def sign_root(self) -> SignedTreeRoot:
        with self._lock:
            if not self._entries:
                raise EmptyLedger("cannot sign the root of an empty ledger")
            root = SignedTreeRoot(len(self._entries), self._log.root(), self.clock())
            root = replace(root, service_signature=ecdsa_sign(self.service_key, root.signed_bytes()))
            self._roots.append(root)
            self._last_sign = time.monotonic()
            if self._fh is not None:
                self._write_record({"root": codec.to_wire(root, "cbor")})
            return root

    def issue_receipt(self, index: int, root: Optional[SignedTreeRoot] = None) -> Receipt:
        root = root or self.latest_root
        if root is None or index >= root.tree_size:
            signed = root.tree_size if root else 0
            raise NotYetSigned(f"entry {index} is not covered by a signed root (signed size {signed})")
        if index < 0:
            raise RangeError(f"negative entry index {index}")
        entry = self._entries[index]
        path = self._log.inclusion_path(index, root.tree_size)
        return Receipt(index, self._log.leaf(index), tuple(path), root, entry)

    def receipt_now(self, index: int) -> Receipt:
        """Receipt for ``index``, signing a fresh root first if needed."""
        with self._lock:
            root = self.latest_root
            if root is None or index >= root.tree_size:
                root = self.sign_root()
            return self.issue_receipt(index, root)

    def is_revoked(self, manifest_id: TypedDigest) -> bool:
        return any(self._entries[i].kind == EntryKind.REVOCATION for i in self.indices_for(manifest_id))

    # -- persistence

    def _write_record(self, record: dict) -> None:
        data = codec.cbor_dumps(record)
        self._fh.write(struct.pack(">I", len(data)) + data)
        self._fh.flush()

    def _replay(self, path: str) -> None:
        with open(path, "rb") as fh:
            blob = fh.read()
        offset = 0
        while offset < len(blob):
            if len(blob) - offset < 4:
                raise EOFError(f"truncated ledger record header at offset {offset}")
            (length,) = struct.unpack_from(">I", blob, offset)
            offset += 4
            record = codec.cbor_loads(blob[offset : offset + length])
            offset += length
            if "entry" in record:
                entry = codec.from_wire(LedgerEntry, record["entry"], "cbor")
                if entry.index != len(self._entries):
                    raise ValueError(f"ledger file out of order at entry {entry.index}")
                self._commit(entry, tuple(record["chain"]))
            else:
                root = codec.from_wire(SignedTreeRoot, record["root"], "cbor")
                if self._log.root(root.tree_size) != root.root_hash:
                    raise ValueError(f"persisted root for size {root.tree_size} does not match the log")
                self._roots.append(root)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
