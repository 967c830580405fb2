"""Manifest data model.

Attribute names are snake_case; the wire names (``SerialNumber``,
``MediaID``...) are derived in :mod:`amp.codec`. All records are frozen
and sequences are stored as tuples, so structural equality is plain ``==``.
"""

from __future__ import annotations

import enum
import secrets
from dataclasses import dataclass, field, fields, is_dataclass, replace
from datetime import datetime, timezone
from typing import Optional, Sequence, Union

from . import digest as _digest
from .errors import InvalidArgument, ManifestError, UnsupportedAlgorithm

MANIFEST_VERSION = 1
SERIAL_NUMBER_BYTES = 16


class FacsimileType(enum.IntEnum):
    UNKNOWN = 0
    MUXED_AV = 1
    VIDEO = 2
    AUDIO = 3
    IMAGE = 4
    TEXT = 5


class DerivationSort(enum.IntEnum):
    TRANSCODED = 1
    COMPLETE_COPY = 2
    PARTIAL_COPY = 3
    EDITED_COPY = 4


class ChunkingScheme(enum.IntEnum):
    SIMPLE_CHUNK_LIST = 1
    ISO_BOX = 2
    MERKLE_TREE = 3


def utc_ms(value: datetime) -> datetime:
    """Normalize to an aware UTC datetime truncated to whole milliseconds.

    Both codecs carry millisecond precision, so anything finer would not
    survive a round trip.
    """
    if value.tzinfo is None:
        raise ManifestError("timestamps must be timezone-aware")
    value = value.astimezone(timezone.utc)
    return value.replace(microsecond=(value.microsecond // 1000) * 1000)


def now_utc() -> datetime:
    return utc_ms(datetime.now(timezone.utc))


class _Record:
    """Mixin: normalizes timestamps and list fields after construction."""

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                object.__setattr__(self, f.name, tuple(value))
            elif isinstance(value, datetime):
                object.__setattr__(self, f.name, utc_ms(value))


@dataclass(frozen=True)
class TypedDigest(_Record):
    digest_algorithm: str
    digest_value: bytes

    def hex(self) -> str:
        return self.digest_value.hex()


@dataclass(frozen=True)
class OtherClaims(_Record):
    claim_sort: str
    embedded_claims: Optional[str] = None
    external_claims: Optional[str] = None
    external_claims_digest: Optional[bytes] = None


@dataclass(frozen=True)
class PublisherInfo(_Record):
    name: str
    other_info: Optional[str] = None
    additional_claims: Optional[tuple[OtherClaims, ...]] = None


@dataclass(frozen=True)
class WorkInfo(_Record):
    title: str
    title2: Optional[str] = None
    other_info: Optional[str] = None
    copyright: Optional[str] = None
    creation_time: Optional[datetime] = None
    master_copy_locator: Optional[str] = None
    duration: Optional[int] = None  # 100 ns units
    additional_claims: Optional[tuple[OtherClaims, ...]] = None


@dataclass(frozen=True)
class ManifestReference(_Record):
    manifest_id: TypedDigest
    version: int = MANIFEST_VERSION
    manifest_locator: Optional[str] = None


@dataclass(frozen=True)
class SourceWork(_Record):
    origin_manifest: ManifestReference
    derivation_type: DerivationSort
    additional_claims: Optional[tuple[OtherClaims, ...]] = None


@dataclass(frozen=True)
class SourceWorkInfo(_Record):
    origin_manifests: tuple[SourceWork, ...]


@dataclass(frozen=True)
class SimpleChunkListAuthenticator(_Record):
    chunk_size: int
    num_chunks: int
    chunk_digest: tuple[bytes, ...]
    chunking_scheme: int = ChunkingScheme.SIMPLE_CHUNK_LIST


@dataclass(frozen=True)
class IsoBoxAuthenticator(_Record):
    num_chunks: int
    chunk_digest: tuple[bytes, ...]
    chunking_scheme: int = ChunkingScheme.ISO_BOX


@dataclass(frozen=True)
class MerkleTreeAuthenticator(_Record):
    encoded_row: int
    num_chunks: int
    chunk_digest: tuple[bytes, ...]
    chunking_scheme: int = ChunkingScheme.MERKLE_TREE


ChunkAuthenticator = Union[
    SimpleChunkListAuthenticator, IsoBoxAuthenticator, MerkleTreeAuthenticator
]

AUTHENTICATOR_TYPES = {
    ChunkingScheme.SIMPLE_CHUNK_LIST: SimpleChunkListAuthenticator,
    ChunkingScheme.ISO_BOX: IsoBoxAuthenticator,
    ChunkingScheme.MERKLE_TREE: MerkleTreeAuthenticator,
}


@dataclass(frozen=True)
class FacsimileDescriptor(_Record):
    facsimile_major_type: FacsimileType
    container_type: str
    encoding_information: str
    length: int
    object_digest: bytes
    encoding_information2: Optional[str] = None
    facsimile_locator: Optional[str] = None
    # stored and round-tripped, never interpreted
    object_containers: Optional[str] = None
    additional_claims: Optional[tuple[OtherClaims, ...]] = None
    chunk_data: Optional[tuple[ChunkAuthenticator, ...]] = None


@dataclass(frozen=True)
class TaggedFacsimileDescriptor(_Record):
    index: int
    facsimile: FacsimileDescriptor


@dataclass(frozen=True)
class FacsimileInformation(_Record):
    records: tuple[TaggedFacsimileDescriptor, ...]
    version: int = MANIFEST_VERSION


@dataclass(frozen=True)
class ManifestCore(_Record):
    serial_number: bytes
    digest_algorithm: str
    media_id: bytes
    creation_time: datetime
    publisher: PublisherInfo
    work: WorkInfo
    facsimile_info_digests: tuple[bytes, ...]
    origin_manifests: Optional[SourceWorkInfo] = None
    version: int = MANIFEST_VERSION


@dataclass(frozen=True)
class PublisherAttestation(_Record):
    cose_signature_token: Optional[bytes] = None
    json_web_token: Optional[str] = None
    # ordered root -> leaf
    pem_encoded_certificates: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class LedgerAttestation(_Record):
    ledger_attestation_value: Optional[str] = None


@dataclass(frozen=True)
class ManifestContainer(_Record):
    core_manifest: ManifestCore
    facsimile_info: FacsimileInformation
    publisher_attestation: Optional[PublisherAttestation] = None
    ledger_attestation: Optional[LedgerAttestation] = None
    manifest_locator: Optional[str] = None
    version: int = MANIFEST_VERSION

    def facsimile(self, index: int) -> FacsimileDescriptor:
        for rec in self.facsimile_info.records:
            if rec.index == index:
                return rec.facsimile
        raise KeyError(index)


# --------------------------------------------------------------------------
# structural checks


def _walk_digests(obj, path="") -> list[tuple[str, bytes]]:
    """Every untyped digest in a record, with a dotted path for messages."""
    found = []
    if isinstance(obj, TypedDigest):
        return found
    if isinstance(obj, (SimpleChunkListAuthenticator, IsoBoxAuthenticator, MerkleTreeAuthenticator)):
        for i, d in enumerate(obj.chunk_digest):
            found.append((f"{path}.chunk_digest[{i}]", d))
        return found
    if isinstance(obj, FacsimileDescriptor):
        found.append((f"{path}.object_digest", obj.object_digest))
    if isinstance(obj, OtherClaims) and obj.external_claims_digest is not None:
        found.append((f"{path}.external_claims_digest", obj.external_claims_digest))
    if isinstance(obj, ManifestCore):
        for i, d in enumerate(obj.facsimile_info_digests):
            found.append((f"{path}.facsimile_info_digests[{i}]", d))
    if is_dataclass(obj):
        for f in fields(obj):
            if f.name in ("facsimile_info_digests", "object_digest", "external_claims_digest"):
                continue
            found.extend(_walk_digests(getattr(obj, f.name), f"{path}.{f.name}"))
    elif isinstance(obj, tuple):
        for i, item in enumerate(obj):
            found.extend(_walk_digests(item, f"{path}[{i}]"))
    return found


def _typed_digests(obj) -> list[TypedDigest]:
    if isinstance(obj, TypedDigest):
        return [obj]
    out = []
    if is_dataclass(obj):
        for f in fields(obj):
            out.extend(_typed_digests(getattr(obj, f.name)))
    elif isinstance(obj, tuple):
        for item in obj:
            out.extend(_typed_digests(item))
    return out


def _check_claims(claims, where):
    for c in claims or ():
        if not c.claim_sort:
            raise ManifestError(f"{where}: ClaimSort must be non-empty")
        if c.embedded_claims is None and c.external_claims is None:
            raise ManifestError(f"{where}: OtherClaims needs EmbeddedClaims or ExternalClaims")
        if c.external_claims_digest is not None and c.external_claims is None:
            raise ManifestError(f"{where}: ExternalClaimsDigest without ExternalClaims")


def check_typed_digest(td: TypedDigest) -> None:
    if td.digest_algorithm != td.digest_algorithm.lower() or not td.digest_algorithm.isascii():
        raise ManifestError(f"digest algorithm name must be lowercase ASCII: {td.digest_algorithm!r}")
    size = _digest.digest_size(td.digest_algorithm)
    if len(td.digest_value) != size:
        raise ManifestError(
            f"{td.digest_algorithm} digest must be {size} bytes, got {len(td.digest_value)}"
        )


def check_authenticator(auth: ChunkAuthenticator) -> None:
    if not isinstance(auth, tuple(AUTHENTICATOR_TYPES.values())):
        raise ManifestError(f"unknown chunk authenticator {type(auth).__name__}")
    expected = {
        SimpleChunkListAuthenticator: ChunkingScheme.SIMPLE_CHUNK_LIST,
        IsoBoxAuthenticator: ChunkingScheme.ISO_BOX,
        MerkleTreeAuthenticator: ChunkingScheme.MERKLE_TREE,
    }[type(auth)]
    if auth.chunking_scheme != expected:
        raise ManifestError(f"{type(auth).__name__} must carry ChunkingScheme {int(expected)}")
    if auth.num_chunks < 0:
        raise ManifestError("NumChunks must be >= 0")
    if isinstance(auth, MerkleTreeAuthenticator):
        if auth.num_chunks < 1:
            raise ManifestError("MerkleTreeAuthenticator needs NumChunks >= 1")
        if auth.encoded_row < -1:
            raise ManifestError("EncodedRow must be >= -1")
        if not auth.chunk_digest:
            raise ManifestError("MerkleTreeAuthenticator encodes no hashes")
    else:
        if len(auth.chunk_digest) != auth.num_chunks:
            raise ManifestError("len(ChunkDigest) != NumChunks")
    if isinstance(auth, SimpleChunkListAuthenticator) and auth.chunk_size <= 0:
        raise ManifestError("ChunkSize must be > 0")
    if len({len(d) for d in auth.chunk_digest}) > 1:
        raise ManifestError("chunk digests differ in length")


def check_facsimile(desc: FacsimileDescriptor) -> None:
    if not isinstance(desc.facsimile_major_type, FacsimileType):
        raise ManifestError(f"bad FacsimileMajorType {desc.facsimile_major_type!r}")
    if desc.length < 0:
        raise ManifestError("Length must be >= 0")
    _check_claims(desc.additional_claims, "FacsimileDescriptor")
    for auth in desc.chunk_data or ():
        check_authenticator(auth)


def check_core(core: ManifestCore) -> None:
    if core.version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported ManifestCore version {core.version}")
    if not _digest.is_supported(core.digest_algorithm):
        raise UnsupportedAlgorithm(f"unsupported digest algorithm {core.digest_algorithm!r}")
    if len(core.serial_number) < SERIAL_NUMBER_BYTES:
        raise ManifestError("SerialNumber must be at least 16 bytes")
    if not core.facsimile_info_digests:
        raise ManifestError("FacsimileInfoDigests must be non-empty")
    if not core.publisher.name:
        raise ManifestError("PublisherInfo.Name must be non-empty")
    if not core.work.title:
        raise ManifestError("WorkInfo.Title must be non-empty")
    if core.work.duration is not None and core.work.duration < 0:
        raise ManifestError("WorkInfo.Duration must be >= 0")
    _check_claims(core.publisher.additional_claims, "PublisherInfo")
    _check_claims(core.work.additional_claims, "WorkInfo")
    if core.origin_manifests is not None:
        if not core.origin_manifests.origin_manifests:
            raise ManifestError("SourceWorkInfo.OriginManifests must be non-empty")
        for sw in core.origin_manifests.origin_manifests:
            if not isinstance(sw.derivation_type, DerivationSort):
                raise ManifestError(f"bad DerivationType {sw.derivation_type!r}")
            _check_claims(sw.additional_claims, "SourceWork")
    for td in _typed_digests(core):
        check_typed_digest(td)
    size = _digest.digest_size(core.digest_algorithm)
    for where, d in _walk_digests(core):
        if len(d) != size:
            raise ManifestError(f"{where}: expected {size}-byte {core.digest_algorithm} digest")


def check_container(container: ManifestContainer) -> None:
    check_core(container.core_manifest)
    size = _digest.digest_size(container.core_manifest.digest_algorithm)
    for rec in container.facsimile_info.records:
        check_facsimile(rec.facsimile)
        for where, d in _walk_digests(rec.facsimile, f"Records[{rec.index}]"):
            if len(d) != size:
                raise ManifestError(f"{where}: expected {size}-byte digest")
    att = container.publisher_attestation
    if att is not None and att.cose_signature_token is None and att.json_web_token is None:
        raise ManifestError("PublisherAttestation carries no signature token")


def check(record) -> None:
    """Raise :class:`ManifestError` if ``record`` is structurally invalid."""
    if isinstance(record, ManifestContainer):
        check_container(record)
    elif isinstance(record, ManifestCore):
        check_core(record)
    elif isinstance(record, FacsimileDescriptor):
        check_facsimile(record)
    elif isinstance(record, TypedDigest):
        check_typed_digest(record)


# --------------------------------------------------------------------------
# operations


def compute_manifest_id(core: ManifestCore) -> TypedDigest:
    from .codec import encode_canonical_cbor

    value = _digest.digest(encode_canonical_cbor(core), core.digest_algorithm)
    return TypedDigest(core.digest_algorithm, value)


def facsimile_digest(desc: FacsimileDescriptor, algorithm: str = _digest.DEFAULT_ALGORITHM) -> bytes:
    from .codec import encode_canonical_cbor

    return _digest.digest(encode_canonical_cbor(desc), algorithm)


@dataclass
class ValidationIssue:
    kind: str
    message: str
    index: Optional[int] = None


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)
    facsimiles: dict = field(default_factory=dict)  # Index -> digest matches

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, kind, message, index=None):
        self.issues.append(ValidationIssue(kind, message, index))


def validate_container(container: ManifestContainer) -> ValidationReport:
    """Check every tagged facsimile against ``FacsimileInfoDigests``.

    Never raises; all failures are collected in the report.
    """
    report = ValidationReport()
    core = container.core_manifest
    try:
        check_core(core)
    except ManifestError as exc:
        report.add("structure", str(exc))
    if container.version != MANIFEST_VERSION:
        report.add("version", f"ManifestContainer version {container.version}")
    if container.facsimile_info.version != MANIFEST_VERSION:
        report.add("version", f"FacsimileInformation version {container.facsimile_info.version}")
    algorithm = core.digest_algorithm if _digest.is_supported(core.digest_algorithm) else None
    seen = set()
    n = len(core.facsimile_info_digests)
    for rec in container.facsimile_info.records:
        if rec.index in seen:
            report.add("duplicate-index", f"Index {rec.index} tagged twice", rec.index)
        seen.add(rec.index)
        if not 0 <= rec.index < n:
            report.add("range", f"Index {rec.index} outside FacsimileInfoDigests[0..{n})", rec.index)
            report.facsimiles[rec.index] = False
            continue
        try:
            check_facsimile(rec.facsimile)
        except ManifestError as exc:
            report.add("structure", str(exc), rec.index)
        if algorithm is None:
            report.facsimiles[rec.index] = False
            continue
        try:
            matches = facsimile_digest(rec.facsimile, algorithm) == core.facsimile_info_digests[rec.index]
        except Exception as exc:  # unencodable descriptor
            report.add("encoding", str(exc), rec.index)
            matches = False
        else:
            if not matches:
                report.add("digest-mismatch", f"facsimile {rec.index} digest mismatch", rec.index)
        report.facsimiles[rec.index] = matches
    return report


def new_serial_number(rng=None) -> bytes:
    if rng is None:
        return secrets.token_bytes(SERIAL_NUMBER_BYTES)
    return rng.randbytes(SERIAL_NUMBER_BYTES)


def build_manifest(
    publisher: PublisherInfo,
    work: WorkInfo,
    facsimiles: Sequence[FacsimileDescriptor],
    origins: Optional[SourceWorkInfo] = None,
    *,
    media_id: Optional[bytes] = None,
    digest_algorithm: str = _digest.DEFAULT_ALGORITHM,
    creation_time: Optional[datetime] = None,
    rng=None,
) -> ManifestContainer:
    """Assemble an unsigned container binding ``facsimiles`` to one core.

    ``rng`` (a :class:`random.Random`) makes SerialNumber and MediaID
    reproducible; without it both come from :mod:`secrets`.
    """
    facsimiles = list(facsimiles)
    if not facsimiles:
        raise InvalidArgument("build_manifest needs at least one facsimile")
    _digest.digest_size(digest_algorithm)
    for desc in facsimiles:
        check_facsimile(desc)
    if media_id is None:
        media_id = new_serial_number(rng)
    core = ManifestCore(
        serial_number=new_serial_number(rng),
        digest_algorithm=digest_algorithm,
        media_id=media_id,
        creation_time=creation_time or now_utc(),
        publisher=publisher,
        work=work,
        facsimile_info_digests=tuple(facsimile_digest(d, digest_algorithm) for d in facsimiles),
        origin_manifests=origins,
    )
    check_core(core)
    info = FacsimileInformation(
        records=tuple(TaggedFacsimileDescriptor(i, d) for i, d in enumerate(facsimiles))
    )
    return ManifestContainer(core_manifest=core, facsimile_info=info)


def with_attestation(container: ManifestContainer, **changes) -> ManifestContainer:
    return replace(container, **changes)
