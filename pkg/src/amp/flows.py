"""End-to-end publish and playback-verification flows."""

from __future__ import annotations

import enum
import io
import os
import random
import secrets
import wave
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from . import codec
from . import digest as _digest
from .chunking import DEFAULT_CHUNK_SIZE, chunk_simple, default_encoded_row, merkle_authenticator, merkle_build
from .errors import AmpError, InvalidArgument, NoBinding, ResolutionError, StageError, TrustError
from .ledger.log import Receipt, sign_registration, verify_receipt, verify_receipt_offline
from .manifest import (
    DerivationSort,
    FacsimileDescriptor,
    FacsimileType,
    LedgerAttestation,
    ManifestContainer,
    ManifestReference,
    PublisherInfo,
    SimpleChunkListAuthenticator,
    SourceWork,
    SourceWorkInfo,
    TypedDigest,
    WorkInfo,
    build_manifest,
    compute_manifest_id,
)
from .mp4 import extract_iso_chunks, inject_evidence, is_fragmented_mp4, parse_boxes, verify_fmp4_stream
from .pki import TrustChain, TrustPolicy
from .signing import sign_container, verify_publisher_attestation

MEDIA_ID_BYTES = 16
MANIFEST_SUFFIX = ".amp.cbor"
RECEIPT_SUFFIX = ".receipt.cbor"

_IMAGE_TYPES = {".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".png": "image/png", ".gif": "image/gif"}


class Status(enum.Enum):
    AUTHENTICATED = "Authenticated"
    UNVERIFIED = "Unverified"
    TAMPERED = "Tampered"
    REVOKED = "Revoked"
    WATERMARK_FALLBACK = "WatermarkFallback"


EXIT_CODES = {
    Status.AUTHENTICATED: 0,
    Status.UNVERIFIED: 2,
    Status.TAMPERED: 3,
    Status.REVOKED: 4,
    Status.WATERMARK_FALLBACK: 5,
}


@dataclass
class VerificationReport:
    media_path: str
    status: Status
    publisher: Optional[str] = None
    manifest_id: Optional[TypedDigest] = None
    failing_chunks: list = field(default_factory=list)
    receipt_checked: bool = False
    route: Optional[str] = None  # object-digest | chunk-digest | sidecar | watermark
    media_id: Optional[bytes] = None
    notes: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def to_dict(self) -> dict:
        return {
            "media_path": self.media_path,
            "status": self.status.value,
            "publisher": self.publisher,
            "manifest_id": self.manifest_id.digest_value.hex() if self.manifest_id else None,
            "failing_chunks": list(self.failing_chunks),
            "receipt_checked": self.receipt_checked,
            "route": self.route,
            "media_id": self.media_id.hex() if self.media_id else None,
            "notes": list(self.notes),
        }


# --------------------------------------------------------------------------
# describing media


@dataclass(frozen=True)
class PreparedMedia:
    """A facsimile descriptor plus the bytes that will actually be distributed."""

    source_path: str
    output_bytes: bytes
    output_name: str
    descriptor: FacsimileDescriptor


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def describe_fmp4(data: bytes, index: int, *, encoded_row: Optional[int], algorithm: str) -> tuple:
    """Chunk an fMP4, inject per-chunk evidence, and describe the injected copy."""
    tree_boxes = parse_boxes(data)
    chunks, iso_auth = extract_iso_chunks(tree_boxes, data, algorithm)
    if not chunks:
        raise InvalidArgument("fragmented MP4 has no moof/mdat pairs")
    tree = merkle_build([c.digest for c in chunks], algorithm)
    row = default_encoded_row(len(chunks)) if encoded_row is None else encoded_row
    merkle = merkle_authenticator(tree, row)
    injected = inject_evidence(data, tree, row, hash_tree_id=index)
    desc = FacsimileDescriptor(
        facsimile_major_type=FacsimileType.VIDEO,
        container_type="video/mp4",
        encoding_information="fragmented ISO BMFF",
        length=len(injected),
        object_digest=_digest.digest(injected, algorithm),
        chunk_data=(iso_auth, merkle),
    )
    return injected, desc


def describe_bytes(data: bytes, name: str, *, chunk_size: int, algorithm: str) -> FacsimileDescriptor:
    ext = os.path.splitext(name)[1].lower()
    if ext in _IMAGE_TYPES:
        return FacsimileDescriptor(FacsimileType.IMAGE, _IMAGE_TYPES[ext], "still image", len(data),
                                   _digest.digest(data, algorithm))
    if ext == ".wav":
        major, ctype, enc = FacsimileType.AUDIO, "audio/wav", "PCM 16-bit"
    elif ext == ".txt":
        major, ctype, enc = FacsimileType.TEXT, "text/plain", "utf-8"
    else:
        major, ctype, enc = FacsimileType.UNKNOWN, "application/octet-stream", "opaque"
    chunks = chunk_simple(io.BytesIO(data), chunk_size, algorithm) if data else None
    return FacsimileDescriptor(major, ctype, enc, len(data), _digest.digest(data, algorithm),
                               chunk_data=(chunks,) if chunks else None)


def _output_name(path: str, tag: str = "amp") -> str:
    stem, ext = os.path.splitext(os.path.basename(path))
    return f"{stem}.{tag}{ext}"


def prepare_media(
    paths: Sequence[str],
    *,
    media_id: bytes,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    encoded_row: Optional[int] = None,
    algorithm: str = _digest.DEFAULT_ALGORITHM,
    watermark_chain: Optional[TrustChain] = None,
    locator: Optional[str] = None,
) -> list:
    prepared = []
    for index, path in enumerate(paths):
        with open(path, "rb") as fh:
            data = fh.read()
        if is_fragmented_mp4(data):
            out, desc = describe_fmp4(data, index, encoded_row=encoded_row, algorithm=algorithm)
        else:
            out = data
            if watermark_chain is not None and path.lower().endswith(".wav"):
                out = _watermark_wav(data, media_id, locator or "", watermark_chain)
            desc = describe_bytes(out, path, chunk_size=chunk_size, algorithm=algorithm)
        if out is not data:
            desc = replace(desc, facsimile_locator=_output_name(path))
        prepared.append(PreparedMedia(path, out, _output_name(path) if out is not data else os.path.basename(path),
                                      desc))
    return prepared


def _watermark_wav(data: bytes, media_id: bytes, locator: str, chain: TrustChain) -> bytes:
    from . import watermark as wm

    with wave.open(io.BytesIO(data), "rb") as w:
        if w.getnchannels() != 1:
            raise InvalidArgument("watermarking needs mono 16-bit PCM")
    samples, rate = wm.read_wav(io.BytesIO(data))
    _payload, bits = wm.build_payload(media_id, locator, chain)
    marked = wm.embed_pcm(samples, bits).samples
    buf = io.BytesIO()
    wm.write_wav(buf, marked, rate)
    return buf.getvalue()


# --------------------------------------------------------------------------
# publishing


@dataclass
class PublishResult:
    container: ManifestContainer
    receipt: Receipt
    manifest_id: TypedDigest
    outputs: dict  # name -> path written (manifest, receipt, media copies)
    media: list  # PreparedMedia


def origin_reference(origin: ManifestContainer) -> SourceWorkInfo:
    ref = ManifestReference(compute_manifest_id(origin.core_manifest), manifest_locator=origin.manifest_locator)
    return SourceWorkInfo((SourceWork(ref, DerivationSort.TRANSCODED),))


def create_manifest(
    paths: Sequence[str],
    *,
    publisher: str,
    title: str,
    copyright: Optional[str] = None,
    locator: Optional[str] = None,
    origin: Optional[ManifestContainer] = None,
    media_id: Optional[bytes] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    encoded_row: Optional[int] = None,
    watermark_chain: Optional[TrustChain] = None,
    rng: Optional[random.Random] = None,
    creation_time=None,
) -> tuple:
    """Unsigned container plus the prepared media; nothing is registered."""
    if not paths:
        raise InvalidArgument("no media files given")
    if media_id is None:
        media_id = rng.randbytes(MEDIA_ID_BYTES) if rng is not None else secrets.token_bytes(MEDIA_ID_BYTES)
    media = _stage("chunk", prepare_media, paths, media_id=media_id, chunk_size=chunk_size,
                   encoded_row=encoded_row, watermark_chain=watermark_chain, locator=locator)
    work = WorkInfo(title=title, copyright=copyright, master_copy_locator=locator)
    container = _stage(
        "build", build_manifest, PublisherInfo(publisher), work, [m.descriptor for m in media],
        origin_reference(origin) if origin is not None else None, media_id=media_id, rng=rng,
        creation_time=creation_time,
    )
    return container, media


def register_container(container: ManifestContainer, chain: TrustChain, service) -> tuple:
    """Register a signed container; returns (container with ledger attestation, receipt)."""
    mid = compute_manifest_id(container.core_manifest)
    copyright = container.core_manifest.work.copyright or ""
    sig = sign_registration(chain, mid, copyright)
    _mid, receipt = _stage("register", service.register, container, ledger_signature=sig)
    attested = replace(container, ledger_attestation=LedgerAttestation(receipt.to_attestation_value()))
    return attested, receipt


def publish_flow(
    paths: Sequence[str],
    chain: TrustChain,
    service,
    *,
    outdir: str,
    publisher: Optional[str] = None,
    title: Optional[str] = None,
    copyright: Optional[str] = None,
    locator: Optional[str] = None,
    origin: Optional[ManifestContainer] = None,
    media_id: Optional[bytes] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    encoded_row: Optional[int] = None,
    watermark: bool = False,
    rng: Optional[random.Random] = None,
    creation_time=None,
) -> PublishResult:
    os.makedirs(outdir, exist_ok=True)
    container, media = create_manifest(
        paths, publisher=publisher or chain.name, title=title or os.path.basename(paths[0]), copyright=copyright,
        locator=locator, origin=origin, media_id=media_id, chunk_size=chunk_size, encoded_row=encoded_row,
        watermark_chain=chain if watermark else None, rng=rng, creation_time=creation_time,
    )
    signed = _stage("sign", sign_container, container, chain)
    attested, receipt = register_container(signed, chain, service)
    stem = os.path.splitext(os.path.basename(paths[0]))[0]
    outputs = {}
    for m in media:
        if m.output_bytes is not None and m.output_name != os.path.basename(m.source_path):
            p = os.path.join(outdir, m.output_name)
            with open(p, "wb") as fh:
                fh.write(m.output_bytes)
            outputs[m.output_name] = p
    manifest_path = os.path.join(outdir, stem + MANIFEST_SUFFIX)
    receipt_path = os.path.join(outdir, stem + RECEIPT_SUFFIX)
    codec.save_manifest(attested, manifest_path)
    with open(receipt_path, "wb") as fh:
        fh.write(receipt.to_cbor())
    outputs["manifest"] = manifest_path
    outputs["receipt"] = receipt_path
    return PublishResult(attested, receipt, compute_manifest_id(attested.core_manifest), outputs, media)


# --------------------------------------------------------------------------
# playback


def _check_candidate(match, policy: TrustPolicy, service_key, report: VerificationReport) -> bool:
    """Attestation and offline receipt check; records the outcome on ``report``."""
    try:
        identity = verify_publisher_attestation(match.container, policy)
    except TrustError as exc:
        report.notes.append(f"publisher attestation rejected: {exc}")
        return False
    check = verify_receipt_offline(match.container, match.receipt, service_key)
    if not check:
        report.notes.append(f"receipt rejected: {check.reason}")
        return False
    report.publisher = identity.name
    report.manifest_id = compute_manifest_id(match.container.core_manifest)
    report.media_id = match.container.core_manifest.media_id
    report.receipt_checked = True
    return True


def _revocation_proven(match, service_key) -> bool:
    ev = getattr(match, "revocation", None)
    return bool(match.revoked and ev is not None and verify_receipt(ev, service_key)
                and ev.entry.manifest_id == match.manifest_id)


def _settle(report: VerificationReport, match, policy, service_key, route: str) -> bool:
    """Try one candidate; True if ``report`` is final."""
    if not _check_candidate(match, policy, service_key, report):
        return False
    report.route = route
    if match.revoked:
        # a revocation claim is honored either way; unproven ones are flagged
        if not _revocation_proven(match, service_key):
            report.notes.append("service flags the manifest revoked without verifiable evidence")
        report.status = Status.REVOKED
        return True
    report.status = Status.AUTHENTICATED
    return True


def _chunk_candidates(service, digests: Sequence[bytes]) -> list:
    """Records hit by any of ``digests``, most hits first, then oldest."""
    votes, first_seen, by_id = {}, {}, {}
    for d in dict.fromkeys(digests):
        for m in service.query_chunk_digest([d], include_revoked=True):
            key = m.manifest_id.digest_value
            votes[key] = votes.get(key, 0) + 1
            first_seen.setdefault(key, len(first_seen))
            by_id[key] = m
    order = sorted(votes, key=lambda k: (-votes[k], first_seen[k]))
    return [by_id[k] for k in order]


def _verify_chunks(data: bytes, match, path: str, is_mp4: bool) -> tuple:
    """(failing chunk indices, covered) for ``data`` against the candidate manifest."""
    container = match.container
    if is_mp4:
        verdicts = verify_fmp4_stream(data, container, match.facsimile_index)
        failing = [v.index for v in verdicts if not v.ok]
        expected = _expected_chunk_count(container, match.facsimile_index)
        if expected is not None and len(verdicts) != expected:
            failing.append(min(len(verdicts), expected))
        return sorted(set(failing)), True
    for rec in container.facsimile_info.records:
        if match.facsimile_index is not None and rec.index != match.facsimile_index:
            continue
        for auth in rec.facsimile.chunk_data or ():
            if isinstance(auth, SimpleChunkListAuthenticator):
                got = chunk_simple(io.BytesIO(data), auth.chunk_size, container.core_manifest.digest_algorithm)
                failing = [i for i in range(max(auth.num_chunks, got.num_chunks))
                           if i >= got.num_chunks or i >= auth.num_chunks or got.chunk_digest[i] != auth.chunk_digest[i]]
                return failing, True
    return [], False


def _expected_chunk_count(container, facsimile_index) -> Optional[int]:
    for rec in container.facsimile_info.records:
        if facsimile_index is None or rec.index == facsimile_index:
            for auth in rec.facsimile.chunk_data or ():
                return auth.num_chunks
    return None


def _stream_chunk_digests(data: bytes, is_mp4: bool) -> list:
    if is_mp4:
        try:
            chunks, _ = extract_iso_chunks(parse_boxes(data), data)
        except AmpError:
            return []
        return [c.digest for c in chunks]
    return list(chunk_simple(io.BytesIO(data), DEFAULT_CHUNK_SIZE).chunk_digest) if data else []


def service_cert_resolver(service, media_id: bytes) -> Callable:
    """Resolve a MasterCopyLocator to the signer of a manifest for ``media_id`` that names it."""

    def resolve(locator: str):
        # revoked manifests still vouch for who signed; the verdict reports the revocation
        for m in service.query_media_id(media_id, include_revoked=True):
            work = m.container.core_manifest.work
            att = m.container.publisher_attestation
            if work.master_copy_locator == locator and att and att.pem_encoded_certificates:
                return TrustChain.from_pem(att.pem_encoded_certificates).leaf
        raise ResolutionError(f"no manifest for this MediaID names locator {locator!r}")

    return resolve


def playback_verify_flow(
    media_path: str,
    service,
    policy: TrustPolicy,
    *,
    service_key=None,
    sidecar: Optional[str] = None,
    cert_resolver: Optional[Callable[[str], object]] = None,
) -> VerificationReport:
    report = VerificationReport(media_path, Status.UNVERIFIED)
    try:
        with open(media_path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        report.notes.append(f"cannot read media: {exc}")
        return report
    try:
        service_key = service_key or service.public_key()
        return _playback(data, media_path, service, policy, service_key, sidecar, cert_resolver, report)
    except AmpError as exc:
        report.status = Status.UNVERIFIED
        report.notes.append(f"{type(exc).__name__}: {exc}")
        return report


def _playback(data, media_path, service, policy, service_key, sidecar, cert_resolver, report):
    # 1. exact object digest
    digest = _digest.digest(data)
    for match in service.query_object_digest(digest, include_revoked=True):
        if _settle(report, match, policy, service_key, "object-digest"):
            return report

    # 2. chunk digests
    is_mp4 = is_fragmented_mp4(data)
    digests = _stream_chunk_digests(data, is_mp4)
    for match in _chunk_candidates(service, digests):
        try:
            failing, covered = _verify_chunks(data, match, media_path, is_mp4)
        except (AmpError, NoBinding) as exc:
            report.notes.append(f"chunk verification failed: {exc}")
            continue
        if not covered or not _settle(report, match, policy, service_key, "chunk-digest"):
            continue
        if report.status is Status.AUTHENTICATED and failing:
            report.status = Status.TAMPERED
            report.failing_chunks = failing
        return report

    # 3. side-car manifest next to the media
    sidecar = sidecar or _default_sidecar(media_path)
    if sidecar and os.path.exists(sidecar):
        container = codec.load_manifest(sidecar)
        mid = compute_manifest_id(container.core_manifest)
        fetched = service.fetch(mid)
        if fetched is None and container.ledger_attestation and container.ledger_attestation.ledger_attestation_value:
            from .service import Match

            receipt = Receipt.from_attestation_value(container.ledger_attestation.ledger_attestation_value)
            fetched = Match(mid, container, receipt)
        if fetched is not None:
            if _settle(report, fetched, policy, service_key, "sidecar"):
                if report.status is Status.AUTHENTICATED:
                    failing, covered = _verify_chunks(data, fetched, media_path, is_mp4)
                    whole = any(r.facsimile.object_digest == digest for r in container.facsimile_info.records)
                    if failing or not (covered or whole):
                        report.status = Status.TAMPERED
                        report.failing_chunks = failing
                return report

    # 4. watermark
    if media_path.lower().endswith(".wav"):
        found = _watermark_route(data, service, policy, service_key, cert_resolver, report)
        if found:
            return report

    if not report.notes:
        report.notes.append("no manifest found for this media")
    return report


def _default_sidecar(media_path: str) -> Optional[str]:
    stem = os.path.splitext(media_path)[0]
    if stem.endswith(".amp"):
        stem = stem[: -len(".amp")]
    return stem + MANIFEST_SUFFIX


def _watermark_route(data, service, policy, service_key, cert_resolver, report) -> bool:
    from . import watermark as wm

    try:
        samples, _rate = wm.read_wav(io.BytesIO(data))
    except Exception as exc:
        report.notes.append(f"not readable as PCM: {exc}")
        return False
    payload = wm.extract_payload(samples)
    if payload is None:
        report.notes.append("no watermark detected")
        return False
    resolver = cert_resolver or service_cert_resolver(service, payload.media_id)
    try:
        media_id, _locator = wm.verify_payload(payload, resolver)
    except AmpError as exc:
        report.notes.append(f"watermark payload rejected: {exc}")
        return False
    report.media_id = media_id
    for match in service.query_media_id(media_id, include_revoked=True):
        probe = VerificationReport(report.media_path, Status.UNVERIFIED)
        if _settle(probe, match, policy, service_key, "watermark"):
            report.publisher = probe.publisher
            report.manifest_id = probe.manifest_id
            report.receipt_checked = probe.receipt_checked
            report.route = "watermark"
            report.notes.extend(probe.notes)
            report.status = Status.REVOKED if probe.status is Status.REVOKED else Status.WATERMARK_FALLBACK
            return True
        report.notes.extend(probe.notes)
    report.notes.append("watermark found but no manifest verifies for its MediaID")
    return False
