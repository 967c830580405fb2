"""Fragmented MP4 (ISO BMFF) parsing, chunk hashing and ChunkIntegrityBox handling.

A chunk is one ``[moof, mdat]`` pair. Its digest is taken over the
*canonical* moof followed by the mdat payload, where the canonical moof
is the moof with every ChunkIntegrityBox removed (sizes and trun data
offsets corrected accordingly) and any absolute ``tfhd``
base_data_offset masked to zero. That makes chunk digests independent of
both evidence injection and the chunk's position in the file, so a
player can verify a fragment without having seen any earlier bytes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional, Sequence

from . import digest as _digest
from .chunking import MerkleTree, EvidencePath, merkle_evidence, merkle_verify
from .errors import (
    InvalidArgument,
    MalformedFragment,
    NoBinding,
    NotAChunkIntegrityBox,
    ParseError,
    RangeError,
)
from .manifest import IsoBoxAuthenticator, ManifestContainer, MerkleTreeAuthenticator

CIB_EXTENDED_TYPE = bytes.fromhex("469d22dfe1924defa71ef4c9f2ce3e71")
CONTAINER_TYPES = {"moov", "trak", "mdia", "minf", "stbl", "mvex", "moof", "traf", "edts", "dinf", "udta"}

TFHD_BASE_DATA_OFFSET = 0x000001
TFHD_DEFAULT_BASE_IS_MOOF = 0x020000
TRUN_DATA_OFFSET = 0x000001


@dataclass
class Box:
    box_type: str
    offset: int
    size: int
    header_size: int
    extended_type: Optional[bytes] = None
    children: Optional[list] = None

    @property
    def end(self) -> int:
        return self.offset + self.size

    @property
    def payload_offset(self) -> int:
        return self.offset + self.header_size

    def payload(self, data: bytes) -> bytes:
        return data[self.payload_offset : self.end]

    def raw(self, data: bytes) -> bytes:
        return data[self.offset : self.end]

    def find(self, box_type: str) -> list:
        return [c for c in self.children or () if c.box_type == box_type]

    @property
    def is_cib(self) -> bool:
        return self.box_type == "uuid" and self.extended_type == CIB_EXTENDED_TYPE


def _read_header(data: bytes, offset: int, end: int):
    if end - offset < 8:
        raise ParseError("truncated box header", offset)
    size, raw_type = struct.unpack_from(">I4s", data, offset)
    box_type = raw_type.decode("latin-1")
    header = 8
    if size == 1:
        if end - offset < 16:
            raise ParseError("truncated largesize header", offset)
        (size,) = struct.unpack_from(">Q", data, offset + 8)
        header = 16
    elif size == 0:
        size = end - offset
    extended = None
    if box_type == "uuid":
        if end - offset < header + 16:
            raise ParseError("truncated uuid extended type", offset)
        extended = bytes(data[offset + header : offset + header + 16])
        header += 16
    if size < header:
        raise ParseError(f"box size {size} smaller than its header", offset)
    if offset + size > end:
        raise ParseError(f"'{box_type}' box of size {size} overruns its parent (ends at {end})", offset)
    return box_type, size, header, extended


def parse_boxes(data: bytes, offset: int = 0, end: Optional[int] = None) -> list:
    """Parse a box sequence, descending into known container types."""
    if end is None:
        end = len(data)
    boxes = []
    while offset < end:
        box_type, size, header, extended = _read_header(data, offset, end)
        box = Box(box_type, offset, size, header, extended)
        if box_type in CONTAINER_TYPES:
            box.children = parse_boxes(data, offset + header, offset + size)
        boxes.append(box)
        offset += size
    return boxes


def iter_top_level(stream: BinaryIO) -> Iterator[tuple]:
    """Yield ``(box, raw_bytes)`` for each top-level box, reading incrementally.

    ``box.offset`` is relative to the raw bytes (always 0); ``position`` in
    the tuple is the absolute stream offset.
    """
    position = 0
    while True:
        head = stream.read(8)
        if not head:
            return
        if len(head) < 8:
            raise ParseError("truncated box header", position)
        size, raw_type = struct.unpack(">I4s", head)
        extra = b""
        if size == 1:
            extra = stream.read(8)
            if len(extra) < 8:
                raise ParseError("truncated largesize header", position)
            (size,) = struct.unpack(">Q", extra)
        if size == 0:
            rest = stream.read()
            size = 8 + len(extra) + len(rest)
            raw = head + extra + rest
        else:
            want = size - 8 - len(extra)
            if want < 0:
                raise ParseError(f"box size {size} smaller than its header", position)
            rest = stream.read(want)
            if len(rest) < want:
                raise ParseError(f"'{raw_type.decode('latin-1')}' box truncated: expected {size} bytes", position)
            raw = head + extra + rest
        boxes = parse_boxes(raw)
        yield boxes[0], raw, position
        position += size


# --------------------------------------------------------------------------
# box building


def make_box(box_type: str, payload: bytes, extended_type: Optional[bytes] = None) -> bytes:
    header = 8 + (16 if extended_type is not None else 0)
    size = header + len(payload)
    out = struct.pack(">I4s", size, box_type.encode("latin-1"))
    if extended_type is not None:
        out += extended_type
    return out + payload


def make_full_box(box_type: str, version: int, flags: int, payload: bytes, extended_type=None) -> bytes:
    return make_box(box_type, struct.pack(">I", (version << 24) | flags) + payload, extended_type)


def _full_box_fields(payload: bytes):
    (vf,) = struct.unpack_from(">I", payload, 0)
    return vf >> 24, vf & 0xFFFFFF


# --------------------------------------------------------------------------
# ChunkIntegrityBox


@dataclass(frozen=True)
class ChunkIntegrityBox:
    hash_tree_id: int
    hash_location: int
    hash_size: int
    hashes: tuple

    @property
    def hash_count(self) -> int:
        return len(self.hashes)


def encode_chunk_integrity_box(cib: ChunkIntegrityBox) -> bytes:
    if not 0 <= cib.hash_tree_id < 256:
        raise RangeError(f"hash_tree_id {cib.hash_tree_id} does not fit 8 bits")
    if not 0 <= cib.hash_location < 65536:
        raise RangeError(f"hash_location {cib.hash_location} does not fit 16 bits")
    if not 0 <= cib.hash_size < 256:
        raise RangeError(f"hash_size {cib.hash_size} does not fit 8 bits")
    if cib.hash_count >= 256:
        raise RangeError(f"hash_count {cib.hash_count} does not fit 8 bits")
    if any(len(h) != cib.hash_size for h in cib.hashes):
        raise InvalidArgument("every hash must be hash_size bytes")
    body = struct.pack(">BHBB", cib.hash_tree_id, cib.hash_location, cib.hash_size, cib.hash_count)
    return make_full_box("uuid", 0, 0, body + b"".join(cib.hashes), CIB_EXTENDED_TYPE)


def decode_chunk_integrity_box(data: bytes) -> ChunkIntegrityBox:
    box_type, size, header, extended = _read_header(data, 0, len(data))
    if box_type != "uuid" or extended != CIB_EXTENDED_TYPE:
        raise NotAChunkIntegrityBox(f"box '{box_type}' with extended type {extended and extended.hex()} is not a ChunkIntegrityBox", 0)
    payload = data[header:size]
    if len(payload) < 9:
        raise ParseError("ChunkIntegrityBox body truncated", header)
    version, flags = _full_box_fields(payload)
    if version != 0 or flags != 0:
        raise ParseError(f"ChunkIntegrityBox version/flags must be 0, got {version}/{flags}", header)
    hash_tree_id, location, hash_size, count = struct.unpack_from(">BHBB", payload, 4)
    body = payload[9:]
    if len(body) != hash_size * count:
        raise ParseError(
            f"ChunkIntegrityBox declares {count} x {hash_size}-byte hashes but carries {len(body)} bytes", header + 9
        )
    hashes = tuple(body[i * hash_size : (i + 1) * hash_size] for i in range(count))
    return ChunkIntegrityBox(hash_tree_id, location, hash_size, hashes)


# --------------------------------------------------------------------------
# moof rewriting


def _tfhd_flags(data: bytes, tfhd: Box) -> int:
    return _full_box_fields(tfhd.payload(data))[1]


def _rewrite_traf(data: bytes, traf: Box, local_delta: int, base_delta: Optional[int], append: bytes) -> bytes:
    """Re-emit a traf without CIBs, adjusting data offsets, then append ``append``.

    ``base_delta`` adjusts an explicit tfhd base_data_offset; ``None`` masks
    it to zero instead (canonical hashing form).
    """
    tfhd = next((c for c in traf.children if c.box_type == "tfhd"), None)
    explicit_base = tfhd is not None and bool(_tfhd_flags(data, tfhd) & TFHD_BASE_DATA_OFFSET)
    parts = []
    for child in traf.children:
        if child.is_cib:
            continue
        raw = bytearray(child.raw(data))
        rel = child.header_size
        if child.box_type == "tfhd" and explicit_base:
            (old,) = struct.unpack_from(">Q", raw, rel + 8)
            new = 0 if base_delta is None else old + base_delta
            struct.pack_into(">Q", raw, rel + 8, new)
        elif child.box_type == "trun" and not explicit_base:
            _, flags = _full_box_fields(bytes(raw[rel : rel + 4]))
            if flags & TRUN_DATA_OFFSET:
                (old,) = struct.unpack_from(">i", raw, rel + 8)
                struct.pack_into(">i", raw, rel + 8, old + local_delta)
        parts.append(bytes(raw))
    return make_box("traf", b"".join(parts) + append)


def _rewrite_moof(data: bytes, moof: Box, cibs: Sequence[bytes], cumulative: int, canonical: bool = False):
    """Return ``(new_moof_bytes, size_delta)``.

    ``cibs`` holds one CIB per traf to append (empty to strip).
    ``cumulative`` is the total size change of earlier moofs, needed to keep
    explicit base offsets pointing at the right bytes.
    """
    trafs = moof.find("traf")
    removed = sum(c.size for t in trafs for c in t.children if c.is_cib)
    added = sum(len(c) for c in cibs)
    delta = added - removed
    parts = []
    traf_i = 0
    for child in moof.children:
        if child.box_type == "traf":
            append = cibs[traf_i] if cibs else b""
            base_delta = None if canonical else cumulative + delta
            parts.append(_rewrite_traf(data, child, delta, base_delta, append))
            traf_i += 1
        else:
            parts.append(child.raw(data))
    new = make_box("moof", b"".join(parts))
    if len(new) != moof.size + delta:
        raise ParseError("moof/traf with largesize headers cannot be rewritten", moof.offset)
    return new, delta


def canonical_moof(data: bytes, moof: Box) -> bytes:
    return _rewrite_moof(data, moof, (), 0, canonical=True)[0]


def chunk_integrity_boxes(data: bytes, moof: Box) -> list:
    return [
        decode_chunk_integrity_box(c.raw(data)) for t in moof.find("traf") for c in t.children if c.is_cib
    ]


# --------------------------------------------------------------------------
# chunks


@dataclass(frozen=True)
class IsoChunk:
    index: int
    moof_range: tuple
    mdat_range: tuple
    digest: bytes


def _fragment_pairs(boxes: Sequence[Box]) -> list:
    pairs = []
    i = 0
    while i < len(boxes):
        if boxes[i].box_type == "moof":
            j = i + 1
            while j < len(boxes) and boxes[j].box_type not in ("mdat", "moof"):
                j += 1
            if j >= len(boxes) or boxes[j].box_type != "mdat":
                raise MalformedFragment("moof without a following mdat", boxes[i].offset)
            pairs.append((boxes[i], boxes[j]))
            i = j + 1
        else:
            i += 1
    return pairs


def chunk_digest(moof_canonical: bytes, mdat_payload: bytes, algorithm: str = _digest.DEFAULT_ALGORITHM) -> bytes:
    h = _digest.hasher(algorithm)
    h.update(moof_canonical)
    h.update(mdat_payload)
    return h.digest()


def extract_iso_chunks(tree: Sequence[Box], data: bytes, algorithm: str = _digest.DEFAULT_ALGORITHM):
    """One :class:`IsoChunk` per ``[moof, mdat]`` pair, plus the authenticator."""
    pairs = _fragment_pairs(tree)
    if not pairs:
        raise MalformedFragment("no [moof, mdat] fragments found")
    chunks = []
    for i, (moof, mdat) in enumerate(pairs):
        d = chunk_digest(canonical_moof(data, moof), mdat.payload(data), algorithm)
        chunks.append(IsoChunk(i, (moof.offset, moof.end), (mdat.payload_offset, mdat.end), d))
    auth = IsoBoxAuthenticator(num_chunks=len(chunks), chunk_digest=[c.digest for c in chunks])
    return chunks, auth


def is_fragmented_mp4(data: bytes) -> bool:
    try:
        boxes = parse_boxes(data)
    except ParseError:
        return False
    return any(b.box_type == "moof" for b in boxes) and any(b.box_type == "mdat" for b in boxes)


# --------------------------------------------------------------------------
# evidence


def _rewrite_file(data: bytes, cibs_for_chunk) -> bytes:
    boxes = parse_boxes(data)
    out = []
    cumulative = 0
    chunk = 0
    for box in boxes:
        if box.box_type == "moof":
            n_traf = len(box.find("traf"))
            cibs = cibs_for_chunk(chunk, n_traf)
            new, delta = _rewrite_moof(data, box, cibs, cumulative)
            out.append(new)
            cumulative += delta
            chunk += 1
        else:
            out.append(box.raw(data))
    return b"".join(out)


def strip_evidence(mp4: bytes) -> bytes:
    """Remove every ChunkIntegrityBox, restoring the pre-injection bytes."""
    return _rewrite_file(mp4, lambda chunk, n_traf: ())


def inject_evidence(mp4: bytes, tree: MerkleTree, encoded_row: int, hash_tree_id: int = 0) -> bytes:
    """Give every ``traf`` a ChunkIntegrityBox with its chunk's Merkle evidence."""
    base = strip_evidence(mp4)
    n = len(_fragment_pairs(parse_boxes(base)))
    if n != tree.num_chunks:
        raise InvalidArgument(f"file has {n} chunks but the tree has {tree.num_chunks} leaves")
    if n > 65536:
        raise RangeError("hash_location is 16 bits: at most 65536 chunks per stream")
    hash_size = len(tree.levels[0][0])

    def cibs(chunk, n_traf):
        ev = merkle_evidence(tree, chunk, encoded_row)
        box = encode_chunk_integrity_box(ChunkIntegrityBox(hash_tree_id, chunk, hash_size, ev.hashes))
        return [box] * n_traf

    return _rewrite_file(base, cibs)


# --------------------------------------------------------------------------
# streaming verification


@dataclass(frozen=True)
class ChunkVerdict:
    index: int
    ok: bool
    digest: bytes
    reason: str = ""


def _find_authenticators(manifest: ManifestContainer, facsimile_index: Optional[int]):
    found = {}
    for rec in manifest.facsimile_info.records:
        if facsimile_index is not None and rec.index != facsimile_index:
            continue
        for auth in rec.facsimile.chunk_data or ():
            if isinstance(auth, (MerkleTreeAuthenticator, IsoBoxAuthenticator)):
                found.setdefault(rec.index, {})[type(auth)] = auth
    return found


def verify_fmp4_stream(
    mp4: BinaryIO | bytes, manifest: ManifestContainer, facsimile_index: Optional[int] = None
) -> list:
    """Verify fragments one at a time as they are read.

    Chunks carrying a ChunkIntegrityBox are checked by folding its evidence
    against the manifest's Merkle row (``hash_tree_id`` names the facsimile);
    chunks without one fall back to the IsoBox digest list by ordinal.
    """
    return list(iter_verify_fmp4(mp4, manifest, facsimile_index))


def iter_verify_fmp4(mp4, manifest: ManifestContainer, facsimile_index: Optional[int] = None):
    if isinstance(mp4, (bytes, bytearray)):
        mp4 = io.BytesIO(mp4)
    auths = _find_authenticators(manifest, facsimile_index)
    if not auths:
        raise NoBinding("manifest carries no Merkle or IsoBox authenticator for this facsimile")
    algorithm = manifest.core_manifest.digest_algorithm
    default_idx = min(auths)
    pending = None
    ordinal = 0
    for box, raw, position in iter_top_level(mp4):
        if box.box_type == "moof":
            if pending is not None:
                raise MalformedFragment("moof without a following mdat", pending[2])
            pending = (box, raw, position)
            continue
        if box.box_type != "mdat" or pending is None:
            continue
        moof, moof_raw, _ = pending
        pending = None
        d = chunk_digest(canonical_moof(moof_raw, moof), box.payload(raw), algorithm)
        cibs = chunk_integrity_boxes(moof_raw, moof)
        yield _verdict(d, cibs, auths, default_idx, ordinal, algorithm)
        ordinal += 1
    if pending is not None:
        raise MalformedFragment("moof without a following mdat", pending[2])


def _verdict(d, cibs, auths, default_idx, ordinal, algorithm) -> ChunkVerdict:
    if cibs:
        cib = cibs[0]
        if any(c != cib for c in cibs[1:]):
            return ChunkVerdict(cib.hash_location, False, d, "conflicting evidence boxes")
        merkle = auths.get(cib.hash_tree_id, {}).get(MerkleTreeAuthenticator)
        if merkle is not None:
            ok = merkle_verify(d, EvidencePath(cib.hash_location, cib.hashes), merkle, algorithm)
            return ChunkVerdict(cib.hash_location, ok, d, "" if ok else "evidence does not reach manifest row")
        iso = auths.get(cib.hash_tree_id, {}).get(IsoBoxAuthenticator)
        if iso is not None:
            return _list_verdict(iso, cib.hash_location, d)
        return ChunkVerdict(cib.hash_location, False, d, f"no authenticator for hash_tree_id {cib.hash_tree_id}")
    iso = auths[default_idx].get(IsoBoxAuthenticator)
    if iso is None:
        return ChunkVerdict(ordinal, False, d, "chunk has no evidence and manifest has no digest list")
    return _list_verdict(iso, ordinal, d)


def _list_verdict(iso: IsoBoxAuthenticator, index: int, d: bytes) -> ChunkVerdict:
    if not 0 <= index < iso.num_chunks:
        return ChunkVerdict(index, False, d, "chunk index beyond authenticator")
    ok = iso.chunk_digest[index] == d
    return ChunkVerdict(index, ok, d, "" if ok else "digest mismatch")


# --------------------------------------------------------------------------
# test fixtures


def make_fmp4(
    mdat_payloads: Sequence[bytes],
    *,
    track_id: int = 1,
    samples_per_fragment: int = 4,
    explicit_base_offset: bool = False,
    with_ftyp: bool = False,
) -> bytes:
    """Build a minimal fragmented MP4: ``[ftyp] moov {moof mdat}*``.

    MDAT bytes are opaque; sample sizes in ``trun`` split each payload evenly.
    """
    out = []
    if with_ftyp:
        out.append(make_box("ftyp", b"iso6" + struct.pack(">I", 0) + b"iso6dash"))
    mvhd = make_full_box("mvhd", 0, 0, struct.pack(">IIII", 0, 0, 1000, 0) + bytes(80))
    tkhd = make_full_box("tkhd", 0, 3, struct.pack(">III", 0, 0, track_id) + bytes(68))
    trex = make_full_box("trex", 0, 0, struct.pack(">IIIII", track_id, 1, 0, 0, 0))
    out.append(make_box("moov", mvhd + make_box("trak", tkhd) + make_box("mvex", trex)))
    position = sum(len(b) for b in out)
    decode_time = 0
    for seq, payload in enumerate(mdat_payloads, start=1):
        n = samples_per_fragment
        sizes = [len(payload) // n] * n
        sizes[-1] += len(payload) - sum(sizes)

        def moof_bytes(data_offset, base):
            mfhd = make_full_box("mfhd", 0, 0, struct.pack(">I", seq))
            if explicit_base_offset:
                tfhd = make_full_box("tfhd", 0, TFHD_BASE_DATA_OFFSET, struct.pack(">IQ", track_id, base))
            else:
                tfhd = make_full_box("tfhd", 0, TFHD_DEFAULT_BASE_IS_MOOF, struct.pack(">I", track_id))
            tfdt = make_full_box("tfdt", 1, 0, struct.pack(">Q", decode_time))
            trun = make_full_box(
                "trun", 0, TRUN_DATA_OFFSET | 0x000200,
                struct.pack(">Ii", n, data_offset) + b"".join(struct.pack(">I", s) for s in sizes),
            )
            return make_box("moof", mfhd + make_box("traf", tfhd + tfdt + trun))

        probe = moof_bytes(0, 0)
        if explicit_base_offset:
            # base points at the file start; trun offset is absolute payload position
            moof = moof_bytes(position + len(probe) + 8, 0)
        else:
            moof = moof_bytes(len(probe) + 8, 0)
        out.append(moof)
        out.append(make_box("mdat", payload))
        position += len(moof) + 8 + len(payload)
        decode_time += 1000 * n
    return b"".join(out)
