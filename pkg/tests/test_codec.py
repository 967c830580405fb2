import json
import random
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import cbor2
import pytest
import rfc8785

from amp import codec
from amp.errors import EncodingError, ManifestError, UnsupportedAlgorithm
from amp.manifest import (
    FacsimileDescriptor,
    FacsimileType,
    ManifestContainer,
    ManifestCore,
    PublisherInfo,
    WorkInfo,
    build_manifest,
    compute_manifest_id,
)
from helpers import oracle_cbor, rand_container, sha256

GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "golden_core.json").read_text())


def golden_facsimile():
    return FacsimileDescriptor(
        FacsimileType.IMAGE, "jpg", "image/jpeg", 5002,
        bytes.fromhex("9f86d081884c7d659a2feaa0c55ad015a3bf4f1b2b0b822cd15d6c15b0f00a08"),
    )


def golden_core():
    return ManifestCore(
        serial_number=bytes(range(16)),
        digest_algorithm="sha256",
        media_id=bytes.fromhex("00112233445566778899aabbccddeeff"),
        creation_time=datetime(2023, 11, 14, 22, 13, 20, 123000, tzinfo=timezone.utc),
        publisher=PublisherInfo("TPS-UK"),
        work=WorkInfo("picture.jpg", copyright="Copyright (c) CompanyName Corporation. All rights reserved."),
        facsimile_info_digests=(sha256(codec.encode_canonical_cbor(golden_facsimile())),),
    )


class TestGolden:
    def test_facsimile_bytes(self):
        assert codec.encode_canonical_cbor(golden_facsimile()).hex() == GOLDEN["facsimile_cbor"]

    def test_core_bytes_and_id(self):
        core = golden_core()
        assert codec.encode_canonical_cbor(core).hex() == GOLDEN["core_cbor"]
        mid = compute_manifest_id(core)
        assert mid.digest_algorithm == "sha256"
        assert mid.digest_value.hex() == GOLDEN["manifest_id"]
        assert len(mid.digest_value) == 32

    def test_cbor2_decodes_golden(self):
        tree = cbor2.loads(bytes.fromhex(GOLDEN["core_cbor"]))
        assert tree["CreationTime"] == 1700000000123
        assert tree["Publisher"] == {"Name": "TPS-UK"}


class TestJson:
    def test_matches_rfc8785(self, rng):
        for _ in range(200):
            c = rand_container(rng)
            tree = codec.to_wire(c, "json")
            assert codec.encode_canonical_json(c) == rfc8785.dumps(tree)

    def test_deterministic(self, rng):
        c = rand_container(rng)
        assert codec.encode_canonical_json(c) == codec.encode_canonical_json(c)

    def test_absent_differs_from_empty(self):
        core = golden_core()
        a = codec.encode_canonical_json(core)
        b = codec.encode_canonical_json(replace(core, work=replace(core.work, other_info="")))
        assert a != b
        assert b"null" not in a
        assert b'"OtherInfo":""' in b

    def test_fixpoint(self, rng):
        c = rand_container(rng)
        once = codec.encode_canonical_json(c)
        assert codec.encode_canonical_json(codec.decode_json(once)) == once

    def test_bytes_are_unpadded_base64url(self):
        assert codec.b64e(b"\xfb\xff") == "-_8"
        assert codec.b64d("-_8") == b"\xfb\xff"
        with pytest.raises(ManifestError):
            codec.b64d("ab+/")

    def test_time_format(self):
        t = datetime(2021, 3, 4, 5, 6, 7, 891234, tzinfo=timezone.utc)
        assert codec.format_time(t) == "2021-03-04T05:06:07.891Z"
        assert codec.parse_time("2021-03-04T05:06:07.891Z") == t.replace(microsecond=891000)

    def test_lone_surrogate_rejected(self):
        core = replace(golden_core(), publisher=PublisherInfo("bad \ud800"))
        with pytest.raises(EncodingError):
            codec.encode_canonical_json(core)
        with pytest.raises(EncodingError):
            codec.encode_canonical_cbor(core)

    def test_garbage_rejected(self):
        with pytest.raises(ManifestError):
            codec.decode_json(b"{not json")


class TestCbor:
    def test_shortest_int(self):
        data = codec.encode_canonical_cbor(golden_core())
        assert b"\x67Version\x01" in data

    def test_matches_oracle(self, rng):
        for _ in range(200):
            c = rand_container(rng)
            assert codec.encode_canonical_cbor(c) == oracle_cbor(codec.to_wire(c, "cbor"))

    def test_fixpoint(self, rng):
        c = rand_container(rng)
        once = codec.encode_canonical_cbor(c)
        assert codec.encode_canonical_cbor(codec.decode_cbor(once)) == once

    def test_cross_codec(self, rng):
        for _ in range(50):
            c = rand_container(rng)
            a = codec.decode_cbor(codec.encode_canonical_cbor(c))
            b = codec.decode_json(codec.encode_canonical_json(c))
            assert a == b == c

    def test_unknown_algorithm(self):
        tree = codec.to_wire(build_manifest(PublisherInfo("p"), WorkInfo("t"), [golden_facsimile()]), "cbor")
        tree["CoreManifest"]["DigestAlgorithm"] = "md5"
        with pytest.raises(UnsupportedAlgorithm):
            codec.decode_cbor(cbor2.dumps(tree))

    def test_garbage_rejected(self):
        with pytest.raises(ManifestError):
            codec.decode_cbor(b"\xff\x00")

    def test_save_load(self, tmp_path, rng):
        c = rand_container(rng)
        for name in ("m.amp.cbor", "m.amp.json"):
            codec.save_manifest(c, tmp_path / name)
            assert codec.load_manifest(tmp_path / name) == c


def test_container_type_default_is_full_container(rng):
    assert isinstance(codec.decode_cbor(codec.encode_canonical_cbor(rand_container(rng))), ManifestContainer)


def test_id_changes_with_title(rng):
    core = golden_core()
    other = replace(core, work=replace(core.work, title="picture2.jpg"))
    assert compute_manifest_id(core) != compute_manifest_id(other)


def test_id_mutation_fuzzer():
    """Every single-field change to a core moves its ManifestID."""
    r = random.Random(7)
    core = rand_container(r).core_manifest
    base = compute_manifest_id(core)
    mutations = [
        replace(core, serial_number=bytes(16)),
        replace(core, media_id=core.media_id + b"\x00"),
        replace(core, creation_time=datetime(1999, 1, 1, tzinfo=timezone.utc)),
        replace(core, publisher=replace(core.publisher, name=core.publisher.name + "x")),
        replace(core, work=replace(core.work, title=core.work.title + "x")),
        replace(core, work=replace(core.work, duration=(core.work.duration or 0) + 1)),
        replace(core, facsimile_info_digests=core.facsimile_info_digests + (bytes(32),)),
        replace(core, origin_manifests=None) if core.origin_manifests else replace(core, version=2),
    ]
    for mutated in mutations:
        assert compute_manifest_id(mutated) != base
