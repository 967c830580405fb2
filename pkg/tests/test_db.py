import datetime as dt
import random
from dataclasses import replace

import pytest

from amp.chunking import merkle_authenticator, merkle_build
from amp.db import INDEX_ENTRY_BYTES, IndexKey, IndexKind, ManifestDatabase
from amp.errors import ReceiptRejected, TrustError
from amp.ledger import Ledger, sign_registration, sign_revocation
from amp.manifest import (
    FacsimileDescriptor,
    FacsimileType,
    PublisherInfo,
    SimpleChunkListAuthenticator,
    WorkInfo,
    build_manifest,
    compute_manifest_id,
)
from amp.signing import sign_container

T0 = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)


class Fixture:
    def __init__(self, pki):
        self.ledger = Ledger(trust_policy=pki.policy(), auto_sign=False)
        self.db = ManifestDatabase(self.ledger.service_public_key, trust_policy=pki.policy())

    def publish(self, chain, facsimiles, *, media_id=b"m" * 16, created=T0, title="t", ingest=True):
        c = sign_container(build_manifest(PublisherInfo(chain.name), WorkInfo(title), facsimiles,
                                          media_id=media_id, creation_time=created), chain)
        mid = compute_manifest_id(c.core_manifest)
        i = self.ledger.append_registration(mid, "", sign_registration(chain, mid, ""), chain)
        receipt = self.ledger.receipt_now(i)
        if ingest:
            self.db.ingest(c, receipt)
        return c, receipt, mid

    def revoke(self, chain, mid):
        i = self.ledger.append_revocation(mid, sign_revocation(chain, mid), chain)
        return self.db.apply_revocation(mid, self.ledger.receipt_now(i))


def chunked(digests, length=100, obj=None):
    return FacsimileDescriptor(FacsimileType.AUDIO, "wav", "pcm", length, obj or bytes([len(digests)]) * 32,
                               chunk_data=(SimpleChunkListAuthenticator(10, len(digests), tuple(digests)),))


def d(i):
    return bytes([i]) * 32


@pytest.fixture
def fx(pki):
    return Fixture(pki)


def test_media_id_oldest_first(fx, alice, carol):
    later, _, mid_late = fx.publish(alice, [chunked([d(1)])], created=T0 + dt.timedelta(days=1))
    earlier, _, mid_early = fx.publish(carol, [chunked([d(2)])], created=T0)
    by_creation = fx.db.query_media_id(b"m" * 16)
    assert [r.manifest_id for r in by_creation] == [mid_early, mid_late]
    by_ledger = fx.db.query_media_id(b"m" * 16, order="ledger")
    assert [r.manifest_id for r in by_ledger] == [mid_late, mid_early]


def test_object_digest(fx, alice):
    facs = [chunked([d(i)], obj=bytes([100 + i]) * 32) for i in range(10)]
    c, _, mid = fx.publish(alice, facs)
    (hit,) = fx.db.query_object_digest(bytes([107]) * 32)
    assert hit.record.manifest_id == mid and hit.facsimile_index == 7
    assert fx.db.query_object_digest(bytes(32)) == []


def test_identical_bytes_in_two_manifests(fx, alice, bob):
    fx.publish(alice, [chunked([d(1)], obj=d(9))], title="a")
    fx.publish(bob, [chunked([d(1)], obj=d(9))], title="b")
    assert len(fx.db.query_object_digest(d(9))) == 2


def test_chunk_queries(fx, alice):
    _, _, mid = fx.publish(alice, [chunked([d(i) for i in range(1, 7)])])
    fx.publish(alice, [chunked([d(50), d(51)])], title="other")
    (hit,) = fx.db.query_chunk_digest([d(4)])
    assert hit.record.manifest_id == mid and hit.hits == {d(4): [3]}
    (run,) = fx.db.query_chunk_digest([d(3), d(4), d(5)])
    assert [run.hits[x][0] for x in (d(3), d(4), d(5))] == [2, 3, 4]
    assert fx.db.query_chunk_digest([d(4), d(50)]) == []
    assert fx.db.query_chunk_digest([]) == []


def test_interior_merkle_rows_not_indexed(fx, alice):
    tree = merkle_build([d(i) for i in range(1, 9)])
    fac = FacsimileDescriptor(FacsimileType.VIDEO, "mp4", "x", 1, d(99),
                              chunk_data=(merkle_authenticator(tree, 1),))
    fx.publish(alice, [fac])
    assert fx.db.query_chunk_digest([tree.row(1)[0]]) == []
    leaf_fac = replace(fac, object_digest=d(98), chunk_data=(merkle_authenticator(tree, -1),))
    fx.publish(alice, [leaf_fac], title="leaves")
    assert len(fx.db.query_chunk_digest([d(3)])) == 1


def test_revocation(fx, alice, bob):
    c, _, mid = fx.publish(alice, [chunked([d(1)], obj=d(7))])
    assert fx.revoke(bob, mid)
    assert fx.db.query_media_id(b"m" * 16) == []
    assert fx.db.query_object_digest(d(7)) == []
    assert len(fx.db.query_object_digest(d(7), include_revoked=True)) == 1
    rec = fx.db.get(mid)
    assert rec.revoked and rec.revocation is not None


def test_revoke_unknown(fx, alice):
    _, _, mid = fx.publish(alice, [chunked([d(1)])], ingest=False)
    i = fx.ledger.append_revocation(mid, sign_revocation(alice, mid), alice)
    assert fx.db.apply_revocation(mid, fx.ledger.receipt_now(i)) is False


def test_forged_revocation_evidence(fx, alice):
    _, receipt, mid = fx.publish(alice, [chunked([d(1)])])
    with pytest.raises(ReceiptRejected):
        fx.db.apply_revocation(mid, receipt)  # a registration, not a revocation
    with pytest.raises(ReceiptRejected):
        fx.db.apply_revocation(mid, replace(receipt, signed_root=replace(
            receipt.signed_root, service_signature=bytes(64))))
    assert not fx.db.get(mid).revoked


def test_ingest_rejects_bad_receipt(fx, alice):
    c, receipt, _ = fx.publish(alice, [chunked([d(1)])], ingest=False)
    c2, receipt2, _ = fx.publish(alice, [chunked([d(2)])], ingest=False, title="x")
    with pytest.raises(ReceiptRejected):
        fx.db.ingest(c, receipt2)
    assert len(fx.db) == 0


def test_ingest_rejects_untrusted_signature(fx, alice):
    from amp.pki import alliance_layout, generate_test_pki

    c, receipt, _ = fx.publish(alice, [chunked([d(1)])], ingest=False)
    strict = ManifestDatabase(fx.ledger.service_public_key,
                              trust_policy=generate_test_pki(alliance_layout()).policy())
    with pytest.raises(TrustError):
        strict.ingest(c, receipt)


def test_idempotent_and_stats(fx, alice):
    c, receipt, mid = fx.publish(alice, [chunked([d(1), d(2)])])
    assert fx.db.ingest(c, receipt) == mid
    s = fx.db.stats()
    assert s["manifests"] == 1
    assert s["chunk_digest_entries"] == 2
    assert s["index_bytes"] == s["index_entries"] * INDEX_ENTRY_BYTES


def test_lookup_keys(fx, alice):
    _, _, mid = fx.publish(alice, [chunked([d(1)], obj=d(5))])
    assert fx.db.lookup(IndexKey(IndexKind.BY_MANIFEST_ID, mid.digest_value))[0].manifest_id == mid
    assert len(fx.db.lookup(IndexKey(IndexKind.BY_OBJECT_DIGEST, d(5)))) == 1
    assert len(fx.db.lookup(IndexKey(IndexKind.BY_CHUNK_DIGEST, d(1)))) == 1
    assert len(fx.db.lookup(IndexKey(IndexKind.BY_MEDIA_ID, b"m" * 16))) == 1


def test_journal_replay(tmp_path, pki, alice, bob):
    fx = Fixture(pki)
    path = str(tmp_path / "db.journal")
    fx.db = ManifestDatabase(fx.ledger.service_public_key, trust_policy=pki.policy(), journal_path=path)
    _, _, keep = fx.publish(alice, [chunked([d(1)])])
    _, _, gone = fx.publish(alice, [chunked([d(2)])], title="gone")
    fx.revoke(bob, gone)
    fx.db.close()
    again = ManifestDatabase(fx.ledger.service_public_key, journal_path=path)
    assert len(again) == 2
    assert not again.get(keep).revoked and again.get(gone).revoked
    again.close()


def test_many_records_random_queries(fx, alice):
    r = random.Random(5)
    stored = {}
    for k in range(20):
        digests = [r.randbytes(32) for _ in range(r.randint(1, 5))]
        _, _, mid = fx.publish(alice, [chunked(digests, obj=r.randbytes(32))], title=str(k))
        stored[mid.digest_value] = digests
    for mid, digests in stored.items():
        (hit,) = fx.db.query_chunk_digest(digests)
        assert hit.record.manifest_id.digest_value == mid
