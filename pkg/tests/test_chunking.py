import io
import random

import pytest

from amp.chunking import (
    EvidencePath,
    chunk_simple,
    default_encoded_row,
    merkle_authenticator,
    merkle_build,
    merkle_evidence,
    merkle_verify,
    tree_depth,
    verify_simple_chunk,
)
from amp.errors import InvalidArgument, RangeError
from helpers import leaves_for, oracle_node, oracle_row, sha256

KIB = 1024


class TestSimple:
    def test_exact_multiple(self):
        auth = chunk_simple(io.BytesIO(bytes(1024 * KIB)), 256 * KIB)
        assert auth.num_chunks == 4 and len(auth.chunk_digest) == 4

    def test_short_tail(self):
        data = random.Random(1).randbytes(1024 * KIB + 1)
        auth = chunk_simple(io.BytesIO(data), 256 * KIB)
        assert auth.num_chunks == 5
        assert auth.chunk_digest[4] == sha256(data[-1:])

    def test_empty(self):
        auth = chunk_simple(io.BytesIO(b""), 256 * KIB)
        assert auth.num_chunks == 0 and auth.chunk_digest == ()

    def test_bad_size(self):
        with pytest.raises(InvalidArgument):
            chunk_simple(io.BytesIO(b"x"), 0)

    def test_verify(self):
        data = random.Random(2).randbytes(10 * KIB)
        auth = chunk_simple(io.BytesIO(data), KIB)
        slices = [data[i:i + KIB] for i in range(0, len(data), KIB)]
        for i, s in enumerate(slices):
            assert verify_simple_chunk(auth, i, s)
            flipped = bytearray(s)
            flipped[0] ^= 1
            assert not verify_simple_chunk(auth, i, bytes(flipped))
            for j in range(len(slices)):
                if j != i:
                    assert not verify_simple_chunk(auth, j, s)
        with pytest.raises(RangeError):
            verify_simple_chunk(auth, 10, slices[0])

    def test_trickle_reads(self):
        class Trickle(io.RawIOBase):
            def __init__(self, data):
                self.buf = io.BytesIO(data)

            def readable(self):
                return True

            def read(self, n=-1):
                return self.buf.read(min(n, 7) if n > 0 else 7)

        data = random.Random(3).randbytes(3000)
        assert chunk_simple(Trickle(data), 1000) == chunk_simple(io.BytesIO(data), 1000)


class TestMerkle:
    def test_depth(self):
        assert [tree_depth(n) for n in (1, 2, 3, 4, 5, 8, 9, 64, 65)] == [1, 2, 3, 3, 4, 4, 5, 7, 8]

    def test_single_leaf(self):
        (leaf,) = leaves_for(1)
        tree = merkle_build([leaf])
        assert tree.root == leaf
        assert merkle_evidence(tree, 0, 0).hashes == ()

    def test_three_leaves(self):
        d = leaves_for(3)
        assert merkle_build(d).root == sha256(sha256(d[0] + d[1]) + d[2])

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            merkle_build([])

    def test_rows_match_oracle(self):
        for n in range(1, 40):
            d = leaves_for(n)
            tree = merkle_build(d)
            for row in [-1] + list(range(tree.depth)):
                assert list(tree.row(row)) == oracle_row(d, row), (n, row)

    def test_authenticator_rows(self):
        d5, d8 = leaves_for(5), leaves_for(8)
        assert merkle_authenticator(merkle_build(d8), 0).chunk_digest == (merkle_build(d8).root,)
        assert merkle_authenticator(merkle_build(d5), -1).chunk_digest == tuple(d5)
        assert len(merkle_authenticator(merkle_build(d8), 1).chunk_digest) == 2
        with pytest.raises(RangeError):
            merkle_authenticator(merkle_build(d8), 4)

    def test_default_row(self):
        assert default_encoded_row(1) == 0
        assert default_encoded_row(5) == 3
        assert default_encoded_row(64) == 6
        assert default_encoded_row(1000) == 6

    def test_worked_example(self):
        d = leaves_for(8)
        tree = merkle_build(d)
        ev = merkle_evidence(tree, 0, 1)
        assert ev.hashes == (d[1], sha256(d[2] + d[3]))

    def test_null_siblings_omitted(self):
        d = leaves_for(5)
        tree = merkle_build(d)
        ev = merkle_evidence(tree, 4, 0)
        # leaf 4's siblings at the bottom two levels are padding
        assert ev.hashes == (oracle_node(d, 0, 4),)
        assert len(ev.hashes) < len(merkle_evidence(tree, 0, 0).hashes)
        assert merkle_verify(d[4], ev, merkle_authenticator(tree, 0))

    def test_soundness(self):
        d = leaves_for(8)
        tree = merkle_build(d)
        auth = merkle_authenticator(tree, 1)
        ev = merkle_evidence(tree, 3, 1)
        assert merkle_verify(d[3], ev, auth)
        assert not merkle_verify(sha256(b"x"), ev, auth)
        assert not merkle_verify(d[3], EvidencePath(3, ev.hashes[:-1]), auth)
        assert not merkle_verify(d[3], EvidencePath(3, ev.hashes + (d[0],)), auth)
        assert not merkle_verify(d[3], EvidencePath(9, ev.hashes), auth)

    def test_out_of_range_leaf(self):
        with pytest.raises(RangeError):
            merkle_evidence(merkle_build(leaves_for(3)), 3, 0)
