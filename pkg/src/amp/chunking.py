"""File-offset chunk lists and Merkle-tree chunk authentication.

Merkle rows are numbered from the top: row 0 holds the root, row
``depth - 1`` the leaves, and ``-1`` is an alias for the leaf row. The
leaf row is padded with nulls up to the next power of two and parents
combine as::

    H(L || R)   both present
    L           right is null
    null        both null

Nulls are ``None``, never a zero digest. Because padding only ever sits
at the right edge, the non-null entries of any row are a prefix, so a
row with nulls elided still has every column at its original position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence

from . import digest as _digest
from .errors import InvalidArgument, RangeError
from .manifest import MerkleTreeAuthenticator, SimpleChunkListAuthenticator

DEFAULT_CHUNK_SIZE = 256 * 1024
MAX_ENCODED_WIDTH = 64


def chunk_simple(
    stream: BinaryIO, chunk_size: int = DEFAULT_CHUNK_SIZE, algorithm: str = _digest.DEFAULT_ALGORITHM
) -> SimpleChunkListAuthenticator:
    if chunk_size <= 0:
        raise InvalidArgument("chunk_size must be > 0")
    digests = [_digest.digest(c, algorithm) for c in iter_chunks(stream, chunk_size)]
    return SimpleChunkListAuthenticator(chunk_size=chunk_size, num_chunks=len(digests), chunk_digest=digests)


def iter_chunks(stream: BinaryIO, chunk_size: int):
    """Yield consecutive ``chunk_size`` slices; short reads are coalesced."""
    while True:
        buf = bytearray()
        while len(buf) < chunk_size:
            piece = stream.read(chunk_size - len(buf))
            if not piece:
                break
            buf += piece
        if not buf:
            return
        yield bytes(buf)
        if len(buf) < chunk_size:
            return


def verify_simple_chunk(
    auth: SimpleChunkListAuthenticator, index: int, chunk: bytes, algorithm: str = _digest.DEFAULT_ALGORITHM
) -> bool:
    if not 0 <= index < auth.num_chunks:
        raise RangeError(f"chunk index {index} outside [0, {auth.num_chunks})")
    return _digest.digest(chunk, algorithm) == auth.chunk_digest[index]


# --------------------------------------------------------------------------
# Merkle trees


def _combine(left: Optional[bytes], right: Optional[bytes], algorithm: str) -> Optional[bytes]:
    if left is None:
        return None
    if right is None:
        return left
    return _digest.digest(left + right, algorithm)


def _width(n: int) -> int:
    return 1 << (n - 1).bit_length()


def tree_depth(num_chunks: int) -> int:
    """Number of rows, leaves included."""
    if num_chunks < 1:
        raise InvalidArgument("a Merkle tree needs at least one leaf")
    return _width(num_chunks).bit_length()


@dataclass(frozen=True)
class MerkleTree:
    """All rows of a hash tree, leaves first, with explicit ``None`` padding."""

    levels: tuple[tuple[Optional[bytes], ...], ...]
    num_chunks: int
    algorithm: str = _digest.DEFAULT_ALGORITHM

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def leaves(self) -> tuple[bytes, ...]:
        return tuple(d for d in self.levels[0] if d is not None)

    def row(self, encoded_row: int) -> tuple[Optional[bytes], ...]:
        """Row by top-down number (0 = root, -1 = leaves)."""
        return self.levels[self._level(encoded_row)]

    def _level(self, encoded_row: int) -> int:
        if encoded_row == -1:
            return 0
        if not 0 <= encoded_row < self.depth:
            raise RangeError(f"row {encoded_row} outside a tree of depth {self.depth}")
        return self.depth - 1 - encoded_row


def merkle_build(leaf_digests: Sequence[bytes], algorithm: str = _digest.DEFAULT_ALGORITHM) -> MerkleTree:
    leaves = list(leaf_digests)
    if not leaves:
        raise InvalidArgument("merkle_build needs at least one leaf")
    if len({len(d) for d in leaves}) != 1:
        raise InvalidArgument("leaf digests must share one length")
    row: list = leaves + [None] * (_width(len(leaves)) - len(leaves))
    levels = [tuple(row)]
    while len(row) > 1:
        row = [_combine(row[i], row[i + 1], algorithm) for i in range(0, len(row), 2)]
        levels.append(tuple(row))
    return MerkleTree(tuple(levels), len(leaves), algorithm)


def default_encoded_row(num_chunks: int) -> int:
    """Top-down row whose width is min(padded leaf count, 64)."""
    depth = tree_depth(num_chunks)
    return min(depth - 1, MAX_ENCODED_WIDTH.bit_length() - 1)


def merkle_authenticator(
    tree: MerkleTree, encoded_row: Optional[int] = None, num_chunks: Optional[int] = None
) -> MerkleTreeAuthenticator:
    if encoded_row is None:
        encoded_row = default_encoded_row(tree.num_chunks)
    if num_chunks is None:
        num_chunks = tree.num_chunks
    if num_chunks != tree.num_chunks:
        raise InvalidArgument(f"num_chunks {num_chunks} != tree leaf count {tree.num_chunks}")
    hashes = [d for d in tree.row(encoded_row) if d is not None]
    return MerkleTreeAuthenticator(encoded_row=encoded_row, num_chunks=num_chunks, chunk_digest=hashes)


@dataclass(frozen=True)
class EvidencePath:
    leaf_index: int
    hashes: tuple[bytes, ...]


def _levels_to_climb(num_chunks: int, encoded_row: int) -> int:
    depth = tree_depth(num_chunks)
    if encoded_row == -1:
        return 0
    if not 0 <= encoded_row < depth:
        raise RangeError(f"row {encoded_row} outside a tree of depth {depth}")
    return depth - 1 - encoded_row


def _sibling_present(node: int, level: int, num_chunks: int) -> bool:
    """Whether the sibling of ``node`` at ``level`` is non-null."""
    sibling = node ^ 1
    return (sibling << level) < num_chunks


def merkle_evidence(tree: MerkleTree, leaf_index: int, encoded_row: int) -> EvidencePath:
    if not 0 <= leaf_index < tree.num_chunks:
        raise RangeError(f"leaf {leaf_index} outside [0, {tree.num_chunks})")
    climb = _levels_to_climb(tree.num_chunks, encoded_row)
    hashes = []
    node = leaf_index
    for level in range(climb):
        sibling = tree.levels[level][node ^ 1]
        if sibling is not None:
            hashes.append(sibling)
        node >>= 1
    return EvidencePath(leaf_index, tuple(hashes))


def fold_evidence(
    chunk_digest: bytes, leaf_index: int, hashes: Sequence[bytes], num_chunks: int, climb: int, algorithm: str
) -> Optional[bytes]:
    """Replay an evidence path; returns the node reached, or None if malformed.

    Sides come from the bits of ``leaf_index``; which siblings are null is
    implied by ``num_chunks``.
    """
    node, acc, it = leaf_index, chunk_digest, iter(hashes)
    for level in range(climb):
        if _sibling_present(node, level, num_chunks):
            sibling = next(it, None)
            if sibling is None:
                return None
            acc = _digest.digest(sibling + acc if node & 1 else acc + sibling, algorithm)
        node >>= 1
    if next(it, None) is not None:
        return None
    return acc


def merkle_verify(
    chunk_digest: bytes,
    path: EvidencePath,
    auth: MerkleTreeAuthenticator,
    algorithm: str = _digest.DEFAULT_ALGORITHM,
) -> bool:
    try:
        if not 0 <= path.leaf_index < auth.num_chunks:
            return False
        climb = _levels_to_climb(auth.num_chunks, auth.encoded_row)
    except Exception:
        return False
    reached = fold_evidence(chunk_digest, path.leaf_index, path.hashes, auth.num_chunks, climb, algorithm)
    column = path.leaf_index >> climb
    return reached is not None and column < len(auth.chunk_digest) and auth.chunk_digest[column] == reached

