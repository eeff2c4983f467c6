"""Binary SHA-256 Merkle commitment over an ordered list of leaf digests.

Interior nodes are ``SHA256(left || right)``. A node without a right sibling
is paired with itself, both when building and when updating a tree, so the
incremental path and a full rebuild always agree.

Leaf and interior hashes share one hash function with no domain-separation
prefix. A 64-byte leaf payload can therefore collide with an interior node
(the classic second-preimage caveat). Leaves here are always digests of
evidence payloads, which keeps the caveat theoretical, but do not feed raw
concatenated digests in as evidence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import EmptyEvidenceSet, IndexOutOfRange, TreeTooLarge

DIGEST_SIZE = 32
MAX_LEAVES = 1 << 16

Digest = bytes


def sha256(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


leaf_hash = sha256


def _node_hash(left: Digest, right: Digest) -> Digest:
    return hashlib.sha256(left + right).digest()


def _check_digest(value: bytes, what: str = "digest") -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != DIGEST_SIZE:
        raise ValueError(f"{what} must be {DIGEST_SIZE} bytes")


class Side(str, Enum):
    """Position of the sibling relative to the running hash."""

    LEFT = "L"
    RIGHT = "R"


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    path: tuple[tuple[Digest, Side], ...]

    def to_json(self) -> list[dict[str, str]]:
        return [{"digest": d.hex(), "side": s.value} for d, s in self.path]

    @classmethod
    def from_json(cls, leaf_index: int, items: Iterable[dict]) -> "InclusionProof":
        path = []
        for item in items:
            d = bytes.fromhex(item["digest"])
            _check_digest(d, "proof digest")
            path.append((d, Side(item["side"])))
        return cls(int(leaf_index), tuple(path))


class MerkleTree:
    """All levels of a built tree; ``levels[0]`` holds the leaf digests.

    Single writer: ``update_leaf`` mutates in place and must not race with
    other calls on the same tree.
    """

    __slots__ = ("levels",)

    def __init__(self, levels: list[list[Digest]]) -> None:
        self.levels = levels

    @property
    def root(self) -> Digest:
        return self.levels[-1][0]

    @property
    def leaves(self) -> list[Digest]:
        return self.levels[0]

    @property
    def leaf_count(self) -> int:
        return len(self.levels[0])

    @property
    def height(self) -> int:
        return len(self.levels) - 1

    def copy(self) -> "MerkleTree":
        return MerkleTree([list(level) for level in self.levels])

    def update_leaf(self, index: int, new_leaf: Digest) -> Digest:
        return update_leaf(self, index, new_leaf)

    def proof(self, index: int) -> InclusionProof:
        return gen_proof(self, index)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MerkleTree) and self.levels == other.levels

    def __repr__(self) -> str:
        return f"MerkleTree(leaves={self.leaf_count}, root={self.root.hex()[:16]}...)"


def build_tree(leaf_digests: Sequence[Digest]) -> tuple[Digest, MerkleTree]:
    """Build the tree bottom-up and return ``(root, tree)``.

    The caller hashes raw payloads first; ``leaf_digests`` are already
    ``SHA256(payload)`` values in canonical order.
    """
    if len(leaf_digests) == 0:
        raise EmptyEvidenceSet("cannot build a Merkle tree over zero leaves")
    if len(leaf_digests) > MAX_LEAVES:
        raise TreeTooLarge(f"{len(leaf_digests)} leaves exceeds limit of {MAX_LEAVES}")
    for d in leaf_digests:
        _check_digest(d, "leaf digest")

    level = [bytes(d) for d in leaf_digests]
    levels = [level]
    while len(level) > 1:
        nxt = []
        n = len(level)
        for i in range(0, n, 2):
            left = level[i]
            right = level[i + 1] if i + 1 < n else left
            nxt.append(_node_hash(left, right))
        levels.append(nxt)
        level = nxt
    return level[0], MerkleTree(levels)


def merkle_root(leaf_digests: Sequence[Digest]) -> Digest:
    return build_tree(leaf_digests)[0]


def update_leaf(tree: MerkleTree, index: int, new_leaf: Digest) -> Digest:
    """Replace one leaf and recompute only the nodes on its path to the root."""
    levels = tree.levels
    if not 0 <= index < len(levels[0]):
        raise IndexOutOfRange(f"leaf index {index} out of range [0, {len(levels[0])})")
    _check_digest(new_leaf, "leaf digest")

    levels[0][index] = bytes(new_leaf)
    current = index
    for lvl in range(1, len(levels)):
        p = current // 2
        below = levels[lvl - 1]
        left = below[2 * p]
        right = below[2 * p + 1] if 2 * p + 1 < len(below) else left
        levels[lvl][p] = _node_hash(left, right)
        current = p
    return levels[-1][0]


def gen_proof(tree: MerkleTree, index: int) -> InclusionProof:
    levels = tree.levels
    if not 0 <= index < len(levels[0]):
        raise IndexOutOfRange(f"leaf index {index} out of range [0, {len(levels[0])})")
    path = []
    current = index
    for level in levels[:-1]:
        if current % 2 == 0:
            sib = current + 1
            sibling = level[sib] if sib < len(level) else level[current]
            path.append((sibling, Side.RIGHT))
        else:
            path.append((level[current - 1], Side.LEFT))
        current //= 2
    return InclusionProof(index, tuple(path))


def verify_proof(root: Digest, leaf_digest: Digest, proof: InclusionProof) -> bool:
    """Fold ``leaf_digest`` up ``proof.path`` and compare with ``root``.

    The side at each level must match the corresponding bit of
    ``proof.leaf_index``; this matters at duplicated nodes, where the hash
    alone cannot tell left from right.
    """
    if len(root) != DIGEST_SIZE or len(leaf_digest) != DIGEST_SIZE:
        return False
    index = proof.leaf_index
    if index < 0 or index >= (1 << len(proof.path)):
        return False
    h = leaf_digest
    for sibling, side in proof.path:
        if len(sibling) != DIGEST_SIZE:
            return False
        expected = Side.LEFT if index & 1 else Side.RIGHT
        if side != expected:
            return False
        h = _node_hash(sibling, h) if side is Side.LEFT else _node_hash(h, sibling)
        index >>= 1
    return h == root
