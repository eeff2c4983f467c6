"""Commit four evidence items, prove one of them, then change another.

Run: python demos/01_merkle_commitment.py
"""

from oranattest import merkle

payloads = [b"ru-capabilities", b"macsec-enabled=true", b"ptp-profile.cfg", b"reporter-binary"]
leaves = [merkle.sha256(p) for p in payloads]
root, tree = merkle.build_tree(leaves)

print("leaves:")
for p, leaf in zip(payloads, leaves):
    print(f"  {leaf.hex()[:16]}...  {p.decode()}")
print(f"root:   {root.hex()}")

# A tenant that only needs item 1 gets its digest plus a two-step sibling path.
proof = tree.proof(1)
print("\ninclusion proof for item 1:")
for digest, side in proof.path:
    print(f"  sibling on {side.value}: {digest.hex()[:16]}...")
print("proof verifies:", merkle.verify_proof(root, leaves[1], proof))
print("proof rejects a forged leaf:", not merkle.verify_proof(root, merkle.sha256(b"macsec-enabled=false"), proof))

# Changing one item touches only its path to the root.
new_leaf = merkle.sha256(b"ptp-profile-v2.cfg")
updated = merkle.update_leaf(tree, 2, new_leaf)
rebuilt = merkle.merkle_root(leaves[:2] + [new_leaf] + leaves[3:])
print(f"\nafter updating item 2: {updated.hex()}")
print("matches a full rebuild:", updated == rebuilt)
