"""Pure-Python Merkle kernels. Same contract as the compiled ``_kernels``."""
from hashlib import sha256

ZERO32 = bytes(32)


def leaf_hashes(items):
    return [sha256(item).digest() for item in items]


def merkle_root(leaves):
    """Root over pre-hashed leaves; an odd layer duplicates its last node."""
    if not leaves:
        return ZERO32
    layer = list(leaves)
    while len(layer) > 1:
        if len(layer) % 2:
            layer.append(layer[-1])
        layer = [sha256(layer[i] + layer[i + 1]).digest() for i in range(0, len(layer), 2)]
    return layer[0]


def merkle_root_of(items):
    return merkle_root(leaf_hashes(items))
