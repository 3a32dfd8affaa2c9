"""Append-only hash-pointer chain, Merkle commitments and the block log."""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

from . import crypto
from . import encoding as enc
from .kernels import merkle_root_of, merkle_root as merkle_root_from_leaves

ZERO_HASH = crypto.ZERO_DIGEST


class TxKind(enum.IntEnum):
    REGISTER_IDENTITY = 1
    ENROLL = 2
    RECORD_ATTENDANCE = 3
    ISSUE_HALL_TICKET = 4
    REDEEM_HALL_TICKET = 5
    COMMIT_QUESTION_BANK = 6
    GENERATE_EXAM_PAPER = 7
    REGISTER_ASSET = 8
    RECORD_ASSET_MOVEMENT = 9
    UPDATE_INVENTORY = 10
    RECORD_GRADE = 11
    ISSUE_CERTIFICATE = 12
    MEMBERSHIP = 13


class LedgerError(Exception):
    """Raised by append_block; ``code`` names the violated rule."""

    HASH_POINTER_MISMATCH = "hash-pointer-mismatch"
    HEIGHT_GAP = "height-gap"
    MERKLE_MISMATCH = "merkle-mismatch"
    EMPTY_BLOCK = "empty-block"
    BAD_SEAL = "bad-seal"

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class Transaction:
    kind: int
    sender: bytes
    payload: bytes
    nonce: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (
            enc.u8(self.kind)
            + self.sender
            + enc.blob(self.payload)
            + enc.u64(self.nonce)
        )

    @cached_property
    def encoded(self) -> bytes:
        return self.signing_bytes() + enc.blob(self.signature)

    def encode(self) -> bytes:
        return self.encoded

    @cached_property
    def tx_hash(self) -> bytes:
        return crypto.hash(self.encoded)

    @classmethod
    def read(cls, r: enc.Reader) -> "Transaction":
        kind = r.u8()
        sender = r.fixed(crypto.ADDRESS_SIZE)
        payload = r.blob()
        nonce = r.u64()
        signature = r.blob()
        return cls(kind, sender, payload, nonce, signature)

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = enc.Reader(data)
        tx = cls.read(r)
        r.expect_done()
        return tx

    @classmethod
    def create(cls, kind: int, keypair: crypto.KeyPair, payload: bytes, nonce: int) -> "Transaction":
        unsigned = cls(int(kind), keypair.address, payload, nonce)
        return cls(int(kind), keypair.address, payload, nonce,
                   keypair.sign(unsigned.signing_bytes()))


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    tx_merkle_root: bytes
    state_root: bytes
    timestamp: int
    proposer: bytes

    def encode(self) -> bytes:
        return (
            enc.u64(self.height)
            + self.prev_hash
            + self.tx_merkle_root
            + self.state_root
            + enc.u64(self.timestamp)
            + self.proposer
        )

    def hash(self) -> bytes:
        return crypto.hash(self.encode())

    @classmethod
    def read(cls, r: enc.Reader) -> "BlockHeader":
        return cls(r.u64(), r.fixed(32), r.fixed(32), r.fixed(32), r.u64(),
                   r.fixed(crypto.ADDRESS_SIZE))


@dataclass(frozen=True)
class Block:
    """Header, ordered transactions and the proposer's seal over the header.

    The seal (proposer public key and signature over the header hash) makes a
    header edit detectable at the edited height even for the chain tip, which
    no later hash pointer covers.
    """

    header: BlockHeader
    transactions: tuple = ()
    proposer_key: bytes = bytes(crypto.PUBLIC_KEY_SIZE)
    seal: bytes = b""

    @cached_property
    def encoded(self) -> bytes:
        return (
            self.header.encode()
            + enc.seq(self.transactions, lambda tx: enc.blob(tx.encoded))
            + self.proposer_key
            + enc.blob(self.seal)
        )

    def encode(self) -> bytes:
        return self.encoded

    @cached_property
    def digest(self) -> bytes:
        return crypto.hash(self.encoded)

    @property
    def height(self) -> int:
        return self.header.height

    @classmethod
    def read(cls, r: enc.Reader) -> "Block":
        header = BlockHeader.read(r)
        txs = tuple(r.seq(lambda rr: Transaction.decode(rr.blob())))
        key = r.fixed(crypto.PUBLIC_KEY_SIZE)
        seal = r.blob()
        return cls(header, txs, key, seal)

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = enc.Reader(data)
        block = cls.read(r)
        r.expect_done()
        return block

    def seal_ok(self) -> bool:
        if self.header.height == 0:
            # genesis is rebuilt from public config, so it is sealed by its own hash
            return (self.proposer_key == bytes(crypto.PUBLIC_KEY_SIZE)
                    and self.header.proposer == crypto.ZERO_ADDRESS
                    and self.seal == self.header.hash())
        try:
            if crypto.derive_address(self.proposer_key) != self.header.proposer:
                return False
        except crypto.MalformedKey:
            return False
        return crypto.verify(self.proposer_key, self.header.hash(), self.seal)


def make_block(height: int, prev_hash: bytes, transactions: Sequence[Transaction],
               state_root: bytes, timestamp: int, proposer: crypto.KeyPair) -> Block:
    header = BlockHeader(height, prev_hash, merkle_root(transactions), state_root,
                         timestamp, proposer.address)
    return Block(header, tuple(transactions), proposer.public_key,
                 proposer.sign(header.hash()))


# -- Merkle commitments -----------------------------------------------------

def _leaf_bytes(item) -> bytes:
    return item if isinstance(item, (bytes, bytearray)) else item.encode()


def merkle_root(items: Iterable) -> bytes:
    """Root over ``hash(encoding)`` leaves; empty list gives 32 zero bytes.

    Items are transactions (or anything with ``encode()``) or raw byte strings.
    """
    return merkle_root_of([_leaf_bytes(i) for i in items])


def merkle_proof(items: Sequence, index: int) -> list[tuple[bytes, bool]]:
    """Sibling path from leaf ``index`` to the root.

    Each step is ``(sibling_digest, sibling_is_left)``.
    """
    if not 0 <= index < len(items):
        raise IndexError(f"leaf index {index} out of range for {len(items)} leaves")
    layer = [crypto.hash(_leaf_bytes(i)) for i in items]
    path = []
    while len(layer) > 1:
        if len(layer) % 2:
            layer.append(layer[-1])
        sibling = index ^ 1
        path.append((layer[sibling], sibling < index))
        layer = [crypto.hash(layer[i] + layer[i + 1]) for i in range(0, len(layer), 2)]
        index //= 2
    return path


def verify_merkle_proof(root: bytes, leaf: bytes, proof: Sequence[tuple[bytes, bool]]) -> bool:
    """Check that the leaf encoding ``leaf`` is committed under ``root``."""
    node = crypto.hash(leaf)
    for sibling, sibling_is_left in proof:
        if len(sibling) != crypto.DIGEST_SIZE:
            return False
        node = crypto.hash(sibling + node) if sibling_is_left else crypto.hash(node + sibling)
    return node == root


# -- Chain --------------------------------------------------------------------

def _check_successor(prev: Block | None, block: Block) -> None:
    expected_height = 0 if prev is None else prev.height + 1
    expected_prev = ZERO_HASH if prev is None else prev.header.hash()
    if block.header.height != expected_height:
        raise LedgerError(LedgerError.HEIGHT_GAP,
                          f"expected height {expected_height}, got {block.header.height}")
    if block.header.prev_hash != expected_prev:
        raise LedgerError(LedgerError.HASH_POINTER_MISMATCH, f"at height {block.height}")
    if merkle_root(block.transactions) != block.header.tx_merkle_root:
        raise LedgerError(LedgerError.MERKLE_MISMATCH, f"at height {block.height}")
    if prev is not None and not block.transactions:
        raise LedgerError(LedgerError.EMPTY_BLOCK, f"at height {block.height}")
    if prev is None and block.transactions:
        raise LedgerError(LedgerError.EMPTY_BLOCK, "genesis carries no transactions")
    if not block.seal_ok():
        raise LedgerError(LedgerError.BAD_SEAL, f"at height {block.height}")


class Chain:
    """Append-only block sequence. There is deliberately no way to edit or drop blocks."""

    def __init__(self, genesis_block: Block):
        _check_successor(None, genesis_block)
        self._blocks: list[Block] = [genesis_block]

    def __len__(self) -> int:
        return len(self._blocks)

    def __getitem__(self, height: int) -> Block:
        return self._blocks[height]

    def __iter__(self):
        return iter(self._blocks)

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def height(self) -> int:
        return len(self._blocks) - 1

    def append(self, block: Block) -> "Chain":
        _check_successor(self._blocks[-1], block)
        self._blocks.append(block)
        return self


def append_block(chain: Chain, block: Block) -> Chain:
    return chain.append(block)


def verify_chain(blocks: Iterable) -> int | None:
    """Return None when every block checks, else the lowest failing height.

    ``blocks`` may hold Block objects or raw block encodings; an encoding that
    does not decode fails at its position.
    """
    prev = None
    for position, item in enumerate(blocks):
        if isinstance(item, (bytes, bytearray)):
            try:
                block = Block.decode(bytes(item))
            except (enc.DecodeError, ValueError):
                return position
        else:
            block = item
        if block.header.height != position:
            return position
        try:
            _check_successor(prev, block)
        except LedgerError:
            return position
        prev = block
    return None


# -- Block log file -----------------------------------------------------------
# One record per block: u32 big-endian length followed by the block encoding.

def write_log(path: str | os.PathLike, blocks: Iterable[Block]) -> None:
    with open(path, "wb") as fh:
        for block in blocks:
            fh.write(enc.blob(block.encoded))


def append_log(path: str | os.PathLike, block: Block) -> None:
    with open(path, "ab") as fh:
        fh.write(enc.blob(block.encoded))
        fh.flush()
        os.fsync(fh.fileno())


def read_log_records(path: str | os.PathLike) -> list[bytes]:
    """Split a log into raw block encodings. A torn trailing record is kept
    as-is so verification reports it instead of silently dropping it."""
    data = Path(path).read_bytes()
    records = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            records.append(data[pos:])
            break
        length = enc.U32.unpack_from(data, pos)[0]
        records.append(data[pos + 4:pos + 4 + length])
        pos += 4 + length
    return records


def load_chain(path: str | os.PathLike) -> Chain:
    records = read_log_records(path)
    if not records:
        raise LedgerError(LedgerError.HEIGHT_GAP, "empty log")
    chain = Chain(Block.decode(records[0]))
    for raw in records[1:]:
        chain.append(Block.decode(raw))
    return chain


def genesis(config) -> Block:
    """Height-0 block committing to the initial world state built from ``config``."""
    from .state import WorldState  # state depends on ledger types

    state = WorldState.from_config(config)
    header = BlockHeader(0, ZERO_HASH, ZERO_HASH, state.root(), config.genesis_time,
                         crypto.ZERO_ADDRESS)
    return Block(header, (), bytes(crypto.PUBLIC_KEY_SIZE), header.hash())
