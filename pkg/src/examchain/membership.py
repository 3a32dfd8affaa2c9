"""Membership service: the university admits and revokes college nodes.

Changes are ordinary MEMBERSHIP transactions, so the roster is on-chain and
auditable. Consensus reads the roster from committed state, which means a
change only affects sequence numbers after the block that carries it.
"""
from __future__ import annotations

from . import crypto
from .ledger import Transaction
from .state import MemberKind, MembershipChange, MemberRecord, WorldState, apply_transaction, make_tx


def admit_tx(controller: crypto.KeyPair, kind: MemberKind | str, node_public_key: bytes,
             nonce: int) -> Transaction:
    return make_tx(controller, MembershipChange("admit", MemberKind(kind).value, node_public_key),
                   nonce)


def revoke_tx(controller: crypto.KeyPair, member_address: bytes, nonce: int) -> Transaction:
    return make_tx(controller, MembershipChange("revoke", member_address=member_address), nonce)


def register_device_tx(controller: crypto.KeyPair, device_id: str, public_key: bytes,
                       nonce: int) -> Transaction:
    return make_tx(controller, MembershipChange("register_device", public_key=public_key,
                                                device_id=device_id), nonce)


def admit_member(state: WorldState, tx: Transaction) -> WorldState:
    return apply_transaction(state, tx)


def revoke_member(state: WorldState, tx: Transaction) -> WorldState:
    return apply_transaction(state, tx)


def replica_keys(state: WorldState) -> list[bytes]:
    """Node public keys of the current replica set, in admission order."""
    return [m.node_public_key for m in state.roster()]


def members(state: WorldState) -> list[MemberRecord]:
    return state.roster()
