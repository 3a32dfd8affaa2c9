"""PBFT replica state machine.

One consensus instance orders one block: the leader of the current view
sends a PrePrepare carrying the next block, every replica that validates it
broadcasts a Prepare, a replica holding a quorum of matching Prepares
broadcasts a Commit, and a quorum of matching Commits commits the block.

A replica that misses traffic catches up from commit certificates (a block
plus a quorum of signed Commits). A stalled view is abandoned through
ViewChange/NewView; the new leader re-proposes the highest prepared block
reported in the ViewChange quorum.

Replicas are driven entirely by :meth:`Replica.on_message` and
:meth:`Replica.on_tick`; time is whatever tick the caller passes in.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

from . import crypto
from . import encoding as enc
from .ledger import Block, Chain, LedgerError, Transaction, _check_successor, genesis, make_block
from .state import TxRejected, WorldState, apply_transaction, execute_block

log = logging.getLogger(__name__)

PRE_PREPARE = 1
PREPARE = 2
COMMIT = 3
VIEW_CHANGE = 4
NEW_VIEW = 5
FETCH = 6
COMMIT_PROOF = 7

TYPE_NAMES = {PRE_PREPARE: "pre_prepare", PREPARE: "prepare", COMMIT: "commit",
              VIEW_CHANGE: "view_change", NEW_VIEW: "new_view", FETCH: "fetch",
              COMMIT_PROOF: "commit_proof"}

ZERO = crypto.ZERO_DIGEST


@dataclass(frozen=True)
class QuorumConfig:
    n: int
    f: int
    quorum: int


def quorum_config(n: int) -> QuorumConfig:
    """f = floor((n-1)/3); quorum = ceil((n+f+1)/2), which is 2f+1 when n = 3f+1.

    The general form keeps any two quorums overlapping in f+1 replicas (so
    in at least one honest one) when n is not of the form 3f+1.
    """
    if n < 1:
        raise ValueError("need at least one replica")
    f = (n - 1) // 3
    return QuorumConfig(n, f, (n + f) // 2 + 1)


def leader_of(view: int, n: int) -> int:
    return view % n


@dataclass(frozen=True)
class Message:
    type: int
    view: int
    seq: int
    digest: bytes
    sender: bytes
    body: bytes = b""
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (enc.u8(self.type) + enc.u64(self.view) + enc.u64(self.seq) + self.digest
                + self.sender + enc.blob(self.body))

    @cached_property
    def encoded(self) -> bytes:
        return self.signing_bytes() + enc.blob(self.signature)

    @classmethod
    def make(cls, type_: int, view: int, seq: int, digest: bytes, keypair: crypto.KeyPair,
             body: bytes = b"") -> "Message":
        unsigned = cls(type_, view, seq, digest, keypair.address, body)
        return cls(type_, view, seq, digest, keypair.address, body,
                   keypair.sign(unsigned.signing_bytes()))

    @classmethod
    def read(cls, r: enc.Reader) -> "Message":
        return cls(r.u8(), r.u64(), r.u64(), r.fixed(32), r.fixed(crypto.ADDRESS_SIZE),
                   r.blob(), r.blob())

    @classmethod
    def decode(cls, data: bytes) -> "Message":
        r = enc.Reader(data)
        msg = cls.read(r)
        r.expect_done()
        return msg

    @cached_property
    def block(self) -> Block | None:
        """The carried block for PrePrepare messages, None if it does not decode."""
        try:
            return Block.decode(self.body)
        except (enc.DecodeError, ValueError):
            return None

    def __repr__(self):
        return (f"<{TYPE_NAMES.get(self.type, self.type)} v={self.view} s={self.seq} "
                f"d={self.digest.hex()[:8]} from={self.sender.hex()[:8]}>")


@dataclass(frozen=True)
class Certificate:
    """A block plus a quorum of matching signed votes (Prepares or Commits)."""

    view: int
    block: Block
    votes: tuple

    def encode(self) -> bytes:
        return (enc.u64(self.view) + enc.blob(self.block.encoded)
                + enc.seq(self.votes, lambda m: enc.blob(m.encoded)))

    @classmethod
    def read(cls, r: enc.Reader) -> "Certificate":
        view = r.u64()
        block = Block.decode(r.blob())
        votes = tuple(r.seq(lambda rr: Message.decode(rr.blob())))
        return cls(view, block, votes)

    def valid(self, vote_type: int, keys: dict, quorum: int) -> bool:
        senders = set()
        digest = self.block.digest
        for m in self.votes:
            if (m.type != vote_type or m.view != self.view or m.seq != self.block.height
                    or m.digest != digest or m.sender in senders):
                return False
            key = keys.get(m.sender)
            if key is None or not crypto.verify(key, m.signing_bytes(), m.signature):
                return False
            senders.add(m.sender)
        return len(senders) >= quorum


def _opt_cert(cert: Certificate | None) -> bytes:
    return enc.u8(0) if cert is None else enc.u8(1) + cert.encode()


def _read_opt_cert(r: enc.Reader) -> Certificate | None:
    flag = r.u8()
    if flag > 1:
        raise enc.DecodeError("bad option flag")
    return Certificate.read(r) if flag else None


@dataclass(frozen=True)
class ViewChangeBody:
    commit_cert: Certificate | None  # for the sender's last committed height
    prepared: Certificate | None  # prepared certificate for the height after that

    def encode(self) -> bytes:
        return _opt_cert(self.commit_cert) + _opt_cert(self.prepared)

    @classmethod
    def decode(cls, data: bytes) -> "ViewChangeBody":
        r = enc.Reader(data)
        body = cls(_read_opt_cert(r), _read_opt_cert(r))
        r.expect_done()
        return body


@dataclass(frozen=True)
class NewViewBody:
    view_changes: tuple
    pre_prepare: Message | None

    def encode(self) -> bytes:
        pp = enc.u8(0) if self.pre_prepare is None else enc.u8(1) + enc.blob(self.pre_prepare.encoded)
        return enc.seq(self.view_changes, lambda m: enc.blob(m.encoded)) + pp

    @classmethod
    def decode(cls, data: bytes) -> "NewViewBody":
        r = enc.Reader(data)
        vcs = tuple(r.seq(lambda rr: Message.decode(rr.blob())))
        flag = r.u8()
        if flag > 1:
            raise enc.DecodeError("bad option flag")
        pp = Message.decode(r.blob()) if flag else None
        r.expect_done()
        return cls(vcs, pp)


class Output(NamedTuple):
    messages: list  # (destination address or None for broadcast, Message)
    committed: list  # blocks committed while handling the input


@dataclass
class Slot:
    pre_prepare: Message | None = None
    block: Block | None = None
    post_state: WorldState | None = None
    prepares: dict = field(default_factory=lambda: defaultdict(dict))
    commits: dict = field(default_factory=lambda: defaultdict(dict))
    prepare_votes: dict = field(default_factory=dict)  # sender -> digest
    commit_votes: dict = field(default_factory=dict)
    sent_prepare: Message | None = None
    sent_commit: Message | None = None


class Replica:
    """One PBFT replica bound to a node keypair and a genesis configuration."""

    MAX_BUFFER = 4096

    def __init__(self, keypair: crypto.KeyPair, config, *, timeout_ticks: int = 40,
                 block_size: int = 50, genesis_block: Block | None = None):
        self.kp = keypair
        self.address = keypair.address
        self.config = config
        self.timeout_ticks = timeout_ticks
        self.retransmit_ticks = max(2, timeout_ticks // 3)
        self.block_size = block_size
        self.chain = Chain(genesis_block or genesis(config))
        self.state = WorldState.from_config(config)
        self.view = 0
        self.in_view_change = False
        self.vc_target = 0
        self.vc_started = 0
        self.vc_attempts = 0
        self.pool: dict[bytes, Transaction] = {}
        self.committed_txs: set[bytes] = set()
        self.slots: dict[tuple[int, int], Slot] = {}
        self.certs: dict[int, Certificate] = {}
        self.commit_views = [0]
        self.prepared: Certificate | None = None
        self.view_changes: dict[int, dict[bytes, Message]] = defaultdict(dict)
        self.new_views: dict[int, Message] = {}
        self.buffer: list[Message] = []
        self.evidence: list[dict] = []
        self._evidence_keys: set = set()
        self.invalid_proposals = 0
        self.now = 0
        self.last_progress = 0
        self.last_retransmit = 0
        self._rate: dict = {}
        self._out: list = []
        self._committed: list = []
        self._refresh_roster()

    # -- roster -------------------------------------------------------------

    def _refresh_roster(self) -> None:
        roster = self.state.roster()
        self.roster = [m.member_address for m in roster]
        self.keys = {m.member_address: m.node_public_key for m in roster}
        self.qc = quorum_config(len(self.roster))

    def leader(self, view: int | None = None) -> bytes:
        v = self.view if view is None else view
        return self.roster[leader_of(v, len(self.roster))]

    @property
    def is_leader(self) -> bool:
        return self.leader() == self.address

    @property
    def committed_height(self) -> int:
        return self.chain.height

    # -- I/O ----------------------------------------------------------------

    def _send(self, dest: bytes, msg: Message) -> None:
        self._out.append((dest, msg))

    def _broadcast(self, msg: Message) -> None:
        self._out.append((None, msg))

    def _sign(self, type_, view, seq, digest, body=b"") -> Message:
        return Message.make(type_, view, seq, digest, self.kp, body)

    def _drain(self) -> Output:
        out = Output(self._out, self._committed)
        self._out, self._committed = [], []
        return out

    def _rate_ok(self, key) -> bool:
        last = self._rate.get(key)
        if last is not None and self.now - last < self.retransmit_ticks:
            return False
        self._rate[key] = self.now
        return True

    def submit(self, tx: Transaction) -> None:
        """Client submission into the local pool."""
        h = tx.tx_hash
        if h not in self.committed_txs and h not in self.pool:
            self.pool[h] = tx

    def _record_evidence(self, kind: str, msg: Message, digests) -> None:
        key = (kind, msg.view, msg.seq, msg.sender)
        if key in self._evidence_keys:
            return
        self._evidence_keys.add(key)
        self.evidence.append({"kind": kind, "view": msg.view, "seq": msg.seq,
                              "replica": msg.sender.hex(),
                              "digests": sorted(d.hex() for d in digests)})
        log.info("equivocation evidence %s from %s at v=%d s=%d", kind,
                 msg.sender.hex()[:8], msg.view, msg.seq)

    # -- entry points ---------------------------------------------------------

    def on_message(self, msg: Message, now: int | None = None) -> Output:
        if now is not None:
            self.now = now
        key = self.keys.get(msg.sender)
        if key is None or msg.sender == self.address:
            return self._drain()
        if not crypto.verify(key, msg.signing_bytes(), msg.signature):
            return self._drain()
        self._dispatch(msg)
        return self._drain()

    def on_tick(self, now: int) -> Output:
        self.now = now
        self.on_timeout()
        self._maybe_retransmit()
        self._maybe_propose()
        return self._drain()

    def _dispatch(self, msg: Message) -> None:
        handler = {
            PRE_PREPARE: self._on_pre_prepare,
            PREPARE: self._on_vote,
            COMMIT: self._on_vote,
            VIEW_CHANGE: self._on_view_change,
            NEW_VIEW: self._on_new_view,
            FETCH: self._on_fetch,
            COMMIT_PROOF: self._on_commit_proof,
        }.get(msg.type)
        if handler is not None:
            handler(msg)

    def _stash(self, msg: Message) -> None:
        self.buffer.append(msg)
        if len(self.buffer) > self.MAX_BUFFER:
            del self.buffer[: len(self.buffer) - self.MAX_BUFFER]

    def _replay_buffer(self) -> None:
        pending, self.buffer = self.buffer, []
        for msg in pending:
            self._dispatch(msg)

    def _fetch(self, peer: bytes) -> None:
        seq = self.committed_height + 1
        if peer != self.address and self._rate_ok(("fetch", peer, seq)):
            self._send(peer, self._sign(FETCH, self.view, seq, ZERO))

    def _serve(self, peer: bytes, seq: int) -> None:
        cert = self.certs.get(seq)
        if cert is not None and peer != self.address and self._rate_ok(("proof", peer, seq)):
            self._send(peer, self._sign(COMMIT_PROOF, cert.view, seq, cert.block.digest,
                                        cert.encode()))

    def _slot(self, view: int, seq: int) -> Slot:
        slot = self.slots.get((view, seq))
        if slot is None:
            slot = self.slots[(view, seq)] = Slot()
        return slot

    # -- proposal -------------------------------------------------------------

    def _pending_work(self) -> bool:
        slot = self.slots.get((self.view, self.committed_height + 1))
        return bool(self.pool) or (slot is not None and slot.pre_prepare is not None)

    def _revalidate_pool(self) -> None:
        """Drop pool entries that no longer apply on top of committed state."""
        trial = self.state.copy()
        trial.height = self.committed_height + 1
        for h, tx in list(self.pool.items()):
            try:
                apply_transaction(trial, tx)
            except TxRejected:
                del self.pool[h]

    def build_block(self) -> Block | None:
        """Next block from the pool; rejected transactions leave the pool."""
        trial = self.state.copy()
        trial.height = self.committed_height + 1
        chosen = []
        for h, tx in list(self.pool.items()):
            if len(chosen) >= self.block_size:
                break
            try:
                apply_transaction(trial, tx)
            except TxRejected as exc:
                log.debug("dropping tx %s: %s", h.hex()[:8], exc.code)
                del self.pool[h]
                continue
            chosen.append(tx)
        if not chosen:
            return None
        tip = self.chain.tip
        return make_block(trial.height, tip.header.hash(), chosen, trial.root(),
                          max(self.now, tip.header.timestamp), self.kp)

    def on_propose(self) -> Message | None:
        """Emit a PrePrepare for the next height if this replica leads the view."""
        if not self.is_leader or self.in_view_change:
            return None
        seq = self.committed_height + 1
        slot = self.slots.get((self.view, seq))
        if slot is not None and slot.pre_prepare is not None:
            return None
        block = self.build_block()
        if block is None:
            return None
        pp = self._sign(PRE_PREPARE, self.view, seq, block.digest, block.encoded)
        self._broadcast(pp)
        self._accept_pre_prepare(pp, block)
        return pp

    def _maybe_propose(self) -> None:
        if self.pool:
            self.on_propose()

    # -- normal case ----------------------------------------------------------

    def validate_block(self, block: Block, seq: int) -> WorldState | None:
        """Post-state if ``block`` is a valid successor of the committed tip."""
        if block.height != seq:
            return None
        try:
            _check_successor(self.chain.tip, block)
        except LedgerError:
            return None
        if block.header.proposer not in self.keys:
            return None
        if block.header.timestamp < self.chain.tip.header.timestamp:
            return None
        try:
            post = execute_block(self.state, block)
        except TxRejected:
            return None
        if post.root() != block.header.state_root:
            return None
        return post

    def _on_pre_prepare(self, msg: Message) -> None:
        if msg.sender != self.leader(msg.view) or msg.digest != crypto.hash(msg.body):
            return
        block = msg.block
        if block is None:
            return
        committed = self.committed_height
        if msg.seq <= committed:
            if (msg.view == self.view and not self.in_view_change
                    and self.chain[msg.seq].digest == msg.digest):
                self._revote(msg)
            self._serve(msg.sender, msg.seq)
            return
        if msg.view < self.view:
            return
        if msg.view > self.view or (self.in_view_change and msg.view >= self.vc_target):
            self._stash(msg)
            return
        if self.in_view_change:
            return
        if msg.seq > committed + 1:
            self._stash(msg)
            self._fetch(msg.sender)
            return
        slot = self._slot(msg.view, msg.seq)
        if slot.pre_prepare is not None:
            if slot.pre_prepare.digest != msg.digest:
                self._record_evidence("pre_prepare", msg, {slot.pre_prepare.digest, msg.digest})
            return
        self._accept_pre_prepare(msg, block)

    def _accept_pre_prepare(self, msg: Message, block: Block) -> None:
        slot = self._slot(msg.view, msg.seq)
        post = self.validate_block(block, msg.seq)
        if post is None:
            self.invalid_proposals += 1
            log.info("replica %s rejects proposal v=%d s=%d", self.address.hex()[:8],
                     msg.view, msg.seq)
            return
        slot.pre_prepare, slot.block, slot.post_state = msg, block, post
        prepare = self._sign(PREPARE, msg.view, msg.seq, msg.digest)
        slot.sent_prepare = prepare
        self._record_vote(slot, prepare)
        self._broadcast(prepare)
        self._progress(slot, msg.view, msg.seq)

    def _revote(self, msg: Message) -> None:
        """Re-vote for a block already committed here so peers re-proposing it
        in a later view can still reach a quorum."""
        slot = self._slot(msg.view, msg.seq)
        if slot.sent_commit is not None:
            return
        for type_ in (PREPARE, COMMIT):
            vote = self._sign(type_, msg.view, msg.seq, msg.digest)
            self._broadcast(vote)
            if type_ == PREPARE:
                slot.sent_prepare = vote
            else:
                slot.sent_commit = vote

    def _record_vote(self, slot: Slot, msg: Message) -> bool:
        votes, tally = ((slot.prepare_votes, slot.prepares) if msg.type == PREPARE
                        else (slot.commit_votes, slot.commits))
        prior = votes.get(msg.sender)
        if prior is not None:
            if prior != msg.digest:
                self._record_evidence(TYPE_NAMES[msg.type], msg, {prior, msg.digest})
            return False
        votes[msg.sender] = msg.digest
        tally[msg.digest][msg.sender] = msg
        return True

    def _on_vote(self, msg: Message) -> None:
        committed = self.committed_height
        if msg.seq <= committed:
            self._serve(msg.sender, msg.seq)
            return
        if msg.view < self.view:
            return
        if msg.view > self.view or msg.seq > committed + 1:
            self._stash(msg)
            if msg.seq > committed + 1:
                self._fetch(msg.sender)
            return
        slot = self._slot(msg.view, msg.seq)
        if self._record_vote(slot, msg):
            self._progress(slot, msg.view, msg.seq)

    def _progress(self, slot: Slot, view: int, seq: int) -> None:
        if slot.pre_prepare is None:
            return
        digest = slot.pre_prepare.digest
        if (slot.sent_commit is None and not self.in_view_change
                and len(slot.prepares[digest]) >= self.qc.quorum):
            self.prepared = Certificate(view, slot.block, self._votes(slot.prepares[digest]))
            commit = self._sign(COMMIT, view, seq, digest)
            slot.sent_commit = commit
            self._record_vote(slot, commit)
            self._broadcast(commit)
        if len(slot.commits[digest]) >= self.qc.quorum and seq == self.committed_height + 1:
            cert = Certificate(view, slot.block, self._votes(slot.commits[digest]))
            self._commit(slot.block, slot.post_state, cert)

    def _votes(self, by_sender: dict) -> tuple:
        return tuple(by_sender[s] for s in sorted(by_sender))[: self.qc.quorum]

    def _commit(self, block: Block, post_state: WorldState, cert: Certificate) -> None:
        self.chain.append(block)
        self.state = post_state
        self.certs[block.height] = cert
        self.commit_views.append(cert.view)
        for tx in block.transactions:
            self.committed_txs.add(tx.tx_hash)
            self.pool.pop(tx.tx_hash, None)
        self._committed.append(block)
        self.last_progress = self.now
        self.vc_attempts = 0
        if self.prepared is not None and self.prepared.block.height <= block.height:
            self.prepared = None
        for key in [k for k in self.slots if k[1] <= block.height]:
            del self.slots[key]
        self._refresh_roster()
        log.debug("replica %s committed height %d in view %d", self.address.hex()[:8],
                  block.height, cert.view)
        if self.in_view_change:
            self._try_new_view(self.vc_target)
        self._replay_buffer()
        self._maybe_propose()

    # -- catch-up -------------------------------------------------------------

    def _on_fetch(self, msg: Message) -> None:
        if 1 <= msg.seq <= self.committed_height:
            self._serve(msg.sender, msg.seq)

    def _adopt(self, cert: Certificate) -> bool:
        """Commit ``cert``'s block if it extends the tip and the certificate holds."""
        if cert.block.height != self.committed_height + 1:
            return False
        if not cert.valid(COMMIT, self.keys, self.qc.quorum):
            return False
        post = None
        for (v, s), slot in self.slots.items():
            if s == cert.block.height and slot.block is not None \
                    and slot.block.digest == cert.block.digest:
                post = slot.post_state
                break
        if post is None:
            post = self.validate_block(cert.block, cert.block.height)
        if post is None:
            log.info("certified block at height %d failed local validation", cert.block.height)
            return False
        self._commit(cert.block, post, cert)
        return True

    def _on_commit_proof(self, msg: Message) -> None:
        try:
            cert = Certificate.read(enc.Reader(msg.body))
        except (enc.DecodeError, ValueError):
            return
        if cert.block.height == self.committed_height + 1:
            self._adopt(cert)
        elif cert.block.height > self.committed_height + 1:
            self._fetch(msg.sender)

    # -- view change ----------------------------------------------------------

    def on_timeout(self) -> Message | None:
        """Start (or escalate) a view change when the commit timer has expired."""
        if self.in_view_change:
            wait = self.timeout_ticks * (2 ** min(self.vc_attempts, 6))
            if self.now - self.vc_started >= wait:
                self.vc_attempts += 1
                return self.start_view_change(self.vc_target + 1)
            return None
        if self.now - self.last_progress < self.timeout_ticks:
            return None
        if not self._pending_work():
            return None
        self._revalidate_pool()
        if not self._pending_work():
            return None
        return self.start_view_change(self.view + 1)

    def start_view_change(self, target: int) -> Message:
        self.in_view_change = True
        self.vc_target = target
        self.vc_started = self.now
        prepared = self.prepared
        if prepared is not None and prepared.block.height != self.committed_height + 1:
            prepared = None
        body = ViewChangeBody(self.certs.get(self.committed_height), prepared)
        msg = self._sign(VIEW_CHANGE, target, self.committed_height, ZERO, body.encode())
        self.view_changes[target][self.address] = msg
        self._broadcast(msg)
        log.info("replica %s starts view change to %d", self.address.hex()[:8], target)
        self._try_new_view(target)
        return msg

    def _check_view_change(self, msg: Message) -> ViewChangeBody | None:
        try:
            body = ViewChangeBody.decode(msg.body)
        except (enc.DecodeError, ValueError):
            return None
        cc = body.commit_cert
        if msg.seq > 0:
            if cc is None or cc.block.height != msg.seq:
                return None
            if not cc.valid(COMMIT, self.keys, self.qc.quorum):
                return None
        elif cc is not None:
            return None
        p = body.prepared
        if p is not None:
            if (p.block.height != msg.seq + 1 or p.view >= msg.view
                    or not p.valid(PREPARE, self.keys, self.qc.quorum)):
                return None
        return body

    def _on_view_change(self, msg: Message) -> None:
        body = self._check_view_change(msg)
        if body is None:
            return
        if msg.seq < self.committed_height:
            self._serve(msg.sender, msg.seq + 1)
        elif msg.seq == self.committed_height + 1 and body.commit_cert is not None:
            self._adopt(body.commit_cert)
        elif msg.seq > self.committed_height + 1:
            self._fetch(msg.sender)
        if msg.view <= self.view:
            return
        self.view_changes[msg.view][msg.sender] = msg
        # join once f+1 replicas have moved past our view
        floor = self.vc_target if self.in_view_change else self.view
        ahead = {}
        for v, by_sender in self.view_changes.items():
            if v > floor:
                for sender in by_sender:
                    if sender != self.address:
                        ahead[sender] = min(v, ahead.get(sender, v))
        if len(ahead) >= self.qc.f + 1:
            target = sorted(ahead.values())[-(self.qc.f + 1)]
            if target > floor:
                self.start_view_change(target)
        self._try_new_view(msg.view)

    def _new_view_choice(self, vcs) -> tuple[int, Block | None]:
        """Highest committed height in the quorum and the block to re-propose."""
        h = max(m.seq for m in vcs)
        best = None
        for m in vcs:
            if m.seq != h:
                continue
            p = ViewChangeBody.decode(m.body).prepared
            if p is not None and (best is None or p.view > best.view):
                best = p
        return h, (best.block if best is not None else None)

    def _try_new_view(self, view: int) -> None:
        if (view in self.new_views or self.leader(view) != self.address
                or view < self.view or (view == self.view and not self.in_view_change)):
            return
        by_sender = self.view_changes.get(view, {})
        if len(by_sender) < self.qc.quorum:
            return
        vcs = tuple(by_sender[s] for s in sorted(by_sender))[: self.qc.quorum]
        h, block = self._new_view_choice(vcs)
        if self.committed_height < h:
            for m in vcs:
                if m.seq == h:
                    cert = ViewChangeBody.decode(m.body).commit_cert
                    if cert is not None and not self._adopt(cert):
                        self._fetch(m.sender)
                    break
            return
        pp = None
        if block is not None:
            pp = self._sign(PRE_PREPARE, view, h + 1, block.digest, block.encoded)
        nv = self._sign(NEW_VIEW, view, h, ZERO, NewViewBody(vcs, pp).encode())
        self.new_views[view] = nv
        self._broadcast(nv)
        self._enter_view(view)
        if pp is not None:
            self._accept_pre_prepare(pp, block)
        else:
            self._maybe_propose()

    def _on_new_view(self, msg: Message) -> None:
        view = msg.view
        if view < self.view or (view == self.view and not self.in_view_change):
            return
        if msg.sender != self.leader(view):
            return
        try:
            body = NewViewBody.decode(msg.body)
        except (enc.DecodeError, ValueError):
            return
        senders = set()
        for vc in body.view_changes:
            key = self.keys.get(vc.sender)
            if (vc.type != VIEW_CHANGE or vc.view != view or vc.sender in senders or key is None
                    or not crypto.verify(key, vc.signing_bytes(), vc.signature)
                    or self._check_view_change(vc) is None):
                return
            senders.add(vc.sender)
        if len(senders) < self.qc.quorum:
            return
        h, block = self._new_view_choice(body.view_changes)
        pp = body.pre_prepare
        if pp is not None and (pp.type != PRE_PREPARE or pp.view != view or pp.seq != h + 1
                               or pp.sender != msg.sender):
            return
        if block is not None and (pp is None or pp.digest != block.digest):
            return
        self.new_views[view] = msg
        self._enter_view(view)
        if self.committed_height < h:
            for vc in body.view_changes:
                if vc.seq == self.committed_height + 1:
                    self._adopt(ViewChangeBody.decode(vc.body).commit_cert)
                    break
            if self.committed_height < h:
                self._fetch(msg.sender)
        if pp is not None:
            self._on_pre_prepare(pp)

    def _enter_view(self, view: int) -> None:
        log.info("replica %s enters view %d", self.address.hex()[:8], view)
        self.view = view
        self.in_view_change = False
        self.vc_target = view
        self.vc_attempts = 0
        self.last_progress = self.now
        for key in [k for k in self.slots if k[0] < view]:
            del self.slots[key]
        for v in [v for v in self.view_changes if v < view]:
            del self.view_changes[v]
        self._replay_buffer()

    # -- retransmission -------------------------------------------------------

    def _maybe_retransmit(self) -> None:
        if self.now - self.last_retransmit < self.retransmit_ticks:
            return
        if self.now - self.last_progress < self.retransmit_ticks:
            return
        self.last_retransmit = self.now
        if self.in_view_change:
            own = self.view_changes.get(self.vc_target, {}).get(self.address)
            if own is not None:
                self._broadcast(own)
            return
        nv = self.new_views.get(self.view)
        if nv is not None and nv.sender == self.address and self._pending_work():
            self._broadcast(nv)
        slot = self.slots.get((self.view, self.committed_height + 1))
        if slot is None:
            return
        if slot.pre_prepare is not None and slot.pre_prepare.sender == self.address:
            self._broadcast(slot.pre_prepare)
        for sent in (slot.sent_prepare, slot.sent_commit):
            if sent is not None:
                self._broadcast(sent)
