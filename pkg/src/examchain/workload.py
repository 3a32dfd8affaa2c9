"""Deterministic actors and transaction workloads for scenarios and tests."""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import crypto
from . import iot
from .config import GenesisConfig, IdentitySpec, MemberSpec, real_identity_hash
from .ledger import Transaction
from .state import (
    CommitQuestionBank,
    Enroll,
    GenerateExamPaper,
    IssueCertificate,
    IssueHallTicket,
    MemberKind,
    RecordGrade,
    RedeemHallTicket,
    RegisterIdentity,
    Role,
    TxRejected,
    WorldState,
    apply_transaction,
    make_tx,
)


def keypair(namespace: str, name: str) -> crypto.KeyPair:
    return crypto.identity_from_label(f"{namespace}/{name}")


@dataclass
class Cast:
    """Named keypairs for one scenario. Staff are bound at genesis; students
    are registered on-chain by the controller."""

    namespace: str = "examchain"
    n_replicas: int = 4
    staff: dict = field(default_factory=dict)  # name -> (KeyPair, Role)
    nodes: list = field(default_factory=list)  # KeyPair per replica

    def __post_init__(self):
        if not self.staff:
            for role in Role:
                if role is not Role.STUDENT:
                    self.staff[role.value] = (keypair(self.namespace, role.value), role)
        if not self.nodes:
            self.nodes = [keypair(self.namespace, f"node-{i}") for i in range(self.n_replicas)]

    def key(self, name: str) -> crypto.KeyPair:
        return self.staff[name][0]

    @property
    def controller(self) -> crypto.KeyPair:
        return self.key("controller")

    def student(self, i: int) -> crypto.KeyPair:
        return keypair(self.namespace, f"student-{i}")

    def device(self, device_id: str) -> crypto.KeyPair:
        return keypair(self.namespace, f"device/{device_id}")

    def genesis_config(self, threshold_percent: int = 75, devices=(), **kw) -> GenesisConfig:
        members = [MemberSpec(MemberKind.UNIVERSITY.value if i == 0
                              else MemberKind.AFFILIATED_COLLEGE.value, kp.public_key)
                   for i, kp in enumerate(self.nodes)]
        identities = [IdentitySpec(role.value, kp.public_key, real_identity_hash(f"staff:{name}"))
                      for name, (kp, role) in self.staff.items()]
        devs = [(d, self.device(d).public_key) for d in devices]
        return GenesisConfig(members=members, identities=identities, devices=devs,
                             threshold_percent=threshold_percent, **kw)


class Submitter:
    """Builds signed transactions and keeps only those that apply to a shadow
    state, so a generated workload never depends on later submissions."""

    def __init__(self, config: GenesisConfig):
        self.shadow = WorldState.from_config(config)
        self.nonces = iot.NonceBook()
        self.accepted: list[Transaction] = []
        self.rejected: list[tuple[Transaction, str]] = []

    def submit(self, signer: crypto.KeyPair, payload) -> Transaction | None:
        tx = make_tx(signer, payload, self.nonces.peek(signer.address))
        return self.submit_tx(tx)

    def submit_tx(self, tx: Transaction) -> Transaction | None:
        try:
            apply_transaction(self.shadow, tx)
        except TxRejected as exc:
            self.rejected.append((tx, exc.code))
            return None
        self.nonces.observe(tx.sender, tx.nonce)
        self.accepted.append(tx)
        return tx


@dataclass
class ExamCycle:
    """Output of :func:`exam_cycle`: ordered transactions plus the IoT
    material needed to cross-check the resulting reports."""

    config: GenesisConfig
    transactions: list
    events: list
    schedule: iot.DeviceSchedule
    expectation: iot.Expectation
    quarantined: list


def exam_cycle(cast: Cast, seed: int, n_students: int = 40, courses=("CS101", "MA102", "PH103"),
               sessions_per_course: int = 4, presence: float = 0.85, n_items: int = 4,
               scans_per_item: int = 20, n_assets: int = 3, stops_per_asset: int = 6,
               limit: int | None = None, threshold_percent: int = 75) -> ExamCycle:
    """A full examination cycle: registration, enrollment, IoT attendance,
    question banks and papers, hall tickets, grading, certificates, plus
    inventory and asset tracking from barcode and RFID devices."""
    rng = random.Random(seed)
    device_ids = ["bio-1", "bar-1", "rfid-1"]
    config = cast.genesis_config(threshold_percent=threshold_percent, devices=device_ids)
    sub = Submitter(config)
    ctrl = cast.controller

    students = [cast.student(i) for i in range(n_students)]
    for i, s in enumerate(students):
        sub.submit(ctrl, RegisterIdentity(real_identity_hash(f"{cast.namespace}:student:{i}"),
                                          s.public_key, Role.STUDENT.value))
    enrolled = {c: [] for c in courses}
    for s in students:
        for c in rng.sample(list(courses), k=min(2, len(courses))):
            sub.submit(s, Enroll(c))
            enrolled[c].append(s.address)

    devices = {d: cast.device(d) for d in device_ids}
    sessions = []
    tick = 10
    for k in range(sessions_per_course):
        for c in courses:
            overrides = tuple((a, rng.choice((presence, 1.0, 0.4))) for a in enrolled[c])
            sessions.append(iot.Session(c, f"s{k}", tick, "bio-1", tuple(enrolled[c]),
                                        presence, overrides))
            tick += 5
    scans = []
    for j in range(n_items):
        plan, qty = [], 0
        for t in range(scans_per_item):
            delta = rng.randint(1, 20) if qty < 5 or rng.random() < 0.5 else -rng.randint(1, qty)
            qty += delta
            plan.append((10 + 3 * t + j, delta))
        scans.append(iot.ScanPlan("bar-1", f"ITEM-{j:03d}", tuple(plan)))
    paths = []
    for j in range(n_assets):
        stops = tuple((12 + 7 * t + j, rng.choice(("store", "hall-A", "hall-B", "press", "office")))
                      for t in range(stops_per_asset))
        paths.append(iot.AssetPath("rfid-1", f"ASSET-{j:03d}", stops))
    schedule = iot.DeviceSchedule(seed, devices, sessions, scans, paths)

    events = iot.sense(schedule)
    operators = iot.Operators(cast.key("teacher"), cast.key("principal"), sub.nonces)
    result = iot.process(events, schedule.registry(), schedule.calendar(), operators)
    for tx in result.transactions:
        sub.submit_tx(tx)

    setter, evaluator, principal = cast.key("paper_setter"), cast.key("evaluator"), cast.key("principal")
    exams = {c: f"{c}-END" for c in courses}
    for c, exam in exams.items():
        sub.submit(setter, CommitQuestionBank(exam, crypto.hash(f"bank:{exam}".encode()), 50))
        sub.submit(ctrl, GenerateExamPaper(exam, 10))
    for c, exam in exams.items():
        for a in enrolled[c]:
            sub.submit(ctrl, IssueHallTicket(a, exam, c))
    for c, exam in exams.items():
        for a in enrolled[c]:
            if (a, exam) in sub.shadow.hall_tickets:
                sub.submit(principal, RedeemHallTicket(a, exam))
                sub.submit(evaluator, RecordGrade(a, c, exam, rng.choice(config.grade_scale)))
    for s in students:
        sub.submit(ctrl, IssueCertificate(s.address, "BTech"))

    txs = sub.accepted if limit is None else sub.accepted[:limit]
    return ExamCycle(config, txs, events, schedule, result.expectation, result.quarantined)
