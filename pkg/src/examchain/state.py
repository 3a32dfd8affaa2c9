"""Deterministic contract engine: applies transactions to the world state.

Every transaction goes through :func:`apply_transaction`, which checks the
sender, signature, role and nonce before handing the decoded payload to a
kind-specific handler. Handlers validate everything first and only then
write, so a rejected transaction leaves the state untouched.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from . import crypto
from . import encoding as enc
from .kernels import merkle_root_of
from .ledger import Block, Transaction, TxKind, merkle_proof, merkle_root

DEFAULT_THRESHOLD_PERCENT = 75
DEFAULT_GRADE_SCALE = ("AA", "AB", "BB", "BC", "CC", "CD", "DD", "FF")


class Role(str, enum.Enum):
    STUDENT = "student"
    TEACHER = "teacher"
    PAPER_SETTER = "paper_setter"
    EVALUATOR = "evaluator"
    HEAD_OF_DEPARTMENT = "head_of_department"
    PRINCIPAL = "principal"
    CONTROLLER = "controller"


class MemberKind(str, enum.Enum):
    UNIVERSITY = "university"
    AFFILIATED_COLLEGE = "affiliated_college"
    AUTONOMOUS_COLLEGE = "autonomous_college"


_R = Role
PERMISSIONS: dict[TxKind, frozenset[Role]] = {
    TxKind.REGISTER_IDENTITY: frozenset({_R.CONTROLLER}),
    TxKind.ENROLL: frozenset({_R.STUDENT}),
    TxKind.RECORD_ATTENDANCE: frozenset({_R.TEACHER}),
    TxKind.ISSUE_HALL_TICKET: frozenset({_R.CONTROLLER}),
    TxKind.REDEEM_HALL_TICKET: frozenset({_R.PRINCIPAL, _R.CONTROLLER}),
    TxKind.COMMIT_QUESTION_BANK: frozenset({_R.PAPER_SETTER}),
    TxKind.GENERATE_EXAM_PAPER: frozenset({_R.CONTROLLER}),
    TxKind.REGISTER_ASSET: frozenset({_R.PRINCIPAL, _R.CONTROLLER}),
    TxKind.RECORD_ASSET_MOVEMENT: frozenset({_R.PRINCIPAL, _R.CONTROLLER}),
    TxKind.UPDATE_INVENTORY: frozenset({_R.PRINCIPAL, _R.CONTROLLER}),
    TxKind.RECORD_GRADE: frozenset({_R.EVALUATOR}),
    TxKind.ISSUE_CERTIFICATE: frozenset({_R.CONTROLLER}),
    TxKind.MEMBERSHIP: frozenset({_R.CONTROLLER}),
}


class TxRejected(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


# rejection codes
UNKNOWN_SENDER = "unknown-sender"
BAD_SIGNATURE = "bad-signature"
UNKNOWN_KIND = "unknown-kind"
UNAUTHORIZED_ROLE = "unauthorized-role"
BAD_NONCE = "bad-nonce"
MALFORMED_PAYLOAD = "malformed-payload"
INVALID_ARGUMENT = "invalid-argument"
ALREADY_BOUND = "address-already-bound"
IDENTITY_ALREADY_LINKED = "identity-already-linked"
NOT_A_STUDENT = "not-a-student"
DUPLICATE_ENROLLMENT = "duplicate-enrollment"
NOT_ENROLLED = "not-enrolled"
DUPLICATE_SESSION = "duplicate-session"
ATTENDANCE_BELOW_THRESHOLD = "attendance-below-threshold"
ALREADY_ISSUED = "already-issued"
NOT_ISSUED = "not-issued"
ALREADY_REDEEMED = "already-redeemed"
ALREADY_COMMITTED = "already-committed"
NO_COMMITMENT = "no-commitment"
COUNT_EXCEEDS_BANK = "count-exceeds-bank"
ALREADY_GENERATED = "already-generated"
ASSET_EXISTS = "asset-exists"
UNKNOWN_ASSET = "unknown-asset"
NON_MONOTONIC_TIMESTAMP = "non-monotonic-timestamp"
NEGATIVE_INVENTORY = "negative-inventory"
NO_REDEEMED_TICKET = "no-redeemed-ticket"
DUPLICATE_GRADE = "duplicate-grade"
INVALID_GRADE = "invalid-grade"
NO_GRADES = "no-grades"
DUPLICATE_CERTIFICATE = "duplicate-certificate"
DUPLICATE_MEMBER = "duplicate-member"
UNKNOWN_MEMBER = "unknown-member"
WOULD_BREAK_QUORUM = "would-break-quorum"
DEVICE_EXISTS = "device-exists"


# -- payloads -----------------------------------------------------------------

def _addr(r: enc.Reader) -> bytes:
    return r.fixed(crypto.ADDRESS_SIZE)


@dataclass(frozen=True)
class RegisterIdentity:
    real_identity_hash: bytes
    public_key: bytes
    role: str

    def encode(self):
        return enc.blob(self.real_identity_hash) + enc.blob(self.public_key) + enc.text(self.role)

    @classmethod
    def read(cls, r):
        return cls(r.blob(), r.blob(), r.text())


@dataclass(frozen=True)
class Enroll:
    course_id: str

    def encode(self):
        return enc.text(self.course_id)

    @classmethod
    def read(cls, r):
        return cls(r.text())


@dataclass(frozen=True)
class RecordAttendance:
    course_id: str
    session_id: str
    entries: tuple  # of (student address, present flag)

    def encode(self):
        return (enc.text(self.course_id) + enc.text(self.session_id)
                + enc.seq(self.entries, lambda e: e[0] + enc.u8(1 if e[1] else 0)))

    @classmethod
    def read(cls, r):
        course, session = r.text(), r.text()

        def entry(rr):
            student = _addr(rr)
            flag = rr.u8()
            if flag > 1:
                raise enc.DecodeError("presence flag must be 0 or 1")
            return (student, bool(flag))

        return cls(course, session, tuple(r.seq(entry)))


@dataclass(frozen=True)
class IssueHallTicket:
    student: bytes
    exam_id: str
    course_id: str

    def encode(self):
        return self.student + enc.text(self.exam_id) + enc.text(self.course_id)

    @classmethod
    def read(cls, r):
        return cls(_addr(r), r.text(), r.text())


@dataclass(frozen=True)
class RedeemHallTicket:
    student: bytes
    exam_id: str

    def encode(self):
        return self.student + enc.text(self.exam_id)

    @classmethod
    def read(cls, r):
        return cls(_addr(r), r.text())


@dataclass(frozen=True)
class CommitQuestionBank:
    exam_id: str
    bank_root: bytes
    bank_size: int

    def encode(self):
        return enc.text(self.exam_id) + self.bank_root + enc.u64(self.bank_size)

    @classmethod
    def read(cls, r):
        return cls(r.text(), r.fixed(32), r.u64())


@dataclass(frozen=True)
class GenerateExamPaper:
    exam_id: str
    question_count: int

    def encode(self):
        return enc.text(self.exam_id) + enc.u64(self.question_count)

    @classmethod
    def read(cls, r):
        return cls(r.text(), r.u64())


@dataclass(frozen=True)
class RegisterAsset:
    asset_tag: str
    location_id: str
    timestamp: int

    def encode(self):
        return enc.text(self.asset_tag) + enc.text(self.location_id) + enc.u64(self.timestamp)

    @classmethod
    def read(cls, r):
        return cls(r.text(), r.text(), r.u64())


@dataclass(frozen=True)
class RecordAssetMovement(RegisterAsset):
    pass


@dataclass(frozen=True)
class UpdateInventory:
    item_code: str
    delta: int

    def encode(self):
        return enc.text(self.item_code) + enc.i64(self.delta)

    @classmethod
    def read(cls, r):
        return cls(r.text(), r.i64())


@dataclass(frozen=True)
class RecordGrade:
    student: bytes
    course_id: str
    exam_id: str
    grade: str

    def encode(self):
        return self.student + enc.text(self.course_id) + enc.text(self.exam_id) + enc.text(self.grade)

    @classmethod
    def read(cls, r):
        return cls(_addr(r), r.text(), r.text(), r.text())


@dataclass(frozen=True)
class IssueCertificate:
    student: bytes
    program: str

    def encode(self):
        return self.student + enc.text(self.program)

    @classmethod
    def read(cls, r):
        return cls(_addr(r), r.text())


@dataclass(frozen=True)
class MembershipChange:
    """``action`` is admit, revoke or register_device; unused fields stay empty."""

    action: str
    member_kind: str = ""
    public_key: bytes = b""
    member_address: bytes = b""
    device_id: str = ""

    def encode(self):
        return (enc.text(self.action) + enc.text(self.member_kind) + enc.blob(self.public_key)
                + enc.blob(self.member_address) + enc.text(self.device_id))

    @classmethod
    def read(cls, r):
        return cls(r.text(), r.text(), r.blob(), r.blob(), r.text())


PAYLOAD_TYPES = {
    TxKind.REGISTER_IDENTITY: RegisterIdentity,
    TxKind.ENROLL: Enroll,
    TxKind.RECORD_ATTENDANCE: RecordAttendance,
    TxKind.ISSUE_HALL_TICKET: IssueHallTicket,
    TxKind.REDEEM_HALL_TICKET: RedeemHallTicket,
    TxKind.COMMIT_QUESTION_BANK: CommitQuestionBank,
    TxKind.GENERATE_EXAM_PAPER: GenerateExamPaper,
    TxKind.REGISTER_ASSET: RegisterAsset,
    TxKind.RECORD_ASSET_MOVEMENT: RecordAssetMovement,
    TxKind.UPDATE_INVENTORY: UpdateInventory,
    TxKind.RECORD_GRADE: RecordGrade,
    TxKind.ISSUE_CERTIFICATE: IssueCertificate,
    TxKind.MEMBERSHIP: MembershipChange,
}
KIND_OF_PAYLOAD = {v: k for k, v in PAYLOAD_TYPES.items()}


def decode_payload(kind: int, payload: bytes):
    r = enc.Reader(payload)
    obj = PAYLOAD_TYPES[TxKind(kind)].read(r)
    r.expect_done()
    return obj


def make_tx(keypair: crypto.KeyPair, payload, nonce: int) -> Transaction:
    return Transaction.create(KIND_OF_PAYLOAD[type(payload)], keypair, payload.encode(), nonce)


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    role: Role
    real_identity_hash: bytes
    public_key: bytes

    def encode(self):
        return enc.text(self.role.value) + self.real_identity_hash + self.public_key


@dataclass(frozen=True)
class HallTicket:
    course_id: str
    status: str  # "issued" | "redeemed"

    def encode(self):
        return enc.text(self.course_id) + enc.text(self.status)


@dataclass(frozen=True)
class Commitment:
    bank_root: bytes
    bank_size: int
    height: int
    setter: bytes

    def encode(self):
        return self.bank_root + enc.u64(self.bank_size) + enc.u64(self.height) + self.setter


@dataclass(frozen=True)
class GradeRecord:
    grade: str
    evaluator: bytes
    height: int
    serial: int  # position in global recording order

    def encode(self):
        return enc.text(self.grade) + self.evaluator + enc.u64(self.height) + enc.u64(self.serial)


@dataclass(frozen=True)
class Certificate:
    certificate_id: bytes
    student: bytes
    program: str
    grades_root: bytes
    issued_at_height: int
    issuer: bytes

    def body(self) -> bytes:
        return (self.student + enc.text(self.program) + self.grades_root
                + enc.u64(self.issued_at_height) + self.issuer)

    def encode(self) -> bytes:
        return self.certificate_id + self.body()

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        r = enc.Reader(data)
        cert = cls(r.fixed(32), _addr(r), r.text(), r.fixed(32), r.u64(), _addr(r))
        r.expect_done()
        return cert

    def to_dict(self) -> dict:
        return {
            "certificate_id": self.certificate_id.hex(),
            "student": self.student.hex(),
            "program": self.program,
            "grades_root": self.grades_root.hex(),
            "issued_at_height": self.issued_at_height,
            "issuer": self.issuer.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(bytes.fromhex(d["certificate_id"]), bytes.fromhex(d["student"]), d["program"],
                   bytes.fromhex(d["grades_root"]), int(d["issued_at_height"]),
                   bytes.fromhex(d["issuer"]))


@dataclass(frozen=True)
class MemberRecord:
    member_address: bytes
    member_kind: MemberKind
    node_public_key: bytes
    admitted_at_height: int
    admission_seq: int

    def encode(self):
        return (self.member_address + enc.text(self.member_kind.value) + self.node_public_key
                + enc.u64(self.admitted_at_height) + enc.u64(self.admission_seq))


def grade_leaf(student: bytes, course_id: str, exam_id: str, grade: str) -> bytes:
    return student + enc.text(course_id) + enc.text(exam_id) + enc.text(grade)


def meets_threshold(attended: int, held: int, threshold_percent: int) -> bool:
    """Exact integer test of attended/held >= threshold; no sessions never passes."""
    return held > 0 and attended * 100 >= held * threshold_percent


# -- exam paper selection -----------------------------------------------------

def exam_seed(bank_root: bytes, exam_id: str, commit_height: int) -> bytes:
    return crypto.hash(bank_root + enc.text(exam_id) + enc.u64(commit_height))


def select_questions(seed: bytes, bank_size: int, count: int) -> tuple[int, ...]:
    """First ``count`` entries of a seeded Fisher-Yates shuffle of range(bank_size).

    Draw ``k`` is the top 8 bytes of hash(seed || u64(k)), reduced to a bound
    by rejection sampling. Step i swaps position i with i + draw(bank_size - i).
    """
    if count > bank_size:
        raise ValueError("count exceeds bank size")
    counter = 0

    def draw(bound: int) -> int:
        nonlocal counter
        limit = (1 << 64) - (1 << 64) % bound
        while True:
            x = int.from_bytes(crypto.hash(seed + enc.u64(counter))[:8], "big")
            counter += 1
            if x < limit:
                return x % bound

    swapped: dict[int, int] = {}
    out = []
    for i in range(count):
        j = i + draw(bank_size - i)
        vi, vj = swapped.get(i, i), swapped.get(j, j)
        swapped[i], swapped[j] = vj, vi
        out.append(vj)
    return tuple(out)


# -- world state --------------------------------------------------------------

class Verdict(NamedTuple):
    ok: bool
    reason: str = ""


@dataclass
class WorldState:
    threshold_percent: int = DEFAULT_THRESHOLD_PERCENT
    grade_scale: tuple = DEFAULT_GRADE_SCALE
    fault_tolerance: int = 0
    identities: dict = field(default_factory=dict)
    nonces: dict = field(default_factory=dict)
    enrollments: dict = field(default_factory=dict)
    attendance: dict = field(default_factory=dict)
    sessions: dict = field(default_factory=dict)
    hall_tickets: dict = field(default_factory=dict)
    question_commitments: dict = field(default_factory=dict)
    exam_papers: dict = field(default_factory=dict)
    grades: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)
    certificate_index: dict = field(default_factory=dict)
    certificate_cutoffs: dict = field(default_factory=dict)
    assets: dict = field(default_factory=dict)
    inventory: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)
    devices: dict = field(default_factory=dict)
    # execution context, not part of the committed state
    height: int = 0
    _real_ids: dict = field(default_factory=dict, repr=False)
    _admissions: int = field(default=0, repr=False)

    @classmethod
    def from_config(cls, config) -> "WorldState":
        st = cls(threshold_percent=config.threshold_percent,
                 grade_scale=tuple(config.grade_scale),
                 fault_tolerance=config.fault_tolerance)
        for ident in config.identities:
            _bind_identity(st, ident.public_key, Role(ident.role), ident.real_identity_hash)
        for member in config.members:
            _admit(st, MemberKind(member.kind), member.public_key, 0)
        for device_id, key in config.devices:
            st.devices[device_id] = key
        return st

    def copy(self) -> "WorldState":
        new = replace(self)
        for name in _COPIED:
            setattr(new, name, dict(getattr(self, name)))
        return new

    # -- commitment ---------------------------------------------------------

    def entries(self) -> list[bytes]:
        """Every state entry as ``tag || key || value``, sorted within each map."""
        out = [b"cfg" + enc.u64(self.threshold_percent) + enc.u64(self.fault_tolerance)
               + enc.seq(self.grade_scale, enc.text)]
        for tag, name, key_enc, val_enc in _ROOTED:
            items = getattr(self, name)
            tagb = enc.text(tag)
            rows = sorted((key_enc(k), val_enc(v)) for k, v in items.items())
            out.extend(tagb + enc.blob(k) + v for k, v in rows)
        return out

    def root(self) -> bytes:
        return merkle_root_of(self.entries())

    # -- queries ------------------------------------------------------------

    def role_of(self, address: bytes) -> Role | None:
        ident = self.identities.get(address)
        return ident.role if ident else None

    def roster(self) -> list[MemberRecord]:
        """Current replica members in admission order."""
        return sorted(self.members.values(), key=lambda m: m.admission_seq)

    def ticket_counts(self, exam_id: str) -> dict[str, int]:
        counts = {"issued": 0, "redeemed": 0}
        for (_, exam), ticket in self.hall_tickets.items():
            if exam == exam_id:
                counts[ticket.status] += 1
        return counts

    def student_grade_leaves(self, student: bytes, before_serial: int | None = None) -> list[bytes]:
        """Leaves of the student's grades in key order, optionally only those
        recorded before ``before_serial``."""
        rows = []
        for (s, course, exam), rec in self.grades.items():
            if s == student and (before_serial is None or rec.serial < before_serial):
                rows.append(((enc.text(course) + enc.text(exam)),
                             grade_leaf(s, course, exam, rec.grade)))
        rows.sort()
        return [leaf for _, leaf in rows]


def _key_addr(k):
    return k


def _key_str(k):
    return enc.text(k)


def _key_addr_str(k):
    return k[0] + enc.text(k[1])


def _key_str_str(k):
    return enc.text(k[0]) + enc.text(k[1])


def _key_grade(k):
    return k[0] + enc.text(k[1]) + enc.text(k[2])


def _enc(v):
    return v.encode()


def _enc_pair(v):
    return enc.u64(v[0]) + enc.u64(v[1])


def _enc_trace(v):
    return enc.seq(v, lambda e: enc.text(e[0]) + enc.u64(e[1]))


_ROOTED = (
    ("identity", "identities", _key_addr, _enc),
    ("nonce", "nonces", _key_addr, enc.u64),
    ("enrollment", "enrollments", _key_addr_str, enc.u64),
    ("attendance", "attendance", _key_addr_str, _enc_pair),
    ("session", "sessions", _key_str_str, enc.u64),
    ("ticket", "hall_tickets", _key_addr_str, _enc),
    ("commitment", "question_commitments", _key_str, _enc),
    ("paper", "exam_papers", _key_str, lambda v: enc.seq(v, enc.u64)),
    ("grade", "grades", _key_grade, _enc),
    ("certificate", "certificates", _key_addr, _enc),
    ("cert-cutoff", "certificate_cutoffs", _key_addr, enc.u64),
    ("asset", "assets", _key_str, _enc_trace),
    ("inventory", "inventory", _key_str, enc.i64),
    ("member", "members", _key_addr, _enc),
    ("device", "devices", _key_str, enc.blob),
)
_COPIED = tuple(name for _, name, _, _ in _ROOTED) + ("certificate_index", "_real_ids")


def state_root(state: WorldState) -> bytes:
    return state.root()


# -- handlers -----------------------------------------------------------------

def _require_student(st: WorldState, address: bytes) -> None:
    if st.role_of(address) is not Role.STUDENT:
        raise TxRejected(NOT_A_STUDENT, address.hex())


def _bind_identity(st: WorldState, public_key: bytes, role: Role, real_hash: bytes) -> bytes:
    address = crypto.derive_address(public_key)
    st.identities[address] = Identity(role, real_hash, public_key)
    st._real_ids[real_hash] = address
    return address


def _admit(st: WorldState, kind: MemberKind, public_key: bytes, height: int) -> MemberRecord:
    address = crypto.derive_address(public_key)
    rec = MemberRecord(address, kind, public_key, height, st._admissions)
    st._admissions += 1
    st.members[address] = rec
    return rec


def _register_identity(st, sender, p: RegisterIdentity):
    try:
        role = Role(p.role)
        address = crypto.derive_address(p.public_key)
    except (ValueError, crypto.MalformedKey) as exc:
        raise TxRejected(INVALID_ARGUMENT, str(exc)) from exc
    if len(p.real_identity_hash) != crypto.DIGEST_SIZE:
        raise TxRejected(INVALID_ARGUMENT, "real identity hash must be 32 bytes")
    if address in st.identities:
        raise TxRejected(ALREADY_BOUND, address.hex())
    if p.real_identity_hash in st._real_ids:
        raise TxRejected(IDENTITY_ALREADY_LINKED)
    _bind_identity(st, p.public_key, role, p.real_identity_hash)


def _enroll(st, sender, p: Enroll):
    key = (sender, p.course_id)
    if key in st.enrollments:
        raise TxRejected(DUPLICATE_ENROLLMENT, p.course_id)
    st.enrollments[key] = st.height


def _record_attendance(st, sender, p: RecordAttendance):
    if not p.entries:
        raise TxRejected(INVALID_ARGUMENT, "empty attendance batch")
    if (p.course_id, p.session_id) in st.sessions:
        raise TxRejected(DUPLICATE_SESSION, f"{p.course_id}/{p.session_id}")
    seen = set()
    for student, _ in p.entries:
        if student in seen:
            raise TxRejected(INVALID_ARGUMENT, "student listed twice")
        seen.add(student)
        _require_student(st, student)
        if (student, p.course_id) not in st.enrollments:
            raise TxRejected(NOT_ENROLLED, student.hex())
    st.sessions[(p.course_id, p.session_id)] = st.height
    for student, present in p.entries:
        attended, held = st.attendance.get((student, p.course_id), (0, 0))
        st.attendance[(student, p.course_id)] = (attended + (1 if present else 0), held + 1)


def _issue_ticket(st, sender, p: IssueHallTicket):
    _require_student(st, p.student)
    if (p.student, p.course_id) not in st.enrollments:
        raise TxRejected(NOT_ENROLLED, p.course_id)
    if (p.student, p.exam_id) in st.hall_tickets:
        raise TxRejected(ALREADY_ISSUED, p.exam_id)
    attended, held = st.attendance.get((p.student, p.course_id), (0, 0))
    if not meets_threshold(attended, held, st.threshold_percent):
        raise TxRejected(ATTENDANCE_BELOW_THRESHOLD, f"{attended}/{held}")
    st.hall_tickets[(p.student, p.exam_id)] = HallTicket(p.course_id, "issued")


def _redeem_ticket(st, sender, p: RedeemHallTicket):
    ticket = st.hall_tickets.get((p.student, p.exam_id))
    if ticket is None:
        raise TxRejected(NOT_ISSUED, p.exam_id)
    if ticket.status == "redeemed":
        raise TxRejected(ALREADY_REDEEMED, p.exam_id)
    st.hall_tickets[(p.student, p.exam_id)] = HallTicket(ticket.course_id, "redeemed")


def _commit_bank(st, sender, p: CommitQuestionBank):
    if p.exam_id in st.question_commitments:
        raise TxRejected(ALREADY_COMMITTED, p.exam_id)
    if p.bank_size == 0:
        raise TxRejected(INVALID_ARGUMENT, "empty question bank")
    st.question_commitments[p.exam_id] = Commitment(p.bank_root, p.bank_size, st.height, sender)


def _generate_paper(st, sender, p: GenerateExamPaper):
    com = st.question_commitments.get(p.exam_id)
    if com is None:
        raise TxRejected(NO_COMMITMENT, p.exam_id)
    if p.question_count > com.bank_size:
        raise TxRejected(COUNT_EXCEEDS_BANK, f"{p.question_count} > {com.bank_size}")
    if p.exam_id in st.exam_papers:
        raise TxRejected(ALREADY_GENERATED, p.exam_id)
    seed = exam_seed(com.bank_root, p.exam_id, com.height)
    st.exam_papers[p.exam_id] = select_questions(seed, com.bank_size, p.question_count)


def _register_asset(st, sender, p: RegisterAsset):
    if p.asset_tag in st.assets:
        raise TxRejected(ASSET_EXISTS, p.asset_tag)
    st.assets[p.asset_tag] = ((p.location_id, p.timestamp),)


def _move_asset(st, sender, p: RecordAssetMovement):
    trace = st.assets.get(p.asset_tag)
    if trace is None:
        raise TxRejected(UNKNOWN_ASSET, p.asset_tag)
    if p.timestamp <= trace[-1][1]:
        raise TxRejected(NON_MONOTONIC_TIMESTAMP, f"{p.timestamp} <= {trace[-1][1]}")
    st.assets[p.asset_tag] = trace + ((p.location_id, p.timestamp),)


def _update_inventory(st, sender, p: UpdateInventory):
    quantity = st.inventory.get(p.item_code, 0) + p.delta
    if quantity < 0:
        raise TxRejected(NEGATIVE_INVENTORY, f"{p.item_code} would be {quantity}")
    if quantity >= 1 << 63:
        raise TxRejected(INVALID_ARGUMENT, "quantity overflow")
    st.inventory[p.item_code] = quantity


def _record_grade(st, sender, p: RecordGrade):
    if p.grade not in st.grade_scale:
        raise TxRejected(INVALID_GRADE, p.grade)
    ticket = st.hall_tickets.get((p.student, p.exam_id))
    if ticket is None or ticket.status != "redeemed" or ticket.course_id != p.course_id:
        raise TxRejected(NO_REDEEMED_TICKET, p.exam_id)
    key = (p.student, p.course_id, p.exam_id)
    if key in st.grades:
        raise TxRejected(DUPLICATE_GRADE, p.exam_id)
    st.grades[key] = GradeRecord(p.grade, sender, st.height, len(st.grades))


def _issue_certificate(st, sender, p: IssueCertificate):
    _require_student(st, p.student)
    if (p.student, p.program) in st.certificate_index:
        raise TxRejected(DUPLICATE_CERTIFICATE, p.program)
    leaves = st.student_grade_leaves(p.student)
    if not leaves:
        raise TxRejected(NO_GRADES, p.student.hex())
    draft = Certificate(b"", p.student, p.program, merkle_root_of(leaves), st.height, sender)
    cert = replace(draft, certificate_id=crypto.hash(draft.body()))
    st.certificates[cert.certificate_id] = cert
    st.certificate_index[(p.student, p.program)] = cert.certificate_id
    st.certificate_cutoffs[cert.certificate_id] = len(st.grades)


def _membership(st, sender, p: MembershipChange):
    if p.action == "admit":
        try:
            kind = MemberKind(p.member_kind)
            address = crypto.derive_address(p.public_key)
        except (ValueError, crypto.MalformedKey) as exc:
            raise TxRejected(INVALID_ARGUMENT, str(exc)) from exc
        if address in st.members:
            raise TxRejected(DUPLICATE_MEMBER, address.hex())
        if kind is MemberKind.UNIVERSITY:
            raise TxRejected(DUPLICATE_MEMBER, "the network has exactly one university")
        _admit(st, kind, p.public_key, st.height)
    elif p.action == "revoke":
        rec = st.members.get(p.member_address)
        if rec is None:
            raise TxRejected(UNKNOWN_MEMBER, p.member_address.hex())
        if rec.member_kind is MemberKind.UNIVERSITY:
            raise TxRejected(INVALID_ARGUMENT, "the university member cannot be revoked")
        if len(st.members) - 1 < 3 * st.fault_tolerance + 1:
            raise TxRejected(WOULD_BREAK_QUORUM,
                             f"{len(st.members) - 1} < {3 * st.fault_tolerance + 1}")
        del st.members[p.member_address]
    elif p.action == "register_device":
        if not p.device_id:
            raise TxRejected(INVALID_ARGUMENT, "empty device id")
        if len(p.public_key) != crypto.PUBLIC_KEY_SIZE:
            raise TxRejected(INVALID_ARGUMENT, "device key must be 32 bytes")
        if p.device_id in st.devices:
            raise TxRejected(DEVICE_EXISTS, p.device_id)
        st.devices[p.device_id] = p.public_key
    else:
        raise TxRejected(INVALID_ARGUMENT, f"unknown membership action {p.action!r}")


HANDLERS = {
    TxKind.REGISTER_IDENTITY: _register_identity,
    TxKind.ENROLL: _enroll,
    TxKind.RECORD_ATTENDANCE: _record_attendance,
    TxKind.ISSUE_HALL_TICKET: _issue_ticket,
    TxKind.REDEEM_HALL_TICKET: _redeem_ticket,
    TxKind.COMMIT_QUESTION_BANK: _commit_bank,
    TxKind.GENERATE_EXAM_PAPER: _generate_paper,
    TxKind.REGISTER_ASSET: _register_asset,
    TxKind.RECORD_ASSET_MOVEMENT: _move_asset,
    TxKind.UPDATE_INVENTORY: _update_inventory,
    TxKind.RECORD_GRADE: _record_grade,
    TxKind.ISSUE_CERTIFICATE: _issue_certificate,
    TxKind.MEMBERSHIP: _membership,
}


def apply_transaction(state: WorldState, tx: Transaction) -> WorldState:
    """Apply ``tx`` in place and return the state, or raise TxRejected.

    On rejection the state is left exactly as it was.
    """
    ident = state.identities.get(tx.sender)
    if ident is None:
        raise TxRejected(UNKNOWN_SENDER, tx.sender.hex())
    if not crypto.verify(ident.public_key, tx.signing_bytes(), tx.signature):
        raise TxRejected(BAD_SIGNATURE)
    try:
        kind = TxKind(tx.kind)
    except ValueError:
        raise TxRejected(UNKNOWN_KIND, str(tx.kind)) from None
    if ident.role not in PERMISSIONS[kind]:
        raise TxRejected(UNAUTHORIZED_ROLE, f"{ident.role.value} may not {kind.name}")
    if tx.nonce <= state.nonces.get(tx.sender, -1):
        raise TxRejected(BAD_NONCE, str(tx.nonce))
    try:
        payload = decode_payload(kind, tx.payload)
    except (enc.DecodeError, ValueError) as exc:
        raise TxRejected(MALFORMED_PAYLOAD, str(exc)) from exc
    HANDLERS[kind](state, tx.sender, payload)
    state.nonces[tx.sender] = tx.nonce
    return state


def try_apply(state: WorldState, tx: Transaction) -> str | None:
    """Apply and return None, or return the rejection code."""
    try:
        apply_transaction(state, tx)
    except TxRejected as exc:
        return exc.code
    return None


def execute_block(state: WorldState, block: Block) -> WorldState:
    """Apply every transaction of ``block`` to a copy of ``state``.

    Raises TxRejected if any transaction is rejected; committed blocks hold
    only transactions that apply.
    """
    new = state.copy()
    new.height = block.height
    for tx in block.transactions:
        apply_transaction(new, tx)
    return new


def replay(config, blocks) -> WorldState:
    """Fresh state from ``config`` with every non-genesis block applied in order."""
    st = WorldState.from_config(config)
    for block in blocks:
        if block.height == 0:
            continue
        st = execute_block(st, block)
    return st


def verify_certificate(state: WorldState, certificate_id: bytes, presented: Certificate) -> Verdict:
    stored = state.certificates.get(certificate_id)
    if stored is None or presented.certificate_id != certificate_id:
        return Verdict(False, "unknown-id")
    if presented.encode() != stored.encode():
        return Verdict(False, "field-mismatch")
    leaves = state.student_grade_leaves(stored.student, state.certificate_cutoffs[certificate_id])
    if merkle_root_of(leaves) != stored.grades_root:
        return Verdict(False, "grades-root-mismatch")
    return Verdict(True, "")


def grade_inclusion_proof(state: WorldState, certificate_id: bytes, course_id: str, exam_id: str):
    """Leaf encoding and Merkle path proving one grade is under a certificate's grades_root."""
    cert = state.certificates[certificate_id]
    leaves = state.student_grade_leaves(cert.student, state.certificate_cutoffs[certificate_id])
    rec = state.grades[(cert.student, course_id, exam_id)]
    leaf = grade_leaf(cert.student, course_id, exam_id, rec.grade)
    return leaf, merkle_proof(leaves, leaves.index(leaf))
