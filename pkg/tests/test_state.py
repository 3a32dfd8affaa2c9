import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from examchain import crypto
from examchain import encoding as enc
from examchain.config import real_identity_hash
from examchain.ledger import Transaction, TxKind
from examchain.state import (
    PERMISSIONS,
    CommitQuestionBank,
    Enroll,
    GenerateExamPaper,
    IssueCertificate,
    IssueHallTicket,
    MembershipChange,
    RecordAssetMovement,
    RecordAttendance,
    RecordGrade,
    RedeemHallTicket,
    RegisterAsset,
    RegisterIdentity,
    Role,
    TxRejected,
    UpdateInventory,
    WorldState,
    apply_transaction,
    decode_payload,
    exam_seed,
    grade_inclusion_proof,
    make_tx,
    meets_threshold,
    replay,
    select_questions,
    try_apply,
    verify_certificate,
)
from examchain.ledger import verify_merkle_proof
from oracles import exam_seed as oracle_exam_seed
from oracles import select_questions as oracle_select


def rejects(driver, signer, payload, code):
    before = driver.state.root()
    with pytest.raises(TxRejected) as err:
        driver.apply(signer, payload)
    assert err.value.code == code
    assert driver.state.root() == before


# -- envelope checks ----------------------------------------------------------

def test_unknown_sender(world, cast):
    stranger = crypto.identity_from_label("stranger")
    assert try_apply(world, make_tx(stranger, Enroll("CS101"), 0)) == "unknown-sender"


def test_bad_signature(world, cast):
    tx = make_tx(cast.key("principal"), UpdateInventory("X", 1), 0)
    forged = Transaction(tx.kind, tx.sender, tx.payload, tx.nonce, bytes(64))
    assert try_apply(world, forged) == "bad-signature"


def test_unknown_kind(world, cast):
    kp = cast.key("principal")
    assert try_apply(world, Transaction.create(99, kp, b"", 0)) == "unknown-kind"


def test_unauthorized_role(world, cast):
    assert try_apply(world, make_tx(cast.key("teacher"), UpdateInventory("X", 1), 0)) == "unauthorized-role"


def test_nonce_must_increase(driver, cast):
    p = cast.key("principal")
    driver.apply(p, UpdateInventory("X", 1))
    with pytest.raises(TxRejected) as err:
        apply_transaction(driver.state, make_tx(p, UpdateInventory("X", 1), 0))
    assert err.value.code == "bad-nonce"
    apply_transaction(driver.state, make_tx(p, UpdateInventory("X", 1), 5))  # gaps allowed
    assert driver.state.nonces[p.address] == 5


def test_malformed_payload(world, cast):
    kp = cast.key("principal")
    assert try_apply(world, Transaction.create(TxKind.UPDATE_INVENTORY, kp, b"\x00", 0)) == "malformed-payload"
    good = UpdateInventory("X", 1).encode()
    assert try_apply(world, Transaction.create(TxKind.UPDATE_INVENTORY, kp, good + b"!", 0)) == "malformed-payload"


def test_payload_roundtrip_all_kinds(cast):
    a = cast.student(1).address
    samples = [
        RegisterIdentity(bytes(32), cast.student(1).public_key, "student"),
        Enroll("CS101"),
        RecordAttendance("CS101", "s1", ((a, True), (cast.student(2).address, False))),
        IssueHallTicket(a, "E", "CS101"),
        RedeemHallTicket(a, "E"),
        CommitQuestionBank("E", bytes(32), 10),
        GenerateExamPaper("E", 3),
        RegisterAsset("T", "store", 4),
        RecordAssetMovement("T", "hall", 5),
        UpdateInventory("X", -3),
        RecordGrade(a, "CS101", "E", "AA"),
        IssueCertificate(a, "BTech"),
        MembershipChange("admit", "affiliated_college", cast.student(3).public_key),
    ]
    assert len({type(s) for s in samples}) == 13
    for kind, payload in zip(TxKind, samples):
        assert decode_payload(kind, payload.encode()) == payload


# -- identities and enrollment --------------------------------------------------

def test_register_identity_binds_pseudonymous_address(driver, cast):
    kp = driver.student(1)
    ident = driver.state.identities[kp.address]
    assert ident.role is Role.STUDENT
    assert ident.real_identity_hash == real_identity_hash("student 1")
    assert kp.address == crypto.derive_address(kp.public_key)


def test_register_identity_errors(driver, cast):
    ctrl = cast.controller
    kp = driver.student(1)
    rejects(driver, ctrl, RegisterIdentity(bytes(32), kp.public_key, "student"), "address-already-bound")
    other = cast.student(2)
    rejects(driver, ctrl, RegisterIdentity(real_identity_hash("student 1"), other.public_key, "student"),
            "identity-already-linked")
    rejects(driver, ctrl, RegisterIdentity(bytes(32), other.public_key, "dean"), "invalid-argument")
    rejects(driver, ctrl, RegisterIdentity(bytes(32), b"short", "student"), "invalid-argument")
    rejects(driver, ctrl, RegisterIdentity(b"short", other.public_key, "student"), "invalid-argument")


def test_enroll_once(driver):
    kp = driver.student(1, ["CS101"])
    rejects(driver, kp, Enroll("CS101"), "duplicate-enrollment")
    driver.apply(kp, Enroll("MA102"))
    assert (kp.address, "MA102") in driver.state.enrollments


# -- attendance and hall tickets ------------------------------------------------

def test_attendance_batches(driver, cast):
    a, b = driver.student(1, ["CS101"]), driver.student(2, ["CS101"])
    teacher = cast.key("teacher")
    driver.apply(teacher, RecordAttendance("CS101", "s1", ((a.address, True), (b.address, False))))
    assert driver.state.attendance[(a.address, "CS101")] == (1, 1)
    assert driver.state.attendance[(b.address, "CS101")] == (0, 1)
    rejects(driver, teacher, RecordAttendance("CS101", "s1", ((a.address, True),)), "duplicate-session")
    rejects(driver, teacher, RecordAttendance("CS101", "s2", ()), "invalid-argument")
    rejects(driver, teacher, RecordAttendance("CS101", "s2", ((a.address, True), (a.address, True))),
            "invalid-argument")
    c = driver.student(3)
    rejects(driver, teacher, RecordAttendance("CS101", "s2", ((a.address, True), (c.address, True))),
            "not-enrolled")
    # nothing from the rejected batch leaked in
    assert driver.state.attendance[(a.address, "CS101")] == (1, 1)
    rejects(driver, teacher, RecordAttendance("CS101", "s2", ((teacher.address, True),)), "not-a-student")


@pytest.mark.parametrize("attended,held,pct,ok", [
    (3, 4, 75, True), (2, 4, 75, False), (0, 0, 75, False), (1, 1, 100, True),
    (99, 100, 100, False), (2, 3, 66, True), (2, 3, 67, False), (1, 3, 34, False),
])
def test_threshold_is_exact_integer_comparison(attended, held, pct, ok):
    assert meets_threshold(attended, held, pct) is ok


def test_hall_ticket_lifecycle(driver, cast):
    a = driver.student(1, ["CS101"])
    driver.sessions("CS101", {a: [True, True, True, False]})
    ctrl, principal = cast.controller, cast.key("principal")
    rejects(driver, principal, RedeemHallTicket(a.address, "E1"), "not-issued")
    driver.apply(ctrl, IssueHallTicket(a.address, "E1", "CS101"))
    assert driver.state.ticket_counts("E1") == {"issued": 1, "redeemed": 0}
    rejects(driver, ctrl, IssueHallTicket(a.address, "E1", "CS101"), "already-issued")
    driver.apply(principal, RedeemHallTicket(a.address, "E1"))
    assert driver.state.ticket_counts("E1") == {"issued": 0, "redeemed": 1}
    rejects(driver, principal, RedeemHallTicket(a.address, "E1"), "already-redeemed")


def test_hall_ticket_gates(driver, cast):
    ctrl = cast.controller
    a = driver.student(1, ["CS101"])
    b = driver.student(2)
    driver.sessions("CS101", {a: [True, False, False, True]})
    rejects(driver, ctrl, IssueHallTicket(a.address, "E1", "CS101"), "attendance-below-threshold")
    rejects(driver, ctrl, IssueHallTicket(b.address, "E1", "CS101"), "not-enrolled")
    rejects(driver, ctrl, IssueHallTicket(cast.key("teacher").address, "E1", "CS101"), "not-a-student")
    c = driver.student(3, ["MA102"])
    rejects(driver, ctrl, IssueHallTicket(c.address, "E2", "MA102"), "attendance-below-threshold")


# -- question banks and papers ----------------------------------------------------

@settings(max_examples=60)
@given(st.binary(min_size=32, max_size=32), st.integers(1, 300), st.data())
def test_selection_matches_oracle(seed, n, data):
    k = data.draw(st.integers(0, n))
    got = select_questions(seed, n, k)
    assert list(got) == oracle_select(seed, n, k)
    assert len(set(got)) == k and all(0 <= q < n for q in got)


def test_selection_full_permutation_and_prefix():
    seed = crypto.hash(b"s")
    full = select_questions(seed, 25, 25)
    assert sorted(full) == list(range(25))
    assert select_questions(seed, 25, 7) == full[:7]
    with pytest.raises(ValueError):
        select_questions(seed, 3, 4)


def test_exam_seed_layout():
    root = crypto.hash(b"bank")
    assert exam_seed(root, "E", 9) == hashlib.sha256(root + enc.text("E") + enc.u64(9)).digest()
    assert exam_seed(root, "E", 9) == oracle_exam_seed(root, "E", 9)


def test_paper_generation(driver, cast):
    setter, ctrl = cast.key("paper_setter"), cast.controller
    root = crypto.hash(b"bank E1")
    rejects(driver, ctrl, GenerateExamPaper("E1", 5), "no-commitment")
    driver.state.height = 4
    driver.apply(setter, CommitQuestionBank("E1", root, 40))
    rejects(driver, setter, CommitQuestionBank("E1", root, 40), "already-committed")
    rejects(driver, setter, CommitQuestionBank("E2", root, 0), "invalid-argument")
    rejects(driver, ctrl, GenerateExamPaper("E1", 41), "count-exceeds-bank")
    driver.state.height = 9
    driver.apply(ctrl, GenerateExamPaper("E1", 10))
    paper = driver.state.exam_papers["E1"]
    assert list(paper) == oracle_select(exam_seed(root, "E1", 4), 40, 10)
    rejects(driver, ctrl, GenerateExamPaper("E1", 10), "already-generated")


# -- assets and inventory ---------------------------------------------------------

def test_asset_trace(driver, cast):
    p = cast.key("principal")
    rejects(driver, p, RecordAssetMovement("T1", "B", 5), "unknown-asset")
    driver.apply(p, RegisterAsset("T1", "A", 1))
    rejects(driver, p, RegisterAsset("T1", "A", 2), "asset-exists")
    driver.apply(p, RecordAssetMovement("T1", "B", 5))
    rejects(driver, p, RecordAssetMovement("T1", "C", 5), "non-monotonic-timestamp")
    driver.apply(cast.controller, RecordAssetMovement("T1", "C", 9))
    assert driver.state.assets["T1"] == (("A", 1), ("B", 5), ("C", 9))


def test_inventory(driver, cast):
    p = cast.key("principal")
    driver.apply(p, UpdateInventory("CHALK", 10))
    driver.apply(p, UpdateInventory("CHALK", -4))
    assert driver.state.inventory["CHALK"] == 6
    rejects(driver, p, UpdateInventory("CHALK", -7), "negative-inventory")


# -- grades and certificates -------------------------------------------------------

def graded(driver, cast, i=1, exams=(("CS101", "E1", "AA"), ("MA102", "E2", "BB"))):
    courses = [c for c, _, _ in exams]
    kp = driver.student(i, courses)
    for c, _, _ in exams:
        driver.sessions(c, {kp: [True] * 4}, start=10 * i)
    for c, e, g in exams:
        driver.apply(cast.controller, IssueHallTicket(kp.address, e, c))
        driver.apply(cast.key("principal"), RedeemHallTicket(kp.address, e))
        driver.apply(cast.key("evaluator"), RecordGrade(kp.address, c, e, g))
    return kp


def test_grade_rules(driver, cast):
    ev = cast.key("evaluator")
    kp = driver.student(1, ["CS101"])
    driver.sessions("CS101", {kp: [True] * 4})
    rejects(driver, ev, RecordGrade(kp.address, "CS101", "E1", "AA"), "no-redeemed-ticket")
    driver.apply(cast.controller, IssueHallTicket(kp.address, "E1", "CS101"))
    rejects(driver, ev, RecordGrade(kp.address, "CS101", "E1", "AA"), "no-redeemed-ticket")
    driver.apply(cast.key("principal"), RedeemHallTicket(kp.address, "E1"))
    rejects(driver, ev, RecordGrade(kp.address, "CS101", "E1", "A+"), "invalid-grade")
    rejects(driver, ev, RecordGrade(kp.address, "MA102", "E1", "AA"), "no-redeemed-ticket")
    driver.apply(ev, RecordGrade(kp.address, "CS101", "E1", "AA"))
    rejects(driver, ev, RecordGrade(kp.address, "CS101", "E1", "BB"), "duplicate-grade")


def test_certificate_issue_and_verify(driver, cast):
    kp = graded(driver, cast)
    ctrl = cast.controller
    rejects(driver, ctrl, IssueCertificate(driver.student(2).address, "BTech"), "no-grades")
    rejects(driver, ctrl, IssueCertificate(cast.key("teacher").address, "BTech"), "not-a-student")
    driver.apply(ctrl, IssueCertificate(kp.address, "BTech"))
    rejects(driver, ctrl, IssueCertificate(kp.address, "BTech"), "duplicate-certificate")
    (cert,) = driver.state.certificates.values()
    assert cert.certificate_id == crypto.hash(cert.body())
    assert verify_certificate(driver.state, cert.certificate_id, cert).ok
    assert verify_certificate(driver.state, bytes(32), cert).reason == "unknown-id"
    forged = replace(cert, program="MTech")
    assert verify_certificate(driver.state, cert.certificate_id, forged).reason == "field-mismatch"
    leaf, proof = grade_inclusion_proof(driver.state, cert.certificate_id, "CS101", "E1")
    assert verify_merkle_proof(cert.grades_root, leaf, proof)


def test_later_grades_do_not_disturb_issued_certificate(driver, cast):
    kp = graded(driver, cast, exams=(("CS101", "E1", "AA"),))
    driver.apply(cast.controller, IssueCertificate(kp.address, "BTech"))
    (cert,) = driver.state.certificates.values()
    driver.apply(kp, Enroll("PH103"))
    driver.sessions("PH103", {kp: [True] * 4}, start=50)
    driver.apply(cast.controller, IssueHallTicket(kp.address, "E3", "PH103"))
    driver.apply(cast.key("principal"), RedeemHallTicket(kp.address, "E3"))
    driver.apply(cast.key("evaluator"), RecordGrade(kp.address, "PH103", "E3", "CC"))
    assert verify_certificate(driver.state, cert.certificate_id, cert).ok


def test_certificate_round_trips_through_dict(driver, cast):
    kp = graded(driver, cast)
    driver.apply(cast.controller, IssueCertificate(kp.address, "BTech"))
    (cert,) = driver.state.certificates.values()
    assert type(cert).from_dict(cert.to_dict()) == cert
    assert type(cert).decode(cert.encode()) == cert


# -- whole-state properties ----------------------------------------------------------

def test_copy_is_independent(driver, cast):
    driver.apply(cast.key("principal"), UpdateInventory("X", 3))
    snap = driver.state.copy()
    root = snap.root()
    driver.apply(cast.key("principal"), UpdateInventory("X", 3))
    assert snap.root() == root != driver.state.root()


def test_root_covers_every_map(driver, cast):
    seen = {driver.state.root()}
    driver.student(1, ["CS101"])
    seen.add(driver.state.root())
    driver.apply(cast.key("principal"), UpdateInventory("X", 1))
    seen.add(driver.state.root())
    driver.apply(cast.key("principal"), RegisterAsset("T", "A", 1))
    seen.add(driver.state.root())
    assert len(seen) == 4


def test_rejected_transactions_leave_root_unchanged(world, cast):
    from examchain.workload import exam_cycle

    cycle = exam_cycle(cast, 4, n_students=6)
    st = WorldState.from_config(cycle.config)
    for tx in cycle.transactions:
        apply_transaction(st, tx)
        before = st.root()
        assert try_apply(st, tx) is not None  # replay of the same tx is a bad nonce
        assert st.root() == before


def test_replay_is_deterministic(cast):
    from examchain.workload import exam_cycle
    from conftest import build_chain

    cycle = exam_cycle(cast, 5, n_students=10)
    blocks, live = build_chain(cycle.config, cycle.transactions, 25, cast.nodes[0])
    assert replay(cycle.config, blocks).root() == live.root()
    assert replay(cycle.config, blocks).entries() == live.entries()


def test_permission_matrix_shape():
    assert set(PERMISSIONS) == set(TxKind)
    assert PERMISSIONS[TxKind.ENROLL] == {Role.STUDENT}
    assert not any(Role.HEAD_OF_DEPARTMENT in roles for roles in PERMISSIONS.values())
