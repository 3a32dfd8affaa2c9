import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from examchain import config as cfg
from examchain.state import Enroll, RecordAttendance, RegisterIdentity, Role, WorldState, apply_transaction, make_tx
from examchain.workload import Cast

ROOT = Path(__file__).resolve().parent.parent
DEVICES = ("bio-1", "bar-1", "rfid-1")


@pytest.fixture(scope="session")
def cast():
    return Cast("tests", 4)


@pytest.fixture
def config(cast):
    return cast.genesis_config(devices=DEVICES)


@pytest.fixture
def world(config):
    return WorldState.from_config(config)


class Driver:
    """Signs and applies transactions on one state, tracking nonces."""

    def __init__(self, cast, state):
        self.cast = cast
        self.state = state
        self.nonces = {}

    def tx(self, signer, payload, nonce=None):
        if nonce is None:
            nonce = self.nonces.get(signer.address, 0)
        self.nonces[signer.address] = nonce + 1
        return make_tx(signer, payload, nonce)

    def apply(self, signer, payload):
        return apply_transaction(self.state, self.tx(signer, payload))

    def student(self, i, courses=()):
        kp = self.cast.student(i)
        self.apply(self.cast.controller,
                   RegisterIdentity(cfg.real_identity_hash(f"student {i}"), kp.public_key,
                                    Role.STUDENT.value))
        for c in courses:
            self.apply(kp, Enroll(c))
        return kp

    def sessions(self, course, attendance: dict, start=0):
        """attendance: student keypair -> list of present flags, one per session."""
        n = max(len(v) for v in attendance.values())
        for k in range(n):
            entries = tuple((kp.address, flags[k]) for kp, flags in attendance.items()
                            if k < len(flags))
            self.apply(self.cast.key("teacher"), RecordAttendance(course, f"s{start + k}", entries))


@pytest.fixture
def driver(cast, world):
    return Driver(cast, world)


def build_chain(config, txs, per_block, proposer, start_time=100):
    """Committed blocks (genesis first) holding ``txs`` in order, ``per_block`` at a time."""
    from examchain.ledger import genesis, make_block
    from examchain.state import execute_block

    blocks = [genesis(config)]
    st = WorldState.from_config(config)
    for i in range(0, len(txs), per_block):
        chunk = txs[i:i + per_block]
        tip = blocks[-1]
        trial = st.copy()
        trial.height = tip.height + 1
        for tx in chunk:
            apply_transaction(trial, tx)
        block = make_block(trial.height, tip.header.hash(), chunk, trial.root(),
                           start_time + trial.height, proposer)
        st = execute_block(st, block)
        blocks.append(block)
    return blocks, st


class Router:
    """Synchronous FIFO delivery between replicas. ``drop(dest, msg)`` filters."""

    def __init__(self, replicas, drop=None):
        self.replicas = {r.address: r for r in replicas}
        self.drop = drop or (lambda dest, msg: False)
        self.queue = []
        self.log = []
        self.now = 0

    def push(self, sender, output):
        for dest, msg in output.messages:
            targets = [dest] if dest is not None else [a for a in self.replicas if a != sender]
            for t in targets:
                self.queue.append((t, msg))

    def run(self, limit=100000):
        steps = 0
        while self.queue and steps < limit:
            dest, msg = self.queue.pop(0)
            steps += 1
            if dest not in self.replicas or self.drop(dest, msg):
                continue
            self.log.append((dest, msg))
            self.push(dest, self.replicas[dest].on_message(msg, self.now))
        return steps

    def tick(self, now):
        self.now = now
        for addr, r in self.replicas.items():
            self.push(addr, r.on_tick(now))
        self.run()


def replicas_for(cast, config, **kw):
    from examchain.consensus import Replica

    return [Replica(kp, config, **kw) for kp in cast.nodes]


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records one PASS/FAIL line;
    ``note`` collects key figures for the line."""

    @contextmanager
    def run(number, title):
        note = {}
        start = time.perf_counter()
        try:
            yield note
        except BaseException:
            outcome = "FAIL"
            raise
        else:
            outcome = "PASS"
        finally:
            note.setdefault("seconds", round(time.perf_counter() - start, 2))
            figures = ", ".join(f"{k}={v}" for k, v in note.items())
            line = f"[{number:>2}] {outcome} {title} ({figures})"
            ACCEPTANCE[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
        passed = sum(" PASS " in line for line in ACCEPTANCE.values())
        terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE)} acceptance criteria passed")
