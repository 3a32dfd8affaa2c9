"""Simulated IoT layer: sensing, processing, and validation/report generation.

Sensing turns a seeded device schedule into signed device events. Processing
checks device signatures, quarantines anything it cannot trust, folds
biometric scans into one attendance batch per (course, session), and maps
every barcode scan and RFID ping to its own transaction. Reporting reads a
committed state and cross-checks it against what the pipeline submitted.
"""
from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import crypto
from . import encoding as enc
from .ledger import Transaction
from .state import (
    RecordAssetMovement,
    RecordAttendance,
    RegisterAsset,
    UpdateInventory,
    WorldState,
    make_tx,
    meets_threshold,
)


class UnregisteredDevice(KeyError):
    pass


# -- events -------------------------------------------------------------------

@dataclass(frozen=True)
class BiometricScan:
    device_id: str
    student: bytes
    course_id: str
    session_id: str
    tick: int
    device_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (b"bio" + enc.text(self.device_id) + self.student + enc.text(self.course_id)
                + enc.text(self.session_id) + enc.u64(self.tick))


@dataclass(frozen=True)
class BarcodeScan:
    device_id: str
    item_code: str
    delta: int
    tick: int
    device_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (b"bar" + enc.text(self.device_id) + enc.text(self.item_code)
                + enc.i64(self.delta) + enc.u64(self.tick))


@dataclass(frozen=True)
class RfidPing:
    device_id: str
    asset_tag: str
    location_id: str
    tick: int
    device_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return (b"rfid" + enc.text(self.device_id) + enc.text(self.asset_tag)
                + enc.text(self.location_id) + enc.u64(self.tick))


DeviceEvent = BiometricScan | BarcodeScan | RfidPing


def sign_event(event, keypair: crypto.KeyPair):
    return type(event)(**{**event.__dict__, "device_signature": keypair.sign(event.signing_bytes())})


# -- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class Session:
    course_id: str
    session_id: str
    tick: int
    device_id: str
    roster: tuple  # enrolled student addresses
    presence: float = 1.0  # default per-student presence probability
    overrides: tuple = ()  # (student, probability) pairs


@dataclass(frozen=True)
class ScanPlan:
    device_id: str
    item_code: str
    scans: tuple  # (tick, delta)


@dataclass(frozen=True)
class AssetPath:
    device_id: str
    asset_tag: str
    stops: tuple  # (tick, location_id), ticks strictly increasing


@dataclass
class DeviceSchedule:
    seed: int
    devices: dict  # device_id -> KeyPair
    sessions: list = field(default_factory=list)
    scans: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    def registry(self) -> dict:
        return {d: kp.public_key for d, kp in self.devices.items()}

    def calendar(self, tick_range: tuple[int, int] | None = None) -> list[Session]:
        return [s for s in self.sessions if _in_range(s.tick, tick_range)]


def _student(value: str) -> bytes:
    raw = bytes.fromhex(value)
    if len(raw) != crypto.ADDRESS_SIZE:
        raise ValueError(f"student address must be {crypto.ADDRESS_SIZE} bytes: {value}")
    return raw


def schedule_from_dict(data: dict) -> DeviceSchedule:
    """Build a schedule from parsed TOML.

    Devices give either ``seed`` (hex) or ``label`` for their keypair; student
    addresses are hex. Example::

        seed = 7

        [[devices]]
        id = "bio-1"
        label = "campus/bio-1"

        [[sessions]]
        course = "CS101"
        session = "s1"
        tick = 10
        device = "bio-1"
        roster = ["<address hex>", ...]
        presence = 0.9
        overrides = [["<address hex>", 0.5]]

        [[scans]]
        device = "bar-1"
        item = "CHALK"
        plan = [[12, 10], [15, -4]]

        [[paths]]
        device = "rfid-1"
        tag = "PROJ-7"
        stops = [[11, "store"], [20, "hall-A"]]
    """
    devices = {}
    for d in data.get("devices", []):
        if "seed" in d:
            devices[d["id"]] = crypto.generate_identity(bytes.fromhex(d["seed"]))
        else:
            devices[d["id"]] = crypto.identity_from_label(d["label"])
    sessions = [Session(s["course"], s["session"], int(s["tick"]), s["device"],
                        tuple(_student(a) for a in s.get("roster", [])),
                        float(s.get("presence", 1.0)),
                        tuple((_student(a), float(p)) for a, p in s.get("overrides", [])))
                for s in data.get("sessions", [])]
    scans = [ScanPlan(p["device"], p["item"], tuple((int(t), int(d)) for t, d in p["plan"]))
             for p in data.get("scans", [])]
    paths = [AssetPath(p["device"], p["tag"], tuple((int(t), str(loc)) for t, loc in p["stops"]))
             for p in data.get("paths", [])]
    return DeviceSchedule(int(data.get("seed", 0)), devices, sessions, scans, paths)


def load_schedule(path) -> DeviceSchedule:
    from .config import tomllib

    with open(path, "rb") as fh:
        return schedule_from_dict(tomllib.load(fh))


def _in_range(tick: int, tick_range) -> bool:
    return tick_range is None or tick_range[0] <= tick < tick_range[1]


def _session_rng(seed: int, s: Session) -> random.Random:
    digest = crypto.hash(enc.u64(seed) + enc.text(s.course_id) + enc.text(s.session_id))
    return random.Random(int.from_bytes(digest[:8], "big"))


def sense(schedule: DeviceSchedule, tick_range: tuple[int, int] | None = None) -> list:
    """Signed events due in ``[start, end)``, ordered by (tick, device, emission).

    Presence draws come from a per-session RNG, so sensing a sub-range yields
    exactly the events the full range would have for that window.
    """
    out = []
    for s in schedule.sessions:
        if not _in_range(s.tick, tick_range):
            continue
        kp = _device_key(schedule, s.device_id)
        rng = _session_rng(schedule.seed, s)
        overrides = dict(s.overrides)
        for student in s.roster:
            p = overrides.get(student, s.presence)
            if rng.random() < p:
                out.append(sign_event(BiometricScan(s.device_id, student, s.course_id,
                                                    s.session_id, s.tick), kp))
    for plan in schedule.scans:
        kp = _device_key(schedule, plan.device_id)
        for tick, delta in plan.scans:
            if _in_range(tick, tick_range):
                out.append(sign_event(BarcodeScan(plan.device_id, plan.item_code, delta, tick), kp))
    for path in schedule.paths:
        kp = _device_key(schedule, path.device_id)
        for tick, location in path.stops:
            if _in_range(tick, tick_range):
                out.append(sign_event(RfidPing(path.device_id, path.asset_tag, location, tick), kp))
    order = {id(e): i for i, e in enumerate(out)}
    out.sort(key=lambda e: (e.tick, e.device_id, order[id(e)]))
    return out


def _device_key(schedule: DeviceSchedule, device_id: str) -> crypto.KeyPair:
    try:
        return schedule.devices[device_id]
    except KeyError:
        raise UnregisteredDevice(device_id) from None


# -- processing ---------------------------------------------------------------

class NonceBook:
    """Next nonce per sender; shared by every producer feeding one submission queue."""

    def __init__(self, start: dict | None = None):
        self._next = dict(start or {})

    def take(self, address: bytes) -> int:
        n = self._next.get(address, 0)
        self._next[address] = n + 1
        return n

    def peek(self, address: bytes) -> int:
        return self._next.get(address, 0)

    def observe(self, address: bytes, nonce: int) -> None:
        """Record an externally chosen nonce so later takes stay above it."""
        if self._next.get(address, 0) <= nonce:
            self._next[address] = nonce + 1


@dataclass
class Expectation:
    """What the pipeline submitted, keyed like the report lines."""

    attendance: dict = field(default_factory=dict)  # (student, course) -> (attended, held)
    inventory: dict = field(default_factory=dict)  # item -> summed delta
    traces: dict = field(default_factory=dict)  # tag -> [(location, tick)]

    def merge(self, other: "Expectation") -> None:
        for k, (a, h) in other.attendance.items():
            pa, ph = self.attendance.get(k, (0, 0))
            self.attendance[k] = (pa + a, ph + h)
        for k, d in other.inventory.items():
            self.inventory[k] = self.inventory.get(k, 0) + d
        for k, t in other.traces.items():
            self.traces.setdefault(k, []).extend(t)


@dataclass
class ProcessResult:
    transactions: list
    quarantined: list  # (event, reason)
    expectation: Expectation


@dataclass
class Operators:
    """Keys the processing layer signs with: a teacher for attendance, a
    principal or controller for inventory and assets."""

    attendance: crypto.KeyPair
    custodian: crypto.KeyPair
    nonces: NonceBook = field(default_factory=NonceBook)
    known_assets: dict = field(default_factory=dict)  # tag -> last tick seen
    device_ticks: dict = field(default_factory=dict)  # device -> last tick


def process(events: Iterable, registry: dict, calendar: Sequence[Session],
            operators: Operators) -> ProcessResult:
    """Fold an event stream into transactions.

    Every event must carry a valid signature from a registered device and a
    tick no earlier than that device's previous event; others are quarantined
    with a reason and contribute nothing.
    """
    quarantined = []
    sessions = {(s.course_id, s.session_id): s for s in calendar}
    present: dict = {key: set() for key in sessions}
    intents = []  # (tick, position, payload, signer)
    expectation = Expectation()

    for event in events:
        key = registry.get(event.device_id)
        if key is None:
            quarantined.append((event, "unregistered-device"))
            continue
        if not crypto.verify(key, event.signing_bytes(), event.device_signature):
            quarantined.append((event, "bad-signature"))
            continue
        last = operators.device_ticks.get(event.device_id)
        if last is not None and event.tick < last:
            quarantined.append((event, "tick-regression"))
            continue
        operators.device_ticks[event.device_id] = event.tick

        if isinstance(event, BiometricScan):
            s = sessions.get((event.course_id, event.session_id))
            if s is None:
                quarantined.append((event, "unknown-session"))
            elif event.student not in s.roster:
                quarantined.append((event, "not-on-roster"))
            else:
                present[(s.course_id, s.session_id)].add(event.student)
        elif isinstance(event, BarcodeScan):
            intents.append((event.tick, len(intents),
                            UpdateInventory(event.item_code, event.delta), operators.custodian))
            expectation.inventory[event.item_code] = (
                expectation.inventory.get(event.item_code, 0) + event.delta)
        elif isinstance(event, RfidPing):
            prev = operators.known_assets.get(event.asset_tag)
            if prev is None:
                payload = RegisterAsset(event.asset_tag, event.location_id, event.tick)
            elif event.tick <= prev:
                quarantined.append((event, "non-monotonic-timestamp"))
                continue
            else:
                payload = RecordAssetMovement(event.asset_tag, event.location_id, event.tick)
            operators.known_assets[event.asset_tag] = event.tick
            intents.append((event.tick, len(intents), payload, operators.custodian))
            expectation.traces.setdefault(event.asset_tag, []).append(
                (event.location_id, event.tick))
        else:
            quarantined.append((event, "unknown-event"))

    for (course, session), s in sessions.items():
        if not s.roster:
            continue
        entries = tuple((student, student in present[(course, session)]) for student in s.roster)
        intents.append((s.tick, len(intents), RecordAttendance(course, session, entries),
                        operators.attendance))
        for student, here in entries:
            a, h = expectation.attendance.get((student, course), (0, 0))
            expectation.attendance[(student, course)] = (a + int(here), h + 1)

    intents.sort(key=lambda it: (it[0], it[1]))
    txs = [make_tx(signer, payload, operators.nonces.take(signer.address))
           for _, _, payload, signer in intents]
    return ProcessResult(txs, quarantined, expectation)


# -- validation and reports ---------------------------------------------------

@dataclass
class Reports:
    attendance: list  # dicts: student, course, attended, held, ratio, eligible, status
    inventory: list  # dicts: item, quantity, status
    assets: list  # dicts: tag, trace, status
    threshold_percent: int

    @property
    def mismatches(self) -> int:
        return sum(row["status"] == "mismatch"
                   for rows in (self.attendance, self.inventory, self.assets) for row in rows)

    def to_dict(self) -> dict:
        return {
            "threshold_percent": self.threshold_percent,
            "attendance": self.attendance,
            "inventory": self.inventory,
            "assets": self.assets,
            "mismatches": self.mismatches,
        }

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["# attendance"])
        w.writerow(["student", "course", "attended", "held", "ratio", "eligible", "status"])
        for r in self.attendance:
            w.writerow([r["student"], r["course"], r["attended"], r["held"], r["ratio"],
                        int(r["eligible"]), r["status"]])
        w.writerow(["# inventory"])
        w.writerow(["item", "quantity", "status"])
        for r in self.inventory:
            w.writerow([r["item"], r["quantity"], r["status"]])
        w.writerow(["# assets"])
        w.writerow(["tag", "trace", "status"])
        for r in self.assets:
            w.writerow([r["tag"], ">".join(loc for loc, _ in r["trace"]), r["status"]])
        return buf.getvalue()


def _status(key, chain_value, expected: dict | None) -> str:
    if expected is None or key not in expected:
        return "unverified"
    return "ok" if expected[key] == chain_value else "mismatch"


def validate_and_report(state: WorldState, expectation: Expectation | None = None,
                        period: tuple[int, int] | None = None) -> Reports:
    """Attendance, inventory and asset-trace reports from a committed state.

    ``period`` limits asset trace entries to ticks in ``[start, end)``; the
    attendance and inventory maps carry no ticks and are reported whole. When
    an expectation is given, each line it covers is marked ok or mismatch,
    and expected keys missing from the chain appear as mismatches too.
    """
    exp_att = expectation.attendance if expectation else None
    exp_inv = expectation.inventory if expectation else None
    exp_tr = ({k: [loc for loc, _ in v] for k, v in expectation.traces.items()}
              if expectation else None)

    attendance = []
    keys = set(state.attendance) | set(exp_att or ())
    for student, course in sorted(keys):
        attended, held = state.attendance.get((student, course), (0, 0))
        attendance.append({
            "student": student.hex(),
            "course": course,
            "attended": attended,
            "held": held,
            "ratio": f"{attended}/{held}",
            "eligible": meets_threshold(attended, held, state.threshold_percent),
            "status": _status((student, course), (attended, held), exp_att),
        })

    inventory = []
    for item in sorted(set(state.inventory) | set(exp_inv or ())):
        qty = state.inventory.get(item, 0)
        inventory.append({"item": item, "quantity": qty, "status": _status(item, qty, exp_inv)})

    assets = []
    for tag in sorted(set(state.assets) | set(exp_tr or ())):
        trace = [(loc, ts) for loc, ts in state.assets.get(tag, ()) if _in_range(ts, period)]
        status = _status(tag, [loc for loc, _ in state.assets.get(tag, ())], exp_tr)
        assets.append({"tag": tag, "trace": trace, "status": status})

    return Reports(attendance, inventory, assets, state.threshold_percent)
