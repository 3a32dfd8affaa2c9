"""Independent reference computations used as test oracles.

None of these import the code under test beyond plain data types, so an
agreement is evidence and not a tautology.
"""
import hashlib


def select_questions(seed: bytes, n: int, k: int) -> list[int]:
    """Full-array Fisher-Yates over SHA-256(seed || counter) draws with
    rejection sampling, the first k positions taken."""
    arr = list(range(n))
    counter = 0
    for i in range(k):
        bound = n - i
        while True:
            word = int.from_bytes(hashlib.sha256(seed + counter.to_bytes(8, "big")).digest()[:8], "big")
            counter += 1
            if word < 2**64 - (2**64 % bound):
                break
        j = i + word % bound
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:k]


def exam_seed(bank_root: bytes, exam_id: str, height: int) -> bytes:
    eid = exam_id.encode()
    return hashlib.sha256(bank_root + len(eid).to_bytes(4, "big") + eid + height.to_bytes(8, "big")).digest()


def eligible(attended: int, held: int, percent: int) -> bool:
    return held > 0 and attended * 100 >= percent * held


def fold_device_events(events, sessions, device_keys):
    """Attendance counts, inventory sums and asset traces straight from the
    raw event stream. ``sessions`` gives (course, session) -> roster.

    Events whose signature fails or whose device is unknown are skipped; a
    biometric scan counts once per (student, session).
    """
    from examchain.crypto import verify

    seen = set()
    inventory, traces = {}, {}
    last_tick = {}
    for e in events:
        key = device_keys.get(e.device_id)
        if key is None or not verify(key, e.signing_bytes(), e.device_signature):
            continue
        if e.tick < last_tick.get(e.device_id, e.tick):
            continue
        last_tick[e.device_id] = e.tick
        kind = type(e).__name__
        if kind == "BiometricScan":
            roster = sessions.get((e.course_id, e.session_id))
            if roster is not None and e.student in roster:
                seen.add((e.student, e.course_id, e.session_id))
        elif kind == "BarcodeScan":
            inventory[e.item_code] = inventory.get(e.item_code, 0) + e.delta
        elif kind == "RfidPing":
            trace = traces.setdefault(e.asset_tag, [])
            if not trace or e.tick > trace[-1][1]:
                trace.append((e.location_id, e.tick))
    attendance = {}
    for (course, session), roster in sessions.items():
        for student in roster:
            a, h = attendance.get((student, course), (0, 0))
            attendance[(student, course)] = (a + ((student, course, session) in seen), h + 1)
    return attendance, inventory, {t: [loc for loc, _ in v] for t, v in traces.items()}
