"""Deterministic network simulator and scenario runner.

Time is a virtual tick counter. Every message gets a due tick drawn from a
seeded RNG; :meth:`Network.deliver` releases due messages in
``(due_tick, sender, sequence)`` order, so a run is a pure function of the
scenario and its seed.

A scenario file is TOML::

    [network]
    seed = 7
    latency = [1, 3]
    drop_probability = "1/20"
    timeout_ticks = 40
    max_ticks = 20000
    extra_delay = 200            # added latency for delay_all replicas
    partitions = [{replicas = [0, 1], start = 10, end = 20}]

    [replicas]
    count = 4
    fault_tolerance = 1          # optional; must satisfy count >= 3f+1
    block_size = 10
    namespace = "baseline"       # seeds every actor key
    threshold_percent = 75

    [byzantine]
    0 = "equivocate"             # silent | equivocate | corrupt_payload | delay_all

    [workload]
    generator = "inventory"      # or "exam_cycle"
    count = 10
    start = 1
    interval = 2

    [[workload.tx]]              # explicit submissions, any number
    tick = 3
    signer = "principal"
    kind = "update_inventory"
    item_code = "CHALK"
    delta = 5

``[replicas]`` may instead name ``genesis`` and ``node_seeds`` files, in
which case ``[workload] tx_file`` lists ``<tick> <hex transaction>`` lines.
"""
from __future__ import annotations

import dataclasses
import heapq
import json
import logging
import random
import sys
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import config as cfg
from . import crypto
from .consensus import (
    COMMIT,
    PRE_PREPARE,
    PREPARE,
    TYPE_NAMES,
    Message,
    Output,
    Replica,
    quorum_config,
)
from .iot import NonceBook
from .ledger import Block, Transaction, TxKind, make_block
from .state import PAYLOAD_TYPES, TxRejected, UpdateInventory, WorldState, apply_transaction, make_tx
from .workload import Cast, exam_cycle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

BEHAVIORS = ("silent", "equivocate", "corrupt_payload", "delay_all")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    replicas: frozenset
    start: int
    end: int  # inclusive

    def cuts(self, a: int, b: int, tick: int) -> bool:
        return self.start <= tick <= self.end and ((a in self.replicas) != (b in self.replicas))


@dataclass
class NetworkConfig:
    seed: int = 0
    latency: tuple = (1, 1)
    drop_probability: Fraction = Fraction(0)
    partitions: list = field(default_factory=list)
    byzantine: dict = field(default_factory=dict)  # replica index -> behavior
    extra_delay: int = 200

    def __post_init__(self):
        self.drop_probability = Fraction(self.drop_probability)
        self.latency = tuple(self.latency)
        lo, hi = self.latency
        if not 1 <= lo <= hi:
            raise ScenarioError(f"latency must satisfy 1 <= min <= max, got {self.latency}")
        if not 0 <= self.drop_probability <= 1:
            raise ScenarioError("drop_probability must be in [0, 1]")
        for p in self.partitions:
            if p.start > p.end or p.start < 0:
                raise ScenarioError(f"bad partition window {p.start}..{p.end}")
        for idx, behavior in self.byzantine.items():
            if behavior not in BEHAVIORS:
                raise ScenarioError(f"unknown byzantine behavior {behavior!r} for replica {idx}")
        if not 0 <= self.seed < 2 ** 64:
            raise ScenarioError("seed must fit in 64 bits")


class Network:
    """Message queue with seeded latency and loss, plus partition windows."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self._queue: list = []
        self._seq = 0
        self.counts = Counter()
        self.by_type = Counter()

    def send(self, tick: int, sender: int, dest: int, msg) -> None:
        self.counts["sent"] += 1
        if isinstance(msg, Message):
            self.by_type[TYPE_NAMES.get(msg.type, str(msg.type))] += 1
        p = self.config.drop_probability
        if p and self.rng.randrange(p.denominator) < p.numerator:
            self.counts["dropped"] += 1
            return
        lo, hi = self.config.latency
        due = tick + self.rng.randint(lo, hi)
        if self.config.byzantine.get(sender) == "delay_all":
            due += self.config.extra_delay
        heapq.heappush(self._queue, (due, sender, self._seq, dest, msg))
        self._seq += 1

    def deliver(self, tick: int) -> list:
        """Messages due at or before ``tick`` as ``(sender, dest, msg)``."""
        out = []
        q = self._queue
        while q and q[0][0] <= tick:
            due, sender, _, dest, msg = heapq.heappop(q)
            if any(p.cuts(sender, dest, due) for p in self.config.partitions):
                self.counts["partitioned"] += 1
                continue
            self.counts["delivered"] += 1
            out.append((sender, dest, msg))
        return out

    def __len__(self):
        return len(self._queue)


# -- scripted Byzantine replicas -----------------------------------------------

class SilentReplica(Replica):
    """Crashed from the start: consumes input, emits nothing."""

    def on_message(self, msg, now=None):
        return Output([], [])

    def on_tick(self, now):
        return Output([], [])


class EquivocatingReplica(Replica):
    """Tells every peer what it wants to hear.

    As leader it alternates peers between two valid blocks for the same
    height. As voter it sends each peer a vote for whichever digest that peer
    is known to back (the block it was given, or its own first vote), so
    colluding equivocators can assemble a quorum on both sides.
    """

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.backing: dict = {}  # (view, seq) -> {peer: digest}
        self.voted: dict = {}  # (view, seq) -> vote types this replica has cast
        self._told: set = set()

    def _learn(self, view, seq, peer, digest):
        backing = self.backing.setdefault((view, seq), {})
        if peer not in backing:
            backing[peer] = digest
            self._tell(view, seq, peer)

    def _tell(self, view, seq, peer):
        digest = self.backing.get((view, seq), {}).get(peer)
        if digest is None:
            return
        for type_ in sorted(self.voted.get((view, seq), ())):
            key = (view, seq, type_, peer)
            if key not in self._told:
                self._told.add(key)
                Replica._send(self, peer, self._sign(type_, view, seq, digest))

    def _dispatch(self, msg):
        if msg.type in (PREPARE, COMMIT):
            self._learn(msg.view, msg.seq, msg.sender, msg.digest)
        super()._dispatch(msg)

    def _broadcast(self, msg):
        if msg.sender != self.address:
            return super()._broadcast(msg)
        peers = [a for a in self.roster if a != self.address]
        if msg.type == PRE_PREPARE and msg.block is not None:
            h = msg.block.header
            alt = make_block(h.height, h.prev_hash, list(msg.block.transactions), h.state_root,
                             h.timestamp + 1, self.kp)
            alt_pp = self._sign(PRE_PREPARE, msg.view, msg.seq, alt.digest, alt.encoded)
            for i, peer in enumerate(peers):
                pp = msg if i % 2 == 0 else alt_pp
                self._send(peer, pp)
                self._learn(msg.view, msg.seq, peer, pp.digest)
            return
        if msg.type in (PREPARE, COMMIT):
            self.voted.setdefault((msg.view, msg.seq), set()).add(msg.type)
            for peer in peers:
                self._tell(msg.view, msg.seq, peer)
            return
        super()._broadcast(msg)


class CorruptingReplica(Replica):
    """Runs the honest protocol but mangles every outbound message before
    re-signing it, so signatures check while contents are wrong."""

    def _corrupt(self, msg: Message) -> Message:
        if msg.sender != self.address:
            return msg
        if msg.type == PRE_PREPARE and msg.block is not None and msg.block.transactions:
            b = msg.block
            tx = b.transactions[0]
            payload = bytes([tx.payload[0] ^ 0xFF]) + tx.payload[1:] if tx.payload else b"\x00"
            bad = Transaction(tx.kind, tx.sender, payload, tx.nonce, tx.signature)
            block = Block(b.header, (bad,) + tuple(b.transactions[1:]), b.proposer_key, b.seal)
            return self._sign(msg.type, msg.view, msg.seq, block.digest, block.encoded)
        if msg.body:
            body = bytes([msg.body[0] ^ 0xFF]) + msg.body[1:]
            return self._sign(msg.type, msg.view, msg.seq, msg.digest, body)
        digest = bytes([msg.digest[0] ^ 0xFF]) + msg.digest[1:]
        return self._sign(msg.type, msg.view, msg.seq, digest, msg.body)

    def _send(self, dest, msg):
        super()._send(dest, self._corrupt(msg))

    def _broadcast(self, msg):
        super()._broadcast(self._corrupt(msg))


REPLICA_CLASSES = {
    None: Replica,
    "delay_all": Replica,
    "silent": SilentReplica,
    "equivocate": EquivocatingReplica,
    "corrupt_payload": CorruptingReplica,
}


# -- scenarios ---------------------------------------------------------------

@dataclass
class Scenario:
    network: NetworkConfig
    genesis: cfg.GenesisConfig
    node_keys: list
    workload: list  # (tick, Transaction), in submission order
    name: str = "scenario"
    block_size: int = 10
    timeout_ticks: int = 40
    max_ticks: int = 20000

    @property
    def n(self) -> int:
        return len(self.node_keys)


def _addr_or_key(value: str, cast: Cast, want_key: bool) -> bytes:
    kp = named_keypair(cast, value)
    if kp is not None:
        return kp.public_key if want_key else kp.address
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise ScenarioError(f"unknown actor {value!r}") from None


def named_keypair(cast: Cast, name: str) -> crypto.KeyPair | None:
    if name in cast.staff:
        return cast.key(name)
    if name.startswith("student-") and name[8:].isdigit():
        return cast.student(int(name[8:]))
    if name.startswith("node-") and name[5:].isdigit():
        return cast.nodes[int(name[5:])] if int(name[5:]) < len(cast.nodes) else None
    if name.startswith("device/"):
        return cast.device(name[7:])
    return None


def build_payload(kind: str, args: dict, cast: Cast):
    """Payload object for ``kind`` from loosely typed arguments.

    Address fields (``student``, ``member_address``) and ``public_key`` take an
    actor name or hex; other bytes fields take hex; attendance ``entries``
    take ``[[actor, present], ...]``.
    """
    try:
        tx_kind = TxKind[kind.upper().replace("-", "_")]
    except KeyError:
        raise ScenarioError(f"unknown transaction kind {kind!r}") from None
    cls = PAYLOAD_TYPES[tx_kind]
    values = {}
    for f in dataclasses.fields(cls):
        if f.name not in args:
            if f.default is not dataclasses.MISSING:
                continue
            raise ScenarioError(f"{kind}: missing field {f.name!r}")
        v = args[f.name]
        if f.name in ("student", "member_address"):
            v = _addr_or_key(str(v), cast, want_key=False)
        elif f.name == "public_key":
            v = _addr_or_key(str(v), cast, want_key=True)
        elif f.name == "entries":
            v = tuple((_addr_or_key(str(a), cast, want_key=False), bool(p)) for a, p in v)
        elif f.type == "bytes":
            try:
                v = bytes.fromhex(str(v))
            except ValueError:
                raise ScenarioError(f"{kind}.{f.name}: not hex") from None
        elif f.type == "int":
            v = int(v)
        else:
            v = str(v)
        values[f.name] = v
    unknown = set(args) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ScenarioError(f"{kind}: unknown fields {sorted(unknown)}")
    return cls(**values)


def _inventory_workload(cast: Cast, count: int, seed: int, start: int, interval: int) -> list:
    rng = random.Random(seed)
    principal = cast.key("principal")
    return [(start + i * interval, make_tx(principal, UpdateInventory(f"ITEM-{i % 5}",
                                                                      rng.randint(1, 20)), i + 1))
            for i in range(count)]


def scenario_from_dict(data: dict, base_dir: Path | None = None, name: str = "scenario",
                       seed: int | None = None) -> Scenario:
    try:
        return _scenario_from_dict(data, base_dir or Path("."), name, seed)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, OSError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc


def _scenario_from_dict(data, base_dir, name, seed_override) -> Scenario:
    unknown = set(data) - {"network", "replicas", "byzantine", "workload", "name"}
    if unknown:
        raise ScenarioError(f"unknown sections {sorted(unknown)}")
    net = data.get("network", {})
    reps = data.get("replicas", {})
    work = data.get("workload", {})
    name = data.get("name", name)
    seed = int(net.get("seed", 0)) if seed_override is None else seed_override

    byzantine = {int(k): v for k, v in data.get("byzantine", {}).items()}
    partitions = [Partition(frozenset(int(r) for r in p["replicas"]), int(p["start"]), int(p["end"]))
                  for p in net.get("partitions", [])]
    network = NetworkConfig(seed=seed, latency=tuple(net.get("latency", (1, 1))),
                            drop_probability=Fraction(str(net.get("drop_probability", 0))),
                            partitions=partitions, byzantine=byzantine,
                            extra_delay=int(net.get("extra_delay", 200)))

    count = int(reps.get("count", 4))
    namespace = reps.get("namespace", name)
    cast = Cast(namespace, count)
    threshold = int(reps.get("threshold_percent", 75))
    workload: list = []

    if "genesis" in reps:
        genesis = cfg.load(base_dir / reps["genesis"])
        seeds = crypto.load_seeds(base_dir / reps["node_seeds"])
        node_keys = [crypto.generate_identity(s) for s in seeds]
        if [k.public_key for k in node_keys] != [m.public_key for m in genesis.members]:
            raise ScenarioError("node_seeds do not match the genesis members")
        count = len(node_keys)
    else:
        node_keys = cast.nodes
        generator = work.get("generator")
        if generator == "exam_cycle":
            cycle = exam_cycle(cast, int(work.get("seed", seed)),
                               n_students=int(work.get("students", 20)),
                               limit=work.get("limit"), threshold_percent=threshold)
            genesis = cycle.config
            txs = cycle.transactions
            start, interval = int(work.get("start", 1)), int(work.get("interval", 0))
            workload += [(start + i * interval, tx) for i, tx in enumerate(txs)]
        else:
            genesis = cast.genesis_config(threshold_percent=threshold)
            if generator == "inventory":
                workload += _inventory_workload(cast, int(work.get("count", 10)),
                                                int(work.get("seed", seed)),
                                                int(work.get("start", 1)),
                                                int(work.get("interval", 1)))
            elif generator is not None:
                raise ScenarioError(f"unknown workload generator {generator!r}")
    if "fault_tolerance" in reps:
        f = int(reps["fault_tolerance"])
        if count < 3 * f + 1:
            raise ScenarioError(f"{count} replicas cannot tolerate f={f} (need n >= 3f+1)")
    for idx in byzantine:
        if not 0 <= idx < count:
            raise ScenarioError(f"byzantine replica {idx} out of range")

    nonces = NonceBook()
    for _, tx in workload:
        nonces.observe(tx.sender, tx.nonce)
    explicit = work.get("tx", [])
    for entry in explicit:
        entry = dict(entry)
        tick = int(entry.pop("tick"))
        signer = named_keypair(cast, entry.pop("signer"))
        if signer is None:
            raise ScenarioError("explicit transaction has an unknown signer")
        kind = entry.pop("kind")
        nonce = int(entry.pop("nonce", nonces.peek(signer.address)))
        nonces.observe(signer.address, nonce)
        workload.append((tick, make_tx(signer, build_payload(kind, entry, cast), nonce)))
    if "tx_file" in work:
        for lineno, line in enumerate((base_dir / work["tx_file"]).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tick_s, hex_tx = line.split()
            workload.append((int(tick_s), Transaction.decode(bytes.fromhex(hex_tx))))
    workload.sort(key=lambda item: item[0])  # stable: ties keep file order

    return Scenario(network=network, genesis=genesis, node_keys=node_keys, workload=workload,
                    name=name, block_size=int(reps.get("block_size", 10)),
                    timeout_ticks=int(net.get("timeout_ticks", 40)),
                    max_ticks=int(net.get("max_ticks", 20000)))


def load_scenario(path, seed: int | None = None) -> Scenario:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_dict(data, path.parent, path.stem, seed)


# -- running -----------------------------------------------------------------

@dataclass
class SimulationReport:
    name: str
    seed: int
    n: int
    f: int
    quorum: int
    honest: list
    byzantine: dict
    committed_heights: list
    state_roots: list
    tip_digests: list
    views: list
    divergence: bool
    messages: dict
    equivocation_evidence: list
    invalid_proposals: int
    transactions: dict
    ticks: int
    completed: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        d = self.to_dict()
        d["byzantine"] = {str(k): v for k, v in sorted(self.byzantine.items())}
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [
            f"scenario: {self.name}",
            f"seed: {self.seed}",
            f"replicas: n={self.n} f={self.f} quorum={self.quorum}",
            "byzantine: " + (", ".join(f"{k}={v}" for k, v in sorted(self.byzantine.items())) or "none"),
            f"ticks: {self.ticks}",
            f"completed: {str(self.completed).lower()}",
            f"divergence: {str(self.divergence).lower()}",
            "transactions: " + " ".join(f"{k}={v}" for k, v in sorted(self.transactions.items())),
            "messages: " + " ".join(f"{k}={v}" for k, v in sorted(self.messages.items())
                                    if not isinstance(v, dict)),
            f"equivocation_evidence: {len(self.equivocation_evidence)}",
            f"invalid_proposals: {self.invalid_proposals}",
        ]
        for i in range(self.n):
            tag = "honest" if i in self.honest else self.byzantine.get(i, "")
            lines.append(f"replica {i} [{tag}] height={self.committed_heights[i]} "
                         f"view={self.views[i]} root={self.state_roots[i]}")
        return "\n".join(lines) + "\n"


def divergent(chains) -> bool:
    """True when two chains hold different blocks at a common height."""
    for i in range(len(chains)):
        for j in range(i + 1, len(chains)):
            a, b = chains[i], chains[j]
            for h in range(min(len(a), len(b))):
                if a[h].digest != b[h].digest:
                    return True
    return False


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.network = Network(scenario.network)
        self.replicas: list[Replica] = []
        genesis_block = None
        for i, kp in enumerate(scenario.node_keys):
            cls = REPLICA_CLASSES[scenario.network.byzantine.get(i)]
            r = cls(kp, scenario.genesis, timeout_ticks=scenario.timeout_ticks,
                    block_size=scenario.block_size, genesis_block=genesis_block)
            genesis_block = r.chain[0]
            self.replicas.append(r)
        self.index = {r.address: i for i, r in enumerate(self.replicas)}
        self.honest = [i for i in range(len(self.replicas)) if i not in scenario.network.byzantine]
        self.tick = 0
        self.expected = self._expected_txs()

    def _expected_txs(self) -> set:
        """Workload transactions that apply in submission order."""
        shadow = WorldState.from_config(self.scenario.genesis)
        ok = set()
        for _, tx in self.scenario.workload:
            try:
                apply_transaction(shadow, tx)
            except TxRejected:
                continue
            ok.add(tx.tx_hash)
        return ok

    def _route(self, src: int, out: Output) -> None:
        for dest, msg in out.messages:
            if dest is None:
                for j in range(len(self.replicas)):
                    if j != src:
                        self.network.send(self.tick, src, j, msg)
            else:
                j = self.index.get(dest)
                if j is not None and j != src:
                    self.network.send(self.tick, src, j, msg)

    def done(self) -> bool:
        return all(self.expected <= self.replicas[i].committed_txs for i in self.honest)

    def run(self) -> SimulationReport:
        workload = self.scenario.workload
        w = 0
        while self.tick <= self.scenario.max_ticks:
            while w < len(workload) and workload[w][0] <= self.tick:
                for r in self.replicas:
                    r.submit(workload[w][1])
                w += 1
            for src, dest, msg in self.network.deliver(self.tick):
                self._route(dest, self.replicas[dest].on_message(msg, self.tick))
            for i, r in enumerate(self.replicas):
                self._route(i, r.on_tick(self.tick))
            if w == len(workload) and self.done():
                break
            self.tick += 1
        return self.report(completed=w == len(workload) and self.done())

    def report(self, completed: bool) -> SimulationReport:
        rs = self.replicas
        qc = quorum_config(len(rs))
        evidence = {}
        for i in self.honest:
            for e in rs[i].evidence:
                evidence[(e["kind"], e["view"], e["seq"], e["replica"])] = e
        counts = self.network.counts
        messages = {k: counts[k] for k in ("delivered", "dropped", "partitioned", "sent")}
        messages["in_flight"] = len(self.network)
        messages["by_type"] = dict(sorted(self.network.by_type.items()))
        committed = {tx.tx_hash for i in self.honest for b in rs[i].chain for tx in b.transactions}
        return SimulationReport(
            name=self.scenario.name,
            seed=self.scenario.network.seed,
            n=len(rs), f=qc.f, quorum=qc.quorum,
            honest=list(self.honest),
            byzantine=dict(self.scenario.network.byzantine),
            committed_heights=[r.committed_height for r in rs],
            state_roots=[r.state.root().hex() for r in rs],
            tip_digests=[r.chain.tip.digest.hex() for r in rs],
            views=[r.view for r in rs],
            divergence=divergent([rs[i].chain.blocks for i in self.honest]),
            messages=messages,
            equivocation_evidence=[evidence[k] for k in sorted(evidence)],
            invalid_proposals=sum(rs[i].invalid_proposals for i in self.honest),
            transactions={"submitted": len(self.scenario.workload),
                          "expected": len(self.expected),
                          "committed": len(committed)},
            ticks=self.tick,
            completed=completed,
        )


def run_scenario(scenario, seed: int | None = None) -> SimulationReport:
    """Run a :class:`Scenario`, a scenario dict, or a scenario file path."""
    if isinstance(scenario, dict):
        scenario = scenario_from_dict(scenario, seed=seed)
    elif not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario, seed)
    return Simulation(scenario).run()
