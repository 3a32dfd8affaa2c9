"""``examchain`` command line.

Exit codes: 0 success, 1 validation failure (bad chain, rejected
transaction, invalid certificate, divergent run, malformed input file),
2 usage error (bad flags, missing file), 70 internal invariant violation.

``--config`` and ``--chain-path`` default to ``genesis.toml`` and
``chain.log`` under ``$EXAMCHAIN_HOME`` (default ``./.examchain``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfg
from . import crypto
from . import encoding as enc
from . import iot, ledger, netsim, state
from .workload import Cast

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 70

log = logging.getLogger("examchain")


class UsageError(Exception):
    pass


class Invalid(Exception):
    """Validation failure carrying the payload to print before exiting 1."""

    def __init__(self, message: str, data: dict | None = None):
        super().__init__(message)
        self.data = data or {"ok": False, "error": message}


def home() -> Path:
    return Path(os.environ.get("EXAMCHAIN_HOME", ".examchain"))


def _config_path(args) -> Path:
    return Path(args.config) if args.config else home() / "genesis.toml"


def _chain_path(args) -> Path:
    return Path(args.chain_path) if args.chain_path else home() / "chain.log"


def _emit(args, data: dict, text: str | None = None) -> None:
    if args.report_json:
        print(json.dumps(data, sort_keys=True, indent=2))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in data.items()))


def _hexarg(value: str, size: int | None = None, what: str = "value") -> bytes:
    try:
        raw = bytes.fromhex(value)
    except ValueError:
        raise UsageError(f"{what}: not hex") from None
    if size is not None and len(raw) != size:
        raise UsageError(f"{what}: expected {size} bytes")
    return raw


def _load_state(args):
    """Committed chain and replayed state for the configured genesis and log."""
    config = cfg.load(_require(_config_path(args)))
    chain = ledger.load_chain(_require(_chain_path(args)))
    bad = ledger.verify_chain(chain.blocks)
    if bad is not None:
        raise Invalid(f"chain invalid at height {bad}", {"ok": False, "first_invalid_height": bad})
    return config, chain, _replay_checked(config, chain.blocks)


def _replay_checked(config, blocks):
    if blocks[0].digest != ledger.genesis(config).digest:
        raise Invalid("genesis block does not match config",
                      {"ok": False, "first_invalid_height": 0})
    st = state.WorldState.from_config(config)
    for block in blocks[1:]:
        try:
            st = state.execute_block(st, block)
        except state.TxRejected as exc:
            raise Invalid(f"block {block.height} rejected: {exc.code}",
                          {"ok": False, "first_invalid_height": block.height,
                           "reason": exc.code}) from None
        if st.root() != block.header.state_root:
            raise Invalid(f"block {block.height} state root mismatch",
                          {"ok": False, "first_invalid_height": block.height,
                           "reason": "state-root-mismatch"})
    return st


def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    return path


# -- keygen / identity / genesis ------------------------------------------------

def cmd_keygen(args) -> int:
    if args.seed_file:
        seeds = crypto.load_seeds(_require(Path(args.seed_file)))
        if not seeds:
            raise Invalid(f"{args.seed_file}: no seed")
        seed = seeds[0]
    elif args.seed is not None:
        seed = crypto.hash(b"examchain-keygen:" + enc.u64(args.seed))
    else:
        seed = None
    kp = crypto.generate_identity(seed)
    if args.out:
        Path(args.out).write_text(kp.private_key.hex() + "\n")
    _emit(args, {"public_key": kp.public_key.hex(), "address": kp.address.hex()})
    return EXIT_OK


def cmd_identity(args) -> int:
    _emit(args, {"real_identity_hash": cfg.real_identity_hash(args.record).hex()})
    return EXIT_OK


def cmd_genesis(args) -> int:
    if args.check:
        config = cfg.load(_require(Path(args.check)))
    else:
        namespace = args.namespace or ("examchain" if args.seed is None else f"seed-{args.seed}")
        cast = Cast(namespace, args.replicas)
        config = cast.genesis_config(threshold_percent=args.threshold,
                                     devices=tuple(args.device or ()))
        out = Path(args.out_dir) if args.out_dir else home()
        out.mkdir(parents=True, exist_ok=True)
        (out / "genesis.toml").write_text(cfg.to_toml(config))
        (out / "nodes.seeds").write_text("".join(f"{kp.private_key.hex()}  # node-{i}\n"
                                                 for i, kp in enumerate(cast.nodes)))
        keys = out / "keys"
        keys.mkdir(exist_ok=True)
        for name in cast.staff:
            (keys / f"{name}.seed").write_text(cast.key(name).private_key.hex() + "\n")
        for d in args.device or ():
            (keys / f"device-{d}.seed").write_text(cast.device(d).private_key.hex() + "\n")
    block = ledger.genesis(config)
    _emit(args, {
        "members": config.n,
        "fault_tolerance": config.fault_tolerance,
        "identities": len(config.identities),
        "threshold_percent": config.threshold_percent,
        "genesis_digest": block.digest.hex(),
        "state_root": block.header.state_root.hex(),
    })
    return EXIT_OK


# -- scenarios ----------------------------------------------------------------

def _run_one(path: str, seed):
    return netsim.run_scenario(path, seed=seed)


def cmd_run_scenario(args) -> int:
    for p in args.scenario:
        _require(Path(p))
    if args.chain_path:
        # keep the committed chain (and its genesis) for later queries
        if len(args.scenario) != 1:
            raise UsageError("--chain-path needs exactly one scenario")
        sim = netsim.Simulation(netsim.load_scenario(args.scenario[0], args.seed))
        reports = [sim.run()]
        ledger.write_log(args.chain_path, sim.replicas[sim.honest[0]].chain.blocks)
        if args.config:
            Path(args.config).write_text(cfg.to_toml(sim.scenario.genesis))
    elif len(args.scenario) > 1 and args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_run_one, args.scenario, [args.seed] * len(args.scenario)))
    else:
        reports = [_run_one(p, args.seed) for p in args.scenario]
    if args.report_json:
        data = [json.loads(r.to_json()) for r in reports]
        print(json.dumps(data[0] if len(data) == 1 else data, sort_keys=True, indent=2))
    else:
        print("\n".join(r.to_text() for r in reports), end="")
    ok = all(r.completed and not r.divergence for r in reports)
    return EXIT_OK if ok else EXIT_INVALID


# -- transactions -------------------------------------------------------------

def _signer(args) -> crypto.KeyPair:
    if args.signer_seed_file:
        seeds = crypto.load_seeds(_require(Path(args.signer_seed_file)))
        if not seeds:
            raise Invalid(f"{args.signer_seed_file}: no seed")
        return crypto.generate_identity(seeds[0])
    if args.signer:
        kp = netsim.named_keypair(Cast(args.namespace, 0), args.signer)
        if kp is None:
            raise UsageError(f"unknown signer {args.signer!r}")
        return kp
    raise UsageError("tx needs --signer-seed-file or --signer")


def cmd_tx(args) -> int:
    signer = _signer(args)
    cast = Cast(args.namespace, 0)
    fields = {}
    for f in dataclasses.fields(state.PAYLOAD_TYPES[ledger.TxKind[args.kind.upper()]]):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "entries":
            pairs = []
            for item in value:
                who, _, flag = item.rpartition(":")
                if not who or flag not in ("0", "1"):
                    raise UsageError(f"--entry expects ADDRESS:0|1, got {item!r}")
                pairs.append((who, flag == "1"))
            value = pairs
        fields[f.name] = value
    if getattr(args, "real_identity", None) is not None:
        if "real_identity_hash" in fields:
            raise UsageError("give --real-identity or --real-identity-hash, not both")
        fields["real_identity_hash"] = cfg.real_identity_hash(args.real_identity).hex()
    try:
        payload = netsim.build_payload(args.kind, fields, cast)
    except netsim.ScenarioError as exc:
        raise UsageError(str(exc)) from None

    current = None
    chain = None
    if args.commit or args.check:
        config = cfg.load(_require(_config_path(args)))
        path = _chain_path(args)
        if path.exists():
            _, chain, current = _load_state(args)
        else:
            chain = ledger.Chain(ledger.genesis(config))
            current = state.WorldState.from_config(config)
    nonce = args.nonce
    if nonce is None:
        nonce = current.nonces.get(signer.address, -1) + 1 if current is not None else 0
    tx = state.make_tx(signer, payload, nonce)
    out = {"kind": ledger.TxKind(tx.kind).name.lower(), "sender": tx.sender.hex(), "nonce": nonce,
           "tx_hash": tx.tx_hash.hex(), "encoded": tx.encoded.hex()}

    if current is not None:
        trial = current.copy()
        trial.height = chain.height + 1
        code = state.try_apply(trial, tx)
        if code is not None:
            raise Invalid(f"transaction rejected: {code}", {**out, "ok": False, "reason": code})
        out["ok"] = True
        if args.commit:
            seeds = crypto.load_seeds(_require(Path(args.node_seed_file) if args.node_seed_file
                                               else home() / "nodes.seeds"))
            node = crypto.generate_identity(seeds[0])
            if node.address not in trial.members:
                raise Invalid("node key is not a roster member")
            tip = chain.tip
            block = ledger.make_block(trial.height, tip.header.hash(), [tx], trial.root(),
                                      max(args.block_time, tip.header.timestamp), node)
            path = _chain_path(args)
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                ledger.write_log(path, chain.blocks)
            ledger.append_log(path, block)
            out["height"] = block.height
            out["state_root"] = trial.root().hex()
    if args.append:
        with open(args.append, "a") as fh:
            fh.write(f"{args.tick} {tx.encoded.hex()}\n")
    _emit(args, out)
    return EXIT_OK


# -- queries ------------------------------------------------------------------

def _query(st: state.WorldState, chain, what: str, params: list[str],
           namespace: str = "examchain") -> dict:
    cast = Cast(namespace, 0)

    def addr(value: str) -> bytes:
        kp = netsim.named_keypair(cast, value)
        if kp is not None:
            return kp.address
        return _hexarg(value, crypto.ADDRESS_SIZE, "address")

    def need(k):
        if len(params) != k:
            raise UsageError(f"query {what} takes {k} argument(s)")

    if what == "height":
        need(0)
        return {"height": chain.height, "tip": chain.tip.digest.hex()}
    if what == "state-root":
        need(0)
        return {"height": chain.height, "state_root": st.root().hex()}
    if what == "identity":
        need(1)
        ident = st.identities.get(addr(params[0]))
        if ident is None:
            return {}
        return {"address": params[0], "role": ident.role.value,
                "real_identity_hash": ident.real_identity_hash.hex(),
                "public_key": ident.public_key.hex(),
                "nonce": st.nonces.get(addr(params[0]), -1)}
    if what == "enrollment":
        need(2)
        key = (addr(params[0]), params[1])
        return {"student": params[0], "course": params[1], "enrolled": key in st.enrollments}
    if what == "attendance":
        need(2)
        attended, held = st.attendance.get((addr(params[0]), params[1]), (0, 0))
        return {"student": params[0], "course": params[1], "attended": attended, "held": held,
                "eligible": state.meets_threshold(attended, held, st.threshold_percent)}
    if what == "hall-ticket":
        need(2)
        ticket = st.hall_tickets.get((addr(params[0]), params[1]))
        if ticket is None:
            return {}
        return {"student": params[0], "exam": params[1], "course": ticket.course_id,
                "status": ticket.status}
    if what == "tickets":
        need(1)
        return {"exam": params[0], **st.ticket_counts(params[0])}
    if what == "grade":
        need(3)
        rec = st.grades.get((addr(params[0]), params[1], params[2]))
        if rec is None:
            return {}
        return {"student": params[0], "course": params[1], "exam": params[2],
                "grade": rec.grade, "evaluator": rec.evaluator.hex(), "height": rec.height}
    if what == "certificate":
        if len(params) == 2:
            cert_id = st.certificate_index.get((addr(params[0]), params[1]))
        else:
            need(1)
            cert_id = _hexarg(params[0], 32, "certificate id")
        cert = st.certificates.get(cert_id)
        return cert.to_dict() if cert else {}
    if what == "certificates":
        need(1)
        student = addr(params[0])
        ids = sorted(c.certificate_id.hex() for c in st.certificates.values() if c.student == student)
        return {"student": params[0], "certificates": ids} if ids else {}
    if what == "inventory":
        need(1)
        if params[0] not in st.inventory:
            return {}
        return {"item": params[0], "quantity": st.inventory[params[0]]}
    if what == "asset":
        need(1)
        trace = st.assets.get(params[0])
        if trace is None:
            return {}
        return {"tag": params[0], "trace": [[loc, ts] for loc, ts in trace]}
    if what == "exam-paper":
        need(1)
        paper = st.exam_papers.get(params[0])
        return {"exam": params[0], "questions": list(paper)} if paper is not None else {}
    if what == "members":
        need(0)
        return {"members": [{"address": m.member_address.hex(), "kind": m.member_kind.value,
                             "node_public_key": m.node_public_key.hex()} for m in st.roster()]}
    raise UsageError(f"unknown query {what!r}")


QUERIES = ("height", "state-root", "identity", "enrollment", "attendance", "hall-ticket",
           "tickets", "grade", "certificate", "certificates", "inventory", "asset",
           "exam-paper", "members")


def cmd_query(args) -> int:
    _, chain, st = _load_state(args)
    result = _query(st, chain, args.what, args.params, args.namespace)
    if not result:
        raise Invalid(f"{args.what}: not found", {"ok": False, "error": "not found"})
    if args.report_json:
        _emit(args, result)
    else:
        _emit(args, {k: (json.dumps(v) if isinstance(v, (list, dict)) else v)
                     for k, v in result.items()})
    return EXIT_OK


# -- verification -------------------------------------------------------------

def cmd_verify_chain(args) -> int:
    path = _require(Path(args.log) if args.log else _chain_path(args))
    records = ledger.read_log_records(path)
    bad = 0 if not records else ledger.verify_chain(records)
    if bad is not None:
        raise Invalid(f"invalid: first failing height {bad}",
                      {"ok": False, "first_invalid_height": bad, "blocks": len(records)})
    blocks = [ledger.Block.decode(r) for r in records]
    out = {"ok": True, "height": len(blocks) - 1, "tip": blocks[-1].digest.hex()}
    if args.config:
        st = _replay_checked(cfg.load(_require(Path(args.config))), blocks)
        out["state_root"] = st.root().hex()
    _emit(args, out)
    return EXIT_OK


def cmd_verify_cert(args) -> int:
    _, _, st = _load_state(args)
    try:
        presented = state.Certificate.from_dict(json.loads(_require(Path(args.certificate)).read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise Invalid(f"malformed certificate file: {exc}") from None
    cert_id = _hexarg(args.id, 32, "certificate id") if args.id else presented.certificate_id
    verdict = state.verify_certificate(st, cert_id, presented)
    out = {"ok": verdict.ok, "certificate_id": cert_id.hex(), "reason": verdict.reason}
    if not verdict.ok:
        raise Invalid(f"certificate rejected: {verdict.reason}", out)
    _emit(args, out)
    return EXIT_OK


def cmd_report(args) -> int:
    _, _, st = _load_state(args)
    expectation = None
    if args.schedule:
        schedule = iot.load_schedule(_require(Path(args.schedule)))
        throwaway = crypto.generate_identity(bytes(32))
        result = iot.process(iot.sense(schedule), schedule.registry(), schedule.calendar(),
                             iot.Operators(throwaway, throwaway))
        expectation = result.expectation
    period = None
    if args.period:
        try:
            start, end = (int(x) for x in args.period.split(":"))
        except ValueError:
            raise UsageError("--period expects START:END") from None
        period = (start, end)
    reports = iot.validate_and_report(st, expectation, period)
    if args.report_json:
        data = reports.to_dict()
        for row in data["assets"]:
            row["trace"] = [[loc, ts] for loc, ts in row["trace"]]
        print(json.dumps(data, sort_keys=True, indent=2))
    else:
        print(reports.to_text(args.delimiter), end="")
    return EXIT_INVALID if reports.mismatches else EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="genesis TOML (default $EXAMCHAIN_HOME/genesis.toml)")
    common.add_argument("--chain-path", help="block log (default $EXAMCHAIN_HOME/chain.log)")
    common.add_argument("--seed", type=int, help="seed for anything random")
    common.add_argument("--report-json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="examchain", description="Permissioned exam-administration chain.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", parents=[common], help="create a keypair")
    s.add_argument("--seed-file", help="read the 32-byte seed from this file")
    s.add_argument("--out", help="write the seed to this file")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("identity", parents=[common], help="hash a real-identity record")
    s.add_argument("record")
    s.set_defaults(func=cmd_identity)

    s = sub.add_parser("genesis", parents=[common], help="write or check a genesis config")
    s.add_argument("--check", metavar="FILE", help="validate an existing genesis file")
    s.add_argument("--out-dir", help="where to write genesis.toml and key seeds")
    s.add_argument("--replicas", type=int, default=4)
    s.add_argument("--namespace", help="key derivation namespace (default examchain, or seed-N with --seed)")
    s.add_argument("--threshold", type=int, default=75)
    s.add_argument("--device", action="append", help="register an IoT device id")
    s.set_defaults(func=cmd_genesis)

    s = sub.add_parser("run-scenario", parents=[common], help="run simulated replicas")
    s.add_argument("scenario", nargs="+")
    s.add_argument("--jobs", type=int, default=1, help="run independent scenarios in parallel")
    s.set_defaults(func=cmd_run_scenario)

    s = sub.add_parser("tx", help="build, check or commit a transaction")
    kinds = s.add_subparsers(dest="kind", required=True)
    for kind in ledger.TxKind:
        k = kinds.add_parser(kind.name.lower().replace("_", "-"), parents=[common])
        k.set_defaults(kind=kind.name.lower())
        for f in dataclasses.fields(state.PAYLOAD_TYPES[kind]):
            flag = "--" + f.name.replace("_", "-")
            if f.name == "entries":
                k.add_argument("--entry", dest="entries", action="append",
                               help="ADDRESS:1 present, ADDRESS:0 absent")
            else:
                k.add_argument(flag, dest=f.name, type=int if f.type == "int" else str)
        if kind is ledger.TxKind.REGISTER_IDENTITY:
            k.add_argument("--real-identity", metavar="TEXT",
                           help="real-identity record to hash (instead of --real-identity-hash)")
        k.add_argument("--signer-seed-file")
        k.add_argument("--signer", help="actor name from --namespace (controller, student-3, ...)")
        k.add_argument("--namespace", default="examchain")
        k.add_argument("--nonce", type=int)
        k.add_argument("--check", action="store_true", help="check against the chain state")
        k.add_argument("--commit", action="store_true", help="append as a new block")
        k.add_argument("--node-seed-file",
                       help="node key sealing a committed block (default $EXAMCHAIN_HOME/nodes.seeds)")
        k.add_argument("--block-time", type=int, default=0, help="timestamp for a committed block")
        k.add_argument("--append", metavar="TXFILE", help="append '<tick> <hex>' for scenarios")
        k.add_argument("--tick", type=int, default=1)
        k.set_defaults(func=cmd_tx)

    s = sub.add_parser("query", parents=[common], help="read committed state")
    s.add_argument("what", choices=QUERIES)
    s.add_argument("params", nargs="*", help="addresses may be hex or actor names")
    s.add_argument("--namespace", default="examchain", help="namespace for actor names")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("verify-chain", parents=[common], help="check a block log")
    s.add_argument("log", nargs="?")
    s.set_defaults(func=cmd_verify_chain)

    s = sub.add_parser("verify-cert", parents=[common], help="check a presented certificate")
    s.add_argument("certificate", help="certificate JSON as printed by 'query certificate'")
    s.add_argument("--id", help="certificate id to check against (default: the file's)")
    s.set_defaults(func=cmd_verify_cert)

    s = sub.add_parser("report", parents=[common], help="attendance, inventory and asset reports")
    s.add_argument("--schedule", help="device schedule to cross-check against")
    s.add_argument("--period", help="START:END tick window for asset traces")
    s.add_argument("--delimiter", default=",")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"examchain: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Invalid as exc:
        if args.report_json:
            print(json.dumps(exc.data, sort_keys=True, indent=2))
        else:
            print(str(exc))
        return EXIT_INVALID
    except (cfg.ConfigError, netsim.ScenarioError, ledger.LedgerError, enc.DecodeError,
            crypto.MalformedKey, iot.UnregisteredDevice) as exc:
        print(f"examchain: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # noqa: BLE001 - anything else is our bug
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
