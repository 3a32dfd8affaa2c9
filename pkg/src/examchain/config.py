"""Genesis configuration: roster, initial identities and contract parameters.

A genesis file is TOML::

    threshold_percent = 75
    fault_tolerance = 1
    genesis_time = 0
    roster_file = "roster.txt"          # optional, relative to this file

    [[members]]
    kind = "university"
    public_key = "<hex>"

    [[identities]]
    role = "controller"
    public_key = "<hex>"
    real_identity = "Controller of Examinations"   # or real_identity_hash = "<hex>"

    [[devices]]
    id = "bio-1"
    public_key = "<hex>"

A roster file holds one member per line: ``<kind> <hex public key>``.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .state import DEFAULT_GRADE_SCALE, DEFAULT_THRESHOLD_PERCENT, MemberKind, Role

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MemberSpec:
    kind: str
    public_key: bytes


@dataclass(frozen=True)
class IdentitySpec:
    role: str
    public_key: bytes
    real_identity_hash: bytes


@dataclass
class GenesisConfig:
    members: list = field(default_factory=list)
    identities: list = field(default_factory=list)
    devices: list = field(default_factory=list)  # (device_id, public key)
    threshold_percent: int = DEFAULT_THRESHOLD_PERCENT
    grade_scale: tuple = DEFAULT_GRADE_SCALE
    fault_tolerance: int | None = None
    genesis_time: int = 0

    def __post_init__(self):
        if self.fault_tolerance is None:
            self.fault_tolerance = max(0, (len(self.members) - 1) // 3)
        self.validate()

    def validate(self) -> None:
        if not self.members or not self.identities:
            raise ConfigError("empty roster")
        kinds = [MemberKind(m.kind) for m in self.members]
        if kinds.count(MemberKind.UNIVERSITY) != 1:
            raise ConfigError("roster needs exactly one university member")
        roles = []
        for ident in self.identities:
            try:
                roles.append(Role(ident.role))
            except ValueError:
                raise ConfigError(f"unknown role {ident.role!r}") from None
        if Role.CONTROLLER not in roles:
            raise ConfigError("roster has no controller identity")
        addresses = [crypto.derive_address(i.public_key) for i in self.identities]
        if len(set(addresses)) != len(addresses):
            raise ConfigError("duplicate identity key")
        if len({i.real_identity_hash for i in self.identities}) != len(self.identities):
            raise ConfigError("duplicate real identity")
        if len({m.public_key for m in self.members}) != len(self.members):
            raise ConfigError("duplicate member key")
        if len(self.members) < 3 * self.fault_tolerance + 1:
            raise ConfigError(f"{len(self.members)} members cannot tolerate f={self.fault_tolerance}")
        if not 0 < self.threshold_percent <= 100:
            raise ConfigError("threshold_percent must be in 1..100")

    @property
    def n(self) -> int:
        return len(self.members)


def real_identity_hash(record: str) -> bytes:
    return crypto.hash(b"real-identity:" + record.encode("utf-8"))


def _hex(value, what) -> bytes:
    try:
        return bytes.fromhex(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what}: not hex") from None


def parse_roster(text: str) -> list[MemberSpec]:
    members = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"roster line {lineno}: expected '<kind> <hex key>'")
        members.append(MemberSpec(parts[0], _hex(parts[1], f"roster line {lineno}")))
    return members


def format_roster(members) -> str:
    return "".join(f"{m.kind} {m.public_key.hex()}\n" for m in members)


def from_dict(data: dict, base_dir: Path | None = None) -> GenesisConfig:
    members = [MemberSpec(m["kind"], _hex(m["public_key"], "member key"))
               for m in data.get("members", [])]
    if "roster_file" in data:
        path = Path(data["roster_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        members += parse_roster(path.read_text())
    identities = []
    for i in data.get("identities", []):
        if "real_identity_hash" in i:
            rih = _hex(i["real_identity_hash"], "real_identity_hash")
        else:
            rih = real_identity_hash(i["real_identity"])
        identities.append(IdentitySpec(i["role"], _hex(i["public_key"], "identity key"), rih))
    devices = [(d["id"], _hex(d["public_key"], "device key")) for d in data.get("devices", [])]
    try:
        return GenesisConfig(
            members=members,
            identities=identities,
            devices=devices,
            threshold_percent=int(data.get("threshold_percent", DEFAULT_THRESHOLD_PERCENT)),
            grade_scale=tuple(data.get("grade_scale", DEFAULT_GRADE_SCALE)),
            fault_tolerance=data.get("fault_tolerance"),
            genesis_time=int(data.get("genesis_time", 0)),
        )
    except (KeyError, ValueError, crypto.MalformedKey) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path: str | os.PathLike) -> GenesisConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data, path.parent)


def to_toml(config: GenesisConfig) -> str:
    lines = [
        f"threshold_percent = {config.threshold_percent}",
        f"fault_tolerance = {config.fault_tolerance}",
        f"genesis_time = {config.genesis_time}",
        "grade_scale = [" + ", ".join(f'"{g}"' for g in config.grade_scale) + "]",
    ]
    for m in config.members:
        lines += ["", "[[members]]", f'kind = "{m.kind}"', f'public_key = "{m.public_key.hex()}"']
    for i in config.identities:
        lines += ["", "[[identities]]", f'role = "{i.role}"', f'public_key = "{i.public_key.hex()}"',
                  f'real_identity_hash = "{i.real_identity_hash.hex()}"']
    for device_id, key in config.devices:
        lines += ["", "[[devices]]", f'id = "{device_id}"', f'public_key = "{key.hex()}"']
    return "\n".join(lines) + "\n"
