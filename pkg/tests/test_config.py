import pytest

from examchain import config as cfg
from examchain.config import ConfigError, GenesisConfig, IdentitySpec, MemberSpec
from examchain.state import Role, WorldState


def test_toml_roundtrip(config, tmp_path):
    path = tmp_path / "genesis.toml"
    path.write_text(cfg.to_toml(config))
    loaded = cfg.load(path)
    assert loaded == config
    assert WorldState.from_config(loaded).root() == WorldState.from_config(config).root()


def test_roster_file_is_relative_to_genesis(config, tmp_path):
    (tmp_path / "roster.txt").write_text("# members\n" + cfg.format_roster(config.members))
    text = cfg.to_toml(config)
    head, rest = text.split("[[members]]", 1)
    identities = "[[identities]]" + rest.split("[[identities]]", 1)[1]
    (tmp_path / "g.toml").write_text('roster_file = "roster.txt"\n' + head + identities)
    assert cfg.load(tmp_path / "g.toml") == config


def test_real_identity_text_is_hashed(config, tmp_path):
    ident = config.identities[0]
    toml = cfg.to_toml(config).replace(f'real_identity_hash = "{ident.real_identity_hash.hex()}"',
                                       'real_identity = "Someone"', 1)
    (tmp_path / "g.toml").write_text(toml)
    assert cfg.load(tmp_path / "g.toml").identities[0].real_identity_hash == cfg.real_identity_hash("Someone")


def test_parse_roster_errors():
    assert cfg.parse_roster("\n# only comments\n") == []
    with pytest.raises(ConfigError, match="line 1"):
        cfg.parse_roster("university\n")
    with pytest.raises(ConfigError, match="not hex"):
        cfg.parse_roster("university zz\n")


def test_fault_tolerance_defaults_from_size(config):
    assert config.fault_tolerance == 1
    assert config.n == 4


@pytest.mark.parametrize("mutate,match", [
    (lambda c: c.members.clear(), "empty roster"),
    (lambda c: c.members.append(MemberSpec("university", bytes(range(32)))), "exactly one university"),
    (lambda c: c.identities.append(IdentitySpec("dean", bytes(32), bytes(32))), "unknown role"),
    (lambda c: c.identities.append(c.identities[0]), "duplicate identity key"),
    (lambda c: setattr(c, "threshold_percent", 0), "threshold"),
    (lambda c: setattr(c, "fault_tolerance", 2), "cannot tolerate"),
    (lambda c: c.members.append(c.members[1]), "duplicate member"),
])
def test_validation(config, mutate, match):
    mutate(config)
    with pytest.raises(ConfigError, match=match):
        config.validate()


def test_controller_required(config):
    config.identities = [i for i in config.identities if i.role != Role.CONTROLLER.value]
    with pytest.raises(ConfigError, match="no controller"):
        config.validate()


def test_bad_toml(tmp_path):
    (tmp_path / "g.toml").write_text("members = [")
    with pytest.raises(ConfigError):
        cfg.load(tmp_path / "g.toml")
    (tmp_path / "h.toml").write_text('[[members]]\nkind = "university"\npublic_key = "xy"\n')
    with pytest.raises(ConfigError, match="not hex"):
        cfg.load(tmp_path / "h.toml")
