import pytest

from prognet import configio, network as net
from prognet.configio import ConfigFileError


def test_parse_kv_text_basics():
    text = """
# comment
topology = parallel
classes=3   # trailing comment
empty_ok =
"""
    kv = configio.parse_kv_text(text)
    assert kv == {"topology": "parallel", "classes": "3", "empty_ok": ""}


def test_parse_kv_rejects_bad_lines():
    with pytest.raises(ConfigFileError, match="line 1"):
        configio.parse_kv_text("no equals sign here")
    with pytest.raises(ConfigFileError, match="empty key"):
        configio.parse_kv_text("= value")


def test_format_kv_is_sorted_and_stable():
    kv = {"b": "2", "a": "1"}
    assert configio.format_kv(kv) == "a = 1\nb = 2\n"
    assert configio.kv_digest(kv) == configio.kv_digest({"a": "1", "b": "2"})


@pytest.mark.parametrize(
    "cfg",
    [net.p4_residual(16), net.p6_residual(8), net.s9_dense(12, 24), net.desk_mlp()],
)
def test_network_config_roundtrip(cfg):
    kv = configio.network_config_to_kv(cfg)
    back = configio.network_config_from_kv(kv)
    assert back == cfg or (
        back.topology == cfg.topology
        and back.stages == cfg.stages
        and back.serial_pools == cfg.serial_pools
        and back.num_classes == cfg.num_classes
        and back.base_width == cfg.base_width
        and back.input_shape == tuple(cfg.input_shape)
    )
    assert configio.network_config_digest(back) == configio.network_config_digest(cfg)


def test_network_config_from_kv_errors():
    with pytest.raises(ConfigFileError, match="missing network config key"):
        configio.network_config_from_kv({"topology": "parallel"})
    base = {
        "topology": "ring",
        "block": "mlp",
        "classes": "3",
        "base_width": "8",
        "input": "3,8,8",
    }
    with pytest.raises(ConfigFileError, match="unknown topology"):
        configio.network_config_from_kv(base)
    base["topology"] = "parallel"
    with pytest.raises(ConfigFileError, match="multipliers"):
        configio.network_config_from_kv(base)


def test_serial_groups_parse_pools():
    kv = {
        "topology": "serial",
        "block": "dense",
        "classes": "10",
        "base_width": "24",
        "input": "3,32,32",
        "groups": "2,2,2/2,2,2/3,3",
        "growth": "12",
    }
    cfg = configio.network_config_from_kv(kv)
    assert cfg.num_stages == 9
    assert cfg.serial_pools == (3, 6)
    assert configio.network_config_to_kv(cfg)["groups"] == "2,2,2/2,2,2/3,3"


def test_synthetic_spec_roundtrip():
    from prognet.data import SyntheticSpec

    spec = SyntheticSpec(3, (3, 8, 8), (4.0, 1.5, 0.7), 2000, 7)
    kv = configio.synthetic_spec_to_kv(spec)
    assert configio.synthetic_spec_from_kv(kv) == spec


def test_read_kv_missing_file(tmp_path):
    with pytest.raises(ConfigFileError, match="not found"):
        configio.read_kv(str(tmp_path / "nope.txt"))
