"""
test_config.py
Process settings and build configuration loading
"""
import orjson
import pytest

from app.config import Settings, load_memory_config, settings
from app.core.exceptions import ConfigError
from app.models.memory import MemoryConfig


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("JCIMAGE_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("JCIMAGE_BUILD_WORKERS", "4")
    loaded = Settings()
    assert loaded.LOG_LEVEL == "DEBUG"
    assert loaded.BUILD_WORKERS == 4
    assert loaded.APP_NAME == "jcimage"


def test_defaults_are_stm32f401re():
    config = load_memory_config(None)
    assert config.sectors == [16, 16, 16, 16, 64, 128, 128, 128]
    assert config.target_sector == 5
    assert config.base_address == 0x08000000
    assert config.target.offset == 0x20000
    assert config.target.size == 128 * 1024
    assert sum(config.sector_sizes) == 512 * 1024
    assert config.packages == []
    assert config.entry_point is None


def test_load_fixture(config_file):
    config = load_memory_config(config_file)
    assert config.package_names == ["com.acme.util", "com.acme.crypto", "com.acme.wallet", "sample"]
    assert config.package_ids()["sample"] == 3
    assert config.is_native_only("sample")
    assert not config.is_native_only("com.acme.crypto")
    assert config.entry_point.class_name == "Wallet"


def test_default_base_address_from_settings(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "DEFAULT_BASE_ADDRESS", 0x10000000)
    assert load_memory_config(None).base_address == 0x10000000

    path = tmp_path / "board.json"
    path.write_bytes(orjson.dumps({"target_sector": 4}))
    assert load_memory_config(path).base_address == 0x10000000
    path.write_bytes(orjson.dumps({"base_address": "0x08000000"}))
    assert load_memory_config(path).base_address == 0x08000000


def test_base_address_forms():
    assert MemoryConfig(base_address="0x08004000").base_address == 0x08004000
    assert MemoryConfig(base_address=4096).base_address == 4096


def test_package_names_are_normalized():
    config = MemoryConfig(packages=[" com.acme.util "])
    assert config.package_names == ["com.acme.util"]


def test_with_packages_keeps_native_flags(build_config):
    reordered = build_config.with_packages(["sample", "com.acme.util"])
    assert reordered.package_ids() == {"sample": 0, "com.acme.util": 1}
    assert reordered.is_native_only("sample")
    assert not reordered.is_native_only("com.acme.util")


@pytest.mark.parametrize(
    "data",
    [
        {"sectors": [16, 48]},
        {"sectors": []},
        {"sectors": [16]},
        {"target_sector": 8},
        {"packages": ["a.b", "a.b"]},
        {"packages": ["a..b"]},
        {"bitmap_min": 0},
        {"flash": "stm32"},
    ],
    ids=["not-power-of-two", "no-sectors", "one-sector", "target-outside", "duplicate", "empty-part", "bitmap", "unknown-key"],
)
def test_invalid_configuration(tmp_path, data):
    path = tmp_path / "bad.json"
    path.write_bytes(orjson.dumps(data))
    with pytest.raises(ConfigError) as exc:
        load_memory_config(path)
    assert str(path) in str(exc.value)
    assert exc.value.exit_code == 2


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"sectors\": [16, 16")
    with pytest.raises(ConfigError) as exc:
        load_memory_config(path)
    assert "invalid JSON" in str(exc.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_memory_config(tmp_path / "absent.json")
