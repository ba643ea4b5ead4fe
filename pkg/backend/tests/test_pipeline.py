"""
test_pipeline.py
End-to-end build: configuration and JCA directory in, artifacts out
"""
import shutil

import orjson
import pytest

from app.core.exceptions import ConfigError, MissingPackageError
from app.core.flash_fs import FlashFileSystem
from app.core.intel_hex import EOF_LINE, device_from_hex
from app.models.natives import EntryPoint
from app.models.reports import PackageReport
from app.services.cap_export import read_cap_archive
from app.services.pipeline import run_build
from tests.conftest import FIXTURES, write_config

SECTOR_SIZES = [size * 1024 for size in (16, 16, 16, 16, 64, 128, 128, 128)]


@pytest.fixture
def result(tmp_path, config_file, jca_dir):
    return run_build(config_file, jca_dir, tmp_path / "out")


def test_output_files(tmp_path, result):
    out = tmp_path / "out"
    assert (out / "flash.bin").stat().st_size == 512 * 1024
    assert (out / "flash.hex").read_text().endswith(EOF_LINE + "\n")
    assert (out / "jni.h").read_text() == result.header
    assert set(read_cap_archive(out / "cap" / "sample.cap")) >= {"Header", "Directory", "Method", "Applet"}
    assert (out / "cap" / "com" / "acme" / "wallet" / "javacard" / "Applet.cap").exists()
    assert len((out / "cap" / "manifest.jsonl").read_bytes().splitlines()) == 4


def test_report(tmp_path, result):
    report = orjson.loads((tmp_path / "out" / "build_report.json").read_bytes())
    assert [p["name"] for p in report["packages"]] == ["com.acme.util", "com.acme.crypto", "com.acme.wallet", "sample"]
    assert report["native_method_count"] == 3
    assert report["entry_point"] == {"package_token": 2, "class_token": 0, "method_token": 1}
    assert report["target_sector"] == 5
    assert report["image_blocks"] == 7
    assert {"flash.bin", "flash.hex", "jni.h", "cap/manifest.jsonl", "cap/sample.cap"} <= set(report["files"])
    assert result.report.total_cap_bytes == sum(cap.total_size for cap in result.caps)


def test_hex_matches_binary(tmp_path, result):
    out = tmp_path / "out"
    text = (out / "flash.hex").read_text()
    assert text.splitlines()[0] == ":020000040802F0"
    device = device_from_hex(text, SECTOR_SIZES, 0x08000000)
    assert device.to_bytes() == (out / "flash.bin").read_bytes()


def test_image_holds_initial_state(result):
    fs = FlashFileSystem(result.device.copy())
    assert fs.read(b"\x02\x03\x00") == b"\x80\x01\x02\x03\x04"
    assert fs.read(b"\x00")[0] == 0x0F
    assert all(block.sector == 5 for block in fs.blocks())


def test_native_only_warning(result):
    """crypto carries a native stub but is not marked native_only"""
    assert len(result.warnings) == 1
    assert "com.acme.crypto" in result.warnings[0]


def test_build_is_reproducible(tmp_path, config_file, jca_dir):
    run_build(config_file, jca_dir, tmp_path / "a")
    run_build(config_file, jca_dir, tmp_path / "b")
    for name in ("flash.bin", "flash.hex", "jni.h", "build_report.json", "cap/sample.cap"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_base_address_override(tmp_path, config_file, jca_dir):
    run_build(config_file, jca_dir, tmp_path / "out", base_address=0x09000000)
    assert (tmp_path / "out" / "flash.hex").read_text().splitlines()[0] == ":020000040902EF"


def test_defaults_without_config(tmp_path, jca_dir):
    """Packages ordered by imports, entry point (0, 0, 0)"""
    result = run_build(None, jca_dir, tmp_path / "out")
    assert result.config.package_names == ["com.acme.util", "com.acme.crypto", "com.acme.wallet", "sample"]
    assert result.entry_point == EntryPoint(package_token=0, class_token=0, method_token=0)
    assert "#define STARTING_JAVACARD_PACKAGE 0x00" in result.header
    assert len(result.warnings) == 2


def test_unlisted_packages_warn(tmp_path, jca_dir):
    path = write_config(tmp_path / "util.json", {"packages": ["com.acme.util"]})
    result = run_build(path, jca_dir, tmp_path / "out")
    assert [cap.package_name for cap in result.caps] == ["com.acme.util"]
    assert len(result.warnings) == 3
    assert any("sample" in w for w in result.warnings)


def test_missing_package(tmp_path, jca_dir):
    path = write_config(tmp_path / "bad.json", {"packages": ["com.acme.util", "com.acme.absent"]})
    with pytest.raises(MissingPackageError) as exc:
        run_build(path, jca_dir, tmp_path / "out")
    assert exc.value.exit_code == 2
    assert not (tmp_path / "out").exists()


def test_package_listed_before_import(tmp_path, jca_dir):
    path = write_config(tmp_path / "order.json", {"packages": ["com.acme.wallet", "com.acme.util", "com.acme.crypto"]})
    with pytest.raises(ConfigError) as exc:
        run_build(path, jca_dir, tmp_path / "out")
    assert "order.json" in str(exc.value)


def test_duplicate_package_files(tmp_path, jca_dir):
    shutil.copy(FIXTURES / "sample.jca", jca_dir / "corpus" / "sample_copy.jca")
    with pytest.raises(ConfigError) as exc:
        run_build(None, jca_dir, tmp_path / "out")
    assert "sample" in str(exc.value)


def test_missing_jca_dir(tmp_path):
    with pytest.raises(ConfigError):
        run_build(None, tmp_path / "nowhere", tmp_path / "out")


def test_package_report_totals():
    with pytest.raises(ValueError):
        PackageReport(name="p", package_id=0, aid="A0", components={"Header": 10}, cap_bytes=10)
