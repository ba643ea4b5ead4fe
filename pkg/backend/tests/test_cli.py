"""
test_cli.py
Command-line surface and exit codes
"""
import pytest

from app.main import main

BLOCK_ZERO = 0x20000  # first block of the image: sector 5


@pytest.fixture
def built(tmp_path, config_file, jca_dir, capsys):
    out = tmp_path / "out"
    code = main(["build", "--config", str(config_file), "--jca-dir", str(jca_dir), "--out", str(out)])
    assert code == 0
    return out


def test_build_summary(built, capsys):
    captured = capsys.readouterr()
    assert "built 4 packages, 3 native methods" in captured.out
    assert "sector 5" in captured.out
    assert "warning: package com.acme.crypto" in captured.err


def test_build_input_error(tmp_path, capsys):
    code = main(["build", "--jca-dir", str(tmp_path / "nowhere"), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_build_error_in_source(tmp_path, capsys):
    jca = tmp_path / "jca"
    jca.mkdir()
    (jca / "broken.jca").write_text(".package broken {\n    .aid 0xA0:0x00;\n    @oops;\n}\n")
    assert main(["build", "--jca-dir", str(jca), "--out", str(tmp_path / "out")]) == 2
    assert "broken.jca:3" in capsys.readouterr().err


def test_bad_base_address(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["build", "--jca-dir", str(tmp_path), "--out", str(tmp_path), "--base-address", "flash"])
    assert exc.value.code == 2


def test_fs_get(built, capsys):
    capsys.readouterr()
    assert main(["fs", "get", "020300", "--image", str(built / "flash.bin")]) == 0
    assert capsys.readouterr().out.strip() == "8001020304"


def test_fs_get_from_hex(built, capsys):
    capsys.readouterr()
    assert main(["fs", "get", "00", "--image", str(built / "flash.hex")]) == 0
    assert capsys.readouterr().out.strip() == "0F00000000000000"


def test_fs_get_missing_tag(built, capsys):
    assert main(["fs", "get", "7F7F", "--image", str(built / "flash.bin")]) == 3
    assert "7F7F" in capsys.readouterr().err


def test_fs_get_invalid_tag(built):
    assert main(["fs", "get", "zz", "--image", str(built / "flash.bin")]) == 2


def test_fs_dump(built, capsys):
    capsys.readouterr()
    assert main(["fs", "dump", "--image", str(built / "flash.bin")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "valid 00 8 crc-ok"
    assert lines[-1] == "valid 020300 5 crc-ok"
    assert len(lines) == 7


def test_fs_verify(built, capsys):
    capsys.readouterr()
    assert main(["fs", "verify", "--image", str(built / "flash.bin")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "blocks 7" in out
    assert "bad-crc 0" in out
    assert "garbage-bytes 0" in out


def test_fs_verify_detects_corruption(built, capsys):
    image = built / "flash.bin"
    raw = bytearray(image.read_bytes())
    raw[BLOCK_ZERO + 3] ^= 0x01  # first bitmap byte of the package table
    image.write_bytes(bytes(raw))
    capsys.readouterr()

    assert main(["fs", "verify", "--image", str(image)]) == 2
    assert "bad-crc 1" in capsys.readouterr().out
    assert main(["fs", "dump", "--image", str(image)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "bad-crc 00 8 crc-bad"


def test_fs_wrong_image_size(tmp_path):
    image = tmp_path / "short.bin"
    image.write_bytes(b"\xff" * 1024)
    assert main(["fs", "dump", "--image", str(image)]) == 2


def test_build_rejects_undecodable_jca(tmp_path, capsys):
    jca = tmp_path / "jca"
    jca.mkdir()
    (jca / "latin1.jca").write_bytes(b".package broken {\n    .aid 0xA0:0x00; // caf\xe9\n}\n")
    assert main(["build", "--jca-dir", str(jca), "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert "latin1.jca:2:" in err
    assert "0xE9" in err


def test_fs_rejects_non_ascii_hex(tmp_path, capsys):
    image = tmp_path / "flash.hex"
    image.write_bytes(b":020000040802F0\n\xff\xfe\n:00000001FF\n")
    assert main(["fs", "dump", "--image", str(image)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_fs_rejects_hex_outside_device(tmp_path):
    image = tmp_path / "flash.hex"
    image.write_text(":020000040900F1\n:0100000001FE\n:00000001FF\n")
    assert main(["fs", "dump", "--image", str(image)]) == 2
