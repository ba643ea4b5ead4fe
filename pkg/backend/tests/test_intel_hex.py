"""
test_intel_hex.py
Intel HEX encoding of flash snapshots
"""
import random

import pytest

from app.core.exceptions import ChecksumMismatch, CorruptImageError, MalformedRecord
from app.core.intel_hex import (
    EOF_LINE,
    HexRecord,
    RecordType,
    decode_hex,
    device_from_hex,
    encode_hex,
    load_hex,
    save_hex,
)


def _sparse_snapshot(rng: random.Random) -> bytes:
    snapshot = bytearray(b"\xff" * rng.randint(1, 400))
    for _ in range(rng.randint(0, 6)):
        start = rng.randrange(len(snapshot))
        length = rng.randint(1, 40)
        snapshot[start:start + length] = rng.randbytes(min(length, len(snapshot) - start))
    return bytes(snapshot)


def _rebuild(memory: dict, base: int, size: int) -> bytes:
    image = bytearray(b"\xff" * size)
    for address, value in memory.items():
        image[address - base] = value
    return bytes(image)


def test_empty_image_is_only_the_eof_record():
    assert EOF_LINE == ":00000001FF"
    assert encode_hex(b"\xff" * 4096, 0x08000000) == ":00000001FF\n"
    assert encode_hex(b"") == ":00000001FF\n"


def test_known_encoding():
    text = encode_hex(bytes(range(4)) + b"\xff" * 12, 0x08000000)
    assert text.splitlines() == [
        ":020000040800F2",
        ":0400000000010203F6",
        ":00000001FF",
    ]


def test_random_sparse_snapshots_round_trip():
    rng = random.Random(0x1E)
    bases = [0, 0x08000000, 0x08020000, 0x0800FFF7, 0x0001FFE3]
    for case in range(500):
        base = bases[case % len(bases)] + rng.randrange(0, 64)
        snapshot = _sparse_snapshot(rng)
        text = encode_hex(snapshot, base)
        assert text.endswith(EOF_LINE + "\n")

        for line in text.splitlines():
            raw = bytes.fromhex(line[1:])
            assert sum(raw) & 0xFF == 0
            assert line == line.upper()
            assert raw[0] <= 16

        memory = decode_hex(text)
        assert _rebuild(memory, base, len(snapshot)) == snapshot


def test_records_never_cross_sixteen_byte_windows():
    rng = random.Random(5)
    for _ in range(100):
        base = rng.randrange(0, 0x20000)
        text = encode_hex(rng.randbytes(rng.randint(1, 200)), base)
        for line in text.splitlines():
            record = HexRecord.parse(line)
            if record.record_type is RecordType.DATA:
                first = record.address
                last = record.address + record.byte_count - 1
                assert first // 16 == last // 16


def test_crossing_64k_boundary_emits_extended_address():
    snapshot = bytes(range(32))
    text = encode_hex(snapshot, 0x0800FFF0)
    lines = text.splitlines()
    assert lines[0] == HexRecord(RecordType.EXT_LINEAR_ADDRESS, 0, b"\x08\x00").to_line()
    assert HexRecord(RecordType.EXT_LINEAR_ADDRESS, 0, b"\x08\x01").to_line() in lines
    assert _rebuild(decode_hex(text), 0x0800FFF0, 32) == snapshot


def test_parse_rejects_bad_records():
    with pytest.raises(MalformedRecord):
        HexRecord.parse("00000001FF")
    with pytest.raises(MalformedRecord):
        HexRecord.parse(":0000000XFF")
    with pytest.raises(MalformedRecord):
        HexRecord.parse(":0400000000010203")
    with pytest.raises(ChecksumMismatch):
        HexRecord.parse(":0400000000010203F7")
    # start segment address records are not accepted
    with pytest.raises(MalformedRecord):
        HexRecord.parse(":0400000300003800C1")


def test_decode_requires_eof_record():
    with pytest.raises(MalformedRecord) as exc_info:
        decode_hex(":0400000000010203F6\n")
    assert exc_info.value.line == 1


def test_error_reports_line_number():
    text = ":020000040800F2\n:0400000000010203F7\n:00000001FF\n"
    with pytest.raises(ChecksumMismatch) as exc_info:
        decode_hex(text)
    assert exc_info.value.line == 2
    assert exc_info.value.exit_code == 2


def test_device_from_hex_places_bytes_at_offsets():
    sizes = [256, 256]
    snapshot = bytearray(b"\xff" * 512)
    snapshot[300:304] = b"\x01\x02\x03\x04"
    device = device_from_hex(encode_hex(bytes(snapshot), 0x08000000), sizes, 0x08000000)
    assert device.to_bytes() == bytes(snapshot)
    with pytest.raises(CorruptImageError) as exc_info:
        device_from_hex(encode_hex(bytes(snapshot), 0x08000000), sizes, 0x08000200)
    assert exc_info.value.exit_code == 2


def test_save_and_load(tmp_path):
    snapshot = b"\xff" * 20 + b"jcimage" + b"\xff" * 5
    path = save_hex(tmp_path / "flash.hex", snapshot, 0x08020000)
    assert path.read_bytes().endswith(b":00000001FF\n")
    assert _rebuild(load_hex(path), 0x08020000, len(snapshot)) == snapshot


def test_load_rejects_non_ascii_bytes(tmp_path):
    path = tmp_path / "flash.hex"
    path.write_bytes(b":020000040802F0\n:01000000\xe9FF\n:00000001FF\n")
    with pytest.raises(MalformedRecord) as exc_info:
        load_hex(path)
    assert exc_info.value.line == 2
    assert exc_info.value.exit_code == 2
