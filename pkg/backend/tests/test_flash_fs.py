"""
test_flash_fs.py
Tagged log-structured filesystem: block format, mount, crash safety, defragmentation
"""
import random

import pytest

from app.core.crc import crc8
from app.core.exceptions import FlashFull, HashMismatch, PowerLoss, TagLenInvalid
from app.core.flash_device import FlashDevice
from app.core.flash_fs import (
    BlockHeader,
    BlockState,
    FlashFileSystem,
    delete,
    encode_block,
    encoded_block_size,
    mount,
    read,
    write,
)

TOY_SECTORS = [256, 256, 256]
TAGS = [bytes([0x10 + i]) * (1 + i % 3) for i in range(6)]


def _random_op(rng: random.Random):
    """(tag, data) for a write, (tag, None) for a delete"""
    tag = rng.choice(TAGS)
    if rng.random() < 0.2:
        return tag, None
    return tag, rng.randbytes(rng.randint(0, 24))


def _apply(fs: FlashFileSystem, tag: bytes, data):
    if data is None:
        fs.delete(tag)
    else:
        fs.write(tag, data)


def _update(model: dict, tag: bytes, data) -> None:
    if data is None:
        model.pop(tag, None)
    else:
        model[tag] = data


# =============================================================================
# BLOCK FORMAT
# =============================================================================
def test_encode_block_layout():
    tag, data = b"\x02\x03\x00", b"\x80\x01\x02\x03\x04"
    block = encode_block(tag, data)
    assert block[0] == 0x46  # committed, valid, tag length 3, short length
    assert block[1] == 5
    assert block[2:5] == tag
    assert block[5:10] == data
    assert block[10] == crc8(bytes([0x06, 0x05]) + tag + data)
    assert len(block) == encoded_block_size(3, 5) == 11


def test_uncommitted_block_hashes_like_committed():
    committed = encode_block(b"k", b"v")
    pending = encode_block(b"k", b"v", committed=False)
    assert pending[0] == committed[0] | 0x80
    assert pending[1:] == committed[1:]


def test_long_data_uses_four_byte_length():
    data = bytes(300)
    block = encode_block(b"\x01", data)
    assert block[0] & 0x01
    assert block[1:5] == (300).to_bytes(4, "big")
    assert len(block) == encoded_block_size(1, 300) == 1 + 4 + 1 + 300 + 1


def test_header_bits():
    header = BlockHeader.from_byte(0xC7)
    assert header == BlockHeader(unused=True, valid=True, tag_len=3, dl=True)
    assert header.to_byte() == 0xC7


@pytest.mark.parametrize("tag", [b"", bytes(31)])
def test_tag_length_limits(tag):
    with pytest.raises(TagLenInvalid):
        encode_block(tag, b"")
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    with pytest.raises(TagLenInvalid):
        fs.write(tag, b"data")


# =============================================================================
# BASIC OPERATIONS
# =============================================================================
def test_write_read_delete():
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    assert fs.table.reserved_sector == 2
    fs.write(b"\x01", b"hello")
    fs.write(bytes(30), b"")
    assert fs.read(b"\x01") == b"hello"
    assert fs.read(bytes(30)) == b""
    assert fs.read(b"\x02") is None
    assert fs.delete(b"\x01")
    assert not fs.delete(b"\x01")
    assert fs.read(b"\x01") is None
    assert mount(fs.device).snapshot().keys() == {bytes(30)}


def test_overwrite_supersedes_previous_block():
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    fs.write(b"\x01", b"one", sector=0)
    fs.write(b"\x01", b"two", sector=0)
    states = [block.state for block in fs.blocks()]
    assert states == [BlockState.SUPERSEDED, BlockState.VALID]
    assert fs.read(b"\x01") == b"two"
    assert fs.stats()["garbage_bytes"] == encoded_block_size(1, 3)


def test_uncommitted_block_is_ignored():
    device = FlashDevice(TOY_SECTORS)
    device.program(0, encode_block(b"\x01", b"pending", committed=False))
    table = mount(device)
    assert b"\x01" not in table.entries
    assert table.garbage[0] == encoded_block_size(1, 7)


def test_later_duplicate_wins_and_repair_supersedes_earlier():
    device = FlashDevice(TOY_SECTORS)
    first = encode_block(b"\x05", b"old")
    device.program(0, first)
    device.program(len(first), encode_block(b"\x05", b"new"))
    table = mount(device)
    assert read(table, device, b"\x05") == b"new"
    assert table.duplicates == {b"\x05": [0]}

    fs = FlashFileSystem(device)
    assert fs.read(b"\x05") == b"new"
    assert [block.state for block in fs.blocks()] == [BlockState.SUPERSEDED, BlockState.VALID]


def _device_with_duplicate() -> FlashDevice:
    """Two committed valid copies of tag 05: A in sector 1, B in sector 2"""
    device = FlashDevice([256] * 4)
    device.program(256, encode_block(b"\x05", b"A"))
    device.program(512, encode_block(b"\x05", b"B"))
    return device


def test_write_without_repair_supersedes_every_old_copy():
    device = _device_with_duplicate()
    table = mount(device)
    assert table.reserved_sector == 3
    write(table, device, b"\x05", b"C")
    assert table.entries[b"\x05"].sector == 0
    assert table.duplicates == {}

    remounted = mount(device)
    assert read(remounted, device, b"\x05") == b"C"
    assert remounted.duplicates == {}


def test_delete_without_repair_supersedes_every_old_copy():
    device = _device_with_duplicate()
    table = mount(device)
    assert delete(table, device, b"\x05")
    assert b"\x05" not in mount(device).entries


def test_defragment_drops_erased_duplicates():
    device = _device_with_duplicate()
    fs = FlashFileSystem(device, auto_repair=False)
    fs.defragment(1)
    assert fs.table.duplicates == {}
    fs.write(b"\x05", b"C")
    assert device.read(256, 256) == b"\xff" * 256
    assert read(mount(device), device, b"\x05") == b"C"


def test_read_detects_corrupted_block():
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    fs.write(b"\x01", b"payload", sector=0)
    fs.device.flip_bit(fs.table.entries[b"\x01"].data_offset, 3)
    with pytest.raises(HashMismatch):
        fs.read(b"\x01")
    # the damaged block is not indexed after a remount
    assert fs.remount().entries == {}


def test_flash_full_when_live_data_fills_device():
    fs = FlashFileSystem(FlashDevice([256, 256]))
    fs.write(b"\x01", bytes(100))
    fs.write(b"\x02", bytes(100))
    with pytest.raises(FlashFull):
        fs.write(b"\x03", bytes(100))
    assert fs.read(b"\x01") == bytes(100)


# =============================================================================
# DEFRAGMENTATION AND DAMAGE
# =============================================================================
def test_defragment_moves_live_blocks_into_reserved_sector():
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    for value in (b"v1", b"v2", b"v3"):
        fs.write(b"\x0a", value, sector=0)
    fs.write(b"\x0b", b"keep", sector=0)
    fs.defragment(0)

    assert fs.table.reserved_sector == 0
    assert fs.device.is_erased(0)
    assert fs.table.entries[b"\x0a"].sector == 2
    assert fs.items() == {b"\x0a": b"v3", b"\x0b": b"keep"}
    assert fs.table.garbage[0] == 0

    remounted = FlashFileSystem(fs.device.copy())
    assert remounted.table.reserved_sector == 0
    assert remounted.items() == fs.items()


def test_write_triggers_defragmentation_when_full():
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    reserved = fs.table.reserved_sector
    for round_no in range(20):
        fs.write(b"\x01", bytes([round_no]) * 60)
    assert fs.table.reserved_sector != reserved
    assert fs.read(b"\x01") == bytes([19]) * 60


def test_corrupt_sector_is_evacuated_on_mount():
    device = FlashDevice(TOY_SECTORS)
    block = encode_block(b"\x01", b"survivor")
    device.program(0, block)
    device.program(len(block), b"\x7e")  # tag length 31 cannot exist

    table = mount(device)
    assert table.corrupt_sectors == {0}
    assert read(table, device, b"\x01") == b"survivor"

    fs = FlashFileSystem(device)
    assert fs.stats()["corrupt_sectors"] == []
    assert fs.read(b"\x01") == b"survivor"
    assert fs.table.reserved_sector == 0


def test_stray_bytes_mark_sector_dirty():
    device = FlashDevice(TOY_SECTORS)
    device.program(0, encode_block(b"\x01", b"x"))
    device.program(200, b"\x00")
    table = mount(device)
    assert table.dirty_sectors == {0}
    assert not table.writable(0)


def test_missing_reserved_sector_is_recovered():
    device = FlashDevice(TOY_SECTORS)
    device.program(0, encode_block(b"\x01", b"a"))
    device.program(256, encode_block(b"\x02", b"b"))
    device.program(512, encode_block(b"\x03", b"c"))
    assert mount(device).reserved_sector is None

    fs = FlashFileSystem(device)
    assert fs.table.reserved_sector is not None
    assert fs.device.is_erased(fs.table.reserved_sector)
    assert fs.items() == {b"\x01": b"a", b"\x02": b"b", b"\x03": b"c"}


# =============================================================================
# CRASH SAFETY AND PERSISTENCE
# =============================================================================
def test_crash_at_every_step_keeps_old_or_new_value():
    """Cut power at every program/erase step of >= 100 writes and remount"""
    rng = random.Random(2024)
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    model: dict = {}
    writes = 0
    while writes < 100:
        tag, data = _random_op(rng)
        snapshot = fs.device.copy()

        probe = FlashFileSystem(snapshot.copy())
        before = probe.device.steps
        _apply(probe, tag, data)
        total = probe.device.steps - before

        for cut in range(total):
            crashed = FlashFileSystem(snapshot.copy())
            crashed.device.fail_after(cut)
            with pytest.raises(PowerLoss):
                _apply(crashed, tag, data)
            crashed.device.fail_after(None)

            recovered = FlashFileSystem(crashed.device.copy()).items()
            assert recovered.get(tag) in (model.get(tag), data)
            for other, value in model.items():
                if other != tag:
                    assert recovered.get(other) == value
            assert set(recovered) <= set(model) | {tag}

        _apply(fs, tag, data)
        _update(model, tag, data)
        if data is not None:
            writes += 1


def test_remount_matches_model_for_many_sequences():
    defragmented = 0
    for seed in range(1000):
        rng = random.Random(seed)
        fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
        model: dict = {}
        reserved = fs.table.reserved_sector
        for _ in range(rng.randint(1, 60)):
            tag, data = _random_op(rng)
            _apply(fs, tag, data)
            _update(model, tag, data)
        defragmented += fs.table.reserved_sector != reserved

        table = mount(fs.device)
        assert {t: read(table, fs.device, t) for t in table.entries} == model, f"seed {seed}"
        assert FlashFileSystem(fs.device.copy()).items() == model, f"seed {seed}"
    assert defragmented > 0


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_remount_matches_model_across_defragmentation(seed):
    rng = random.Random(seed)
    fs = FlashFileSystem(FlashDevice(TOY_SECTORS))
    model: dict = {}
    reserved = fs.table.reserved_sector
    cycles = 0
    for _ in range(1000):
        tag, data = _random_op(rng)
        _apply(fs, tag, data)
        _update(model, tag, data)
        if fs.table.reserved_sector != reserved:
            cycles += 1
            reserved = fs.table.reserved_sector

        table = mount(fs.device)
        assert {t: read(table, fs.device, t) for t in table.entries} == model
    assert cycles >= 3
