"""
flash_fs.py
Log-structured tagged filesystem over a sectored NOR flash

On-flash block layout (big-endian, MSB first):

    header    1 byte   bit 7 unused, bit 6 valid, bits 5..1 tag length, bit 0 DL
    length    1 byte (DL=0) or 4 bytes (DL=1)
    tag       1..30 bytes
    data      length bytes
    hashsum   1 byte   CRC-8 over header (bits 7-6 cleared), length, tag, data

A block is written with unused=1/valid=1, committed by clearing the unused
bit, and superseded by clearing the valid bit. Runs of 0x00 are erased
filler, the first 0xFF header ends the written part of a sector.

The tag -> block index lives only in RAM (MountTable) and is rebuilt by
scanning the whole device at mount. One sector is always kept erased so
defragmentation can copy live blocks out of a victim sector.

Key Features:
- atomic write protocol (old value stays readable until the new one commits)
- mount-time duplicate resolution and interrupted-defragment recovery
- corrupt/dirty sector containment
- reserved-sector defragmentation with the same atomicity as writes
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Set, Tuple

import numpy as np
import structlog

from app.core.crc import crc8
from app.core.exceptions import (
    CorruptSector,
    DataTooLarge,
    FlashError,
    FlashFull,
    HashMismatch,
    ReservedTooSmall,
    TagLenInvalid,
)
from app.core.flash_device import ERASED_BYTE, FlashDevice, SectorSpec

logger = structlog.get_logger()

# =============================================================================
# BLOCK FORMAT CONSTANTS
# =============================================================================
HEADER_UNUSED = 0x80
HEADER_VALID = 0x40
HEADER_TAG_MASK = 0x3E
HEADER_DL = 0x01
HASHED_HEADER_MASK = 0x3F

MIN_TAG_LEN = 1
MAX_TAG_LEN = 30
TAG_LEN_EMPTY = 0x1F
MAX_DATA_LEN = 0xFFFFFFFF
SHORT_LENGTH_MAX = 0xFF

GARBAGE_DEFRAG_RATIO = 0.5


class BlockState(str, Enum):
    VALID = "valid"
    SUPERSEDED = "superseded"
    UNCOMMITTED = "uncommitted"
    BAD_CRC = "bad-crc"


@dataclass(frozen=True)
class BlockHeader:
    """Decoded header byte"""
    unused: bool
    valid: bool
    tag_len: int
    dl: bool

    @classmethod
    def from_byte(cls, value: int) -> "BlockHeader":
        return cls(
            unused=bool(value & HEADER_UNUSED),
            valid=bool(value & HEADER_VALID),
            tag_len=(value & HEADER_TAG_MASK) >> 1,
            dl=bool(value & HEADER_DL),
        )

    def to_byte(self) -> int:
        return (
            (HEADER_UNUSED if self.unused else 0)
            | (HEADER_VALID if self.valid else 0)
            | (self.tag_len << 1)
            | (HEADER_DL if self.dl else 0)
        )


def _check_tag_and_data(tag: bytes, data: bytes) -> None:
    if not MIN_TAG_LEN <= len(tag) <= MAX_TAG_LEN:
        raise TagLenInvalid(length=len(tag))
    if len(data) > MAX_DATA_LEN:
        raise DataTooLarge(length=len(data))


def encoded_block_size(tag_len: int, data_len: int) -> int:
    """Bytes occupied on flash by a block"""
    length_size = 1 if data_len <= SHORT_LENGTH_MAX else 4
    return 1 + length_size + tag_len + data_len + 1


def encode_block(tag: bytes, data: bytes, committed: bool = True) -> bytes:
    """
    Encode one block

    Args:
        tag: 1..30 byte key
        data: payload
        committed: clear the unused bit (as after a completed write)

    Returns:
        bytes: header, length, tag, data, hashsum
    """
    tag, data = bytes(tag), bytes(data)
    _check_tag_and_data(tag, data)
    dl = len(data) > SHORT_LENGTH_MAX
    header = BlockHeader(unused=not committed, valid=True, tag_len=len(tag), dl=dl).to_byte()
    length = len(data).to_bytes(4 if dl else 1, "big")
    hashsum = crc8(bytes([header & HASHED_HEADER_MASK]) + length + tag + data)
    return bytes([header]) + length + tag + data + bytes([hashsum])


# =============================================================================
# SCANNING
# =============================================================================
@dataclass(frozen=True)
class ScannedBlock:
    """A block found while scanning the device"""
    address: int
    sector: int
    header: int
    tag: bytes
    data_len: int
    data_offset: int
    size: int
    hashsum: int
    crc_ok: bool

    @property
    def state(self) -> BlockState:
        bits = BlockHeader.from_byte(self.header)
        if bits.unused:
            return BlockState.UNCOMMITTED
        if not self.crc_ok:
            return BlockState.BAD_CRC
        if not bits.valid:
            return BlockState.SUPERSEDED
        return BlockState.VALID


@dataclass
class SectorScan:
    """Result of scanning one sector"""
    sector: SectorSpec
    blocks: List[ScannedBlock] = field(default_factory=list)
    cursor: int = 0  # first free byte
    erased_filler: int = 0  # bytes of 0x00 runs
    corrupt_at: Optional[int] = None
    dirty: bool = False  # non-0xFF bytes after the end of the written region

    @property
    def writable(self) -> bool:
        return self.corrupt_at is None and not self.dirty

    @property
    def wholly_erased(self) -> bool:
        return self.writable and not self.blocks and self.erased_filler == 0 and self.cursor == self.sector.offset


def _checksum_at(cells: np.ndarray, address: int, size: int) -> Tuple[int, bool]:
    raw = cells[address:address + size].tobytes()
    hashed = bytes([raw[0] & HASHED_HEADER_MASK]) + raw[1:-1]
    return raw[-1], crc8(hashed) == raw[-1]


def scan_sector(device: FlashDevice, sector: SectorSpec) -> SectorScan:
    """Parse the blocks of one sector"""
    cells = device.cells
    scan = SectorScan(sector=sector, cursor=sector.offset)
    pos, end = sector.offset, sector.end
    while pos < end:
        value = int(cells[pos])
        if value == ERASED_BYTE:
            break
        tag_len = (value & HEADER_TAG_MASK) >> 1
        if tag_len == 0:
            # erased filler: skip the whole run of zero-tag-length bytes
            run = pos + 1
            while run < end and (int(cells[run]) & HEADER_TAG_MASK) == 0 and int(cells[run]) != ERASED_BYTE:
                run += 1
            scan.erased_filler += run - pos
            pos = run
            continue
        if tag_len == TAG_LEN_EMPTY:
            scan.corrupt_at = pos
            break
        length_size = 4 if value & HEADER_DL else 1
        if pos + 1 + length_size > end:
            scan.corrupt_at = pos
            break
        data_len = int.from_bytes(cells[pos + 1:pos + 1 + length_size].tobytes(), "big")
        size = 1 + length_size + tag_len + data_len + 1
        if pos + size > end:
            scan.corrupt_at = pos
            break
        tag_start = pos + 1 + length_size
        hashsum, crc_ok = _checksum_at(cells, pos, size)
        scan.blocks.append(
            ScannedBlock(
                address=pos,
                sector=sector.index,
                header=value,
                tag=cells[tag_start:tag_start + tag_len].tobytes(),
                data_len=data_len,
                data_offset=tag_start + tag_len,
                size=size,
                hashsum=hashsum,
                crc_ok=crc_ok,
            )
        )
        pos += size
    if scan.corrupt_at is None:
        scan.cursor = pos
        scan.dirty = pos < end and not device.is_erased(sector.index, start=pos)
    else:
        scan.cursor = end
    return scan


def iter_blocks(device: FlashDevice) -> Iterator[ScannedBlock]:
    """Yield every parsed block of the device in scan order"""
    for sector in device.sectors:
        yield from scan_sector(device, sector).blocks


# =============================================================================
# MOUNT TABLE
# =============================================================================
@dataclass
class TableEntry:
    address: int
    sector: int
    data_offset: int
    data_len: int
    size: int


@dataclass
class MountTable:
    """
    RAM-only index rebuilt from the device at every mount

    Attributes:
        entries: tag -> location of its committed valid block
        cursors: sector -> first free address (sector end when not writable)
        garbage: sector -> bytes held by dead blocks, filler and corrupt tails
        live: sector -> bytes held by indexed blocks
        corrupt_sectors: sectors whose scan hit an impossible block
        dirty_sectors: sectors with stray bytes past their written region
        duplicates: tag -> addresses of committed valid blocks that lost to a later one
        reserved_sector: the erased sector kept for defragmentation
    """
    sectors: Tuple[SectorSpec, ...]
    entries: Dict[bytes, TableEntry] = field(default_factory=dict)
    cursors: Dict[int, int] = field(default_factory=dict)
    garbage: Dict[int, int] = field(default_factory=dict)
    live: Dict[int, int] = field(default_factory=dict)
    corrupt_sectors: Set[int] = field(default_factory=set)
    dirty_sectors: Set[int] = field(default_factory=set)
    duplicates: Dict[bytes, List[int]] = field(default_factory=dict)
    issues: List[CorruptSector] = field(default_factory=list)
    reserved_sector: Optional[int] = None

    def free_space(self, sector: int) -> int:
        return self.sectors[sector].end - self.cursors[sector]

    def writable(self, sector: int) -> bool:
        return sector not in self.corrupt_sectors and sector not in self.dirty_sectors

    @property
    def garbage_bytes(self) -> int:
        return sum(self.garbage.values())

    @property
    def garbage_ratio(self) -> float:
        used = self.garbage_bytes + sum(self.live.values())
        return self.garbage_bytes / used if used else 0.0

    def needs_defrag(self, sector: int) -> bool:
        if sector == self.reserved_sector:
            return False
        if not self.writable(sector):
            return True
        return self.garbage[sector] > self.sectors[sector].size * GARBAGE_DEFRAG_RATIO

    def snapshot(self) -> Dict[bytes, Tuple[int, int]]:
        return {tag: (entry.address, entry.data_len) for tag, entry in self.entries.items()}


def _choose_reserved(device: FlashDevice, scans: List[SectorScan]) -> Optional[int]:
    erased = [scan.sector for scan in scans if scan.wholly_erased]
    if not erased:
        return None
    if device.reserved_sector is not None and any(s.index == device.reserved_sector for s in erased):
        return device.reserved_sector
    return max(erased, key=lambda s: (s.size, s.index)).index


def mount(device: FlashDevice) -> MountTable:
    """
    Rebuild the tag index by scanning the whole device (read-only)

    Committed valid blocks with a correct hashsum are indexed; for duplicate
    tags the later block in scan order wins. Uncommitted, superseded and
    checksum-failing blocks count as garbage.

    Args:
        device: flash to scan

    Returns:
        MountTable: the RAM index
    """
    table = MountTable(sectors=device.sectors)
    scans = [scan_sector(device, sector) for sector in device.sectors]
    for scan in scans:
        index = scan.sector.index
        table.cursors[index] = scan.cursor
        table.garbage[index] = scan.erased_filler
        table.live[index] = 0
        if scan.corrupt_at is not None:
            table.corrupt_sectors.add(index)
            table.garbage[index] += scan.sector.end - scan.corrupt_at
            issue = CorruptSector(sector=index, address=scan.corrupt_at)
            table.issues.append(issue)
            logger.warning("Corrupt sector flagged for defragmentation", sector=index, address=hex(scan.corrupt_at))
        if scan.dirty:
            table.dirty_sectors.add(index)
        for block in scan.blocks:
            if block.state is not BlockState.VALID:
                table.garbage[index] += block.size
                continue
            previous = table.entries.get(block.tag)
            if previous is not None:
                table.duplicates.setdefault(block.tag, []).append(previous.address)
                table.live[previous.sector] -= previous.size
                table.garbage[previous.sector] += previous.size
            table.entries[block.tag] = TableEntry(
                address=block.address,
                sector=index,
                data_offset=block.data_offset,
                data_len=block.data_len,
                size=block.size,
            )
            table.live[index] += block.size
    table.reserved_sector = _choose_reserved(device, scans)
    device.reserved_sector = table.reserved_sector
    return table


# =============================================================================
# LOW-LEVEL BLOCK OPERATIONS
# =============================================================================
def _program_block(device: FlashDevice, address: int, tag: bytes, data: bytes) -> int:
    """Steps 1-3 of the write protocol; returns the committed header byte"""
    encoded = encode_block(tag, data, committed=False)
    header = encoded[0]
    device.program(address, encoded[:1])
    device.program(address + 1, encoded[1:])
    committed = header & ~HEADER_UNUSED
    device.program(address, bytes([committed]))
    return committed


def _invalidate(device: FlashDevice, address: int) -> None:
    header = int(device.cells[address])
    device.program(address, bytes([header & ~HEADER_VALID]))


def _supersede_duplicates(table: MountTable, device: FlashDevice, tag: bytes) -> None:
    """Clear ``valid`` on older copies of ``tag`` left behind by a crash"""
    for address in table.duplicates.pop(tag, []):
        _invalidate(device, address)


def _forget_sector(table: MountTable, sector: int) -> None:
    """Drop duplicate addresses that an erase of ``sector`` removed"""
    spec = table.sectors[sector]
    for tag in list(table.duplicates):
        kept = [a for a in table.duplicates[tag] if not spec.offset <= a < spec.end]
        if kept:
            table.duplicates[tag] = kept
        else:
            del table.duplicates[tag]


def _place(table: MountTable, size: int, exclude: Set[int]) -> Optional[int]:
    """Sector with the most free space (reserved excluded) if the block fits"""
    candidates = [
        s.index for s in table.sectors
        if s.index != table.reserved_sector and s.index not in exclude and table.writable(s.index)
    ]
    if not candidates:
        return None
    best = max(candidates, key=lambda index: (table.free_space(index), -index))
    return best if table.free_space(best) >= size else None


def _append(table: MountTable, device: FlashDevice, sector: int, tag: bytes, data: bytes) -> TableEntry:
    """Write a block at the sector cursor, supersede the old one, index it"""
    size = encoded_block_size(len(tag), len(data))
    address = table.cursors[sector]
    _program_block(device, address, tag, data)
    table.cursors[sector] = address + size

    # losing copies before the current block: a crash in between still mounts the current value
    _supersede_duplicates(table, device, tag)
    previous = table.entries.get(tag)
    if previous is not None:
        _invalidate(device, previous.address)
        table.live[previous.sector] -= previous.size
        table.garbage[previous.sector] += previous.size

    length_size = 1 if len(data) <= SHORT_LENGTH_MAX else 4
    entry = TableEntry(
        address=address,
        sector=sector,
        data_offset=address + 1 + length_size + len(tag),
        data_len=len(data),
        size=size,
    )
    table.entries[tag] = entry
    table.live[sector] += size
    return entry


# =============================================================================
# FILESYSTEM OPERATIONS
# =============================================================================
def write(table: MountTable, device: FlashDevice, tag: bytes, data: bytes, sector: Optional[int] = None) -> MountTable:
    """
    Store ``data`` under ``tag`` with the atomic write protocol

    Placement is the writable sector with the most free space (reserved
    excluded) unless ``sector`` pins it. When nothing fits, sectors holding
    garbage are defragmented until the block fits.

    Raises:
        TagLenInvalid, DataTooLarge: bad arguments
        FlashFull: no room even after defragmentation
    """
    tag, data = bytes(tag), bytes(data)
    _check_tag_and_data(tag, data)
    size = encoded_block_size(len(tag), len(data))

    if sector is not None:
        if table.free_space(sector) < size or not table.writable(sector):
            raise FlashFull(required=size)
        _append(table, device, sector, tag, data)
        return table

    target = _place(table, size, exclude=set())
    tried: Set[int] = set()
    while target is None:
        victim = _pick_victim(table, tried)
        if victim is None:
            logger.warning("Flash full", required=size, garbage=table.garbage_bytes)
            raise FlashFull(required=size)
        tried.add(victim)
        defragment(table, device, victim)
        target = _place(table, size, exclude=set())
    _append(table, device, target, tag, data)
    return table


def _pick_victim(table: MountTable, tried: Set[int]) -> Optional[int]:
    reserved = table.reserved_sector
    if reserved is None:
        return None
    capacity = table.sectors[reserved].size
    candidates = [
        s.index for s in table.sectors
        if s.index != reserved
        and s.index not in tried
        and (table.garbage[s.index] > 0 or not table.writable(s.index))
        and table.live[s.index] <= capacity
    ]
    if not candidates:
        return None
    return max(candidates, key=lambda index: (table.garbage[index], -index))


def read(table: MountTable, device: FlashDevice, tag: bytes) -> Optional[bytes]:
    """
    Return the data stored under ``tag`` or None

    Raises:
        HashMismatch: the block no longer matches its hashsum
    """
    entry = table.entries.get(bytes(tag))
    if entry is None:
        return None
    _, crc_ok = _checksum_at(device.cells, entry.address, entry.size)
    if not crc_ok:
        raise HashMismatch(address=entry.address)
    return device.read(entry.data_offset, entry.data_len)


def delete(table: MountTable, device: FlashDevice, tag: bytes) -> bool:
    """Supersede the block stored under ``tag``; False when absent"""
    tag = bytes(tag)
    entry = table.entries.pop(tag, None)
    if entry is None:
        return False
    _supersede_duplicates(table, device, tag)
    _invalidate(device, entry.address)
    table.live[entry.sector] -= entry.size
    table.garbage[entry.sector] += entry.size
    return True


def defragment(table: MountTable, device: FlashDevice, victim: int) -> MountTable:
    """
    Move every live block of ``victim`` into the reserved sector, erase the
    victim and make it the new reserved sector

    Raises:
        FlashError: no reserved sector, or victim is the reserved sector
        ReservedTooSmall: live data does not fit the reserved sector
    """
    reserved = table.reserved_sector
    if reserved is None:
        raise FlashError("no erased sector is available for defragmentation")
    if victim == reserved:
        raise FlashError(f"sector {victim} is the reserved sector")
    live_blocks = sorted(
        ((tag, entry) for tag, entry in table.entries.items() if entry.sector == victim),
        key=lambda item: item[1].address,
    )
    required = sum(entry.size for _, entry in live_blocks)
    available = table.sectors[reserved].size
    if required > available:
        raise ReservedTooSmall(reserved=reserved, available=available, required=required)

    # the reserved sector takes writes while it is being filled
    for tag, entry in live_blocks:
        data = device.read(entry.data_offset, entry.data_len)
        _append(table, device, reserved, tag, data)

    device.erase(victim)
    _forget_sector(table, victim)
    spec = table.sectors[victim]
    table.cursors[victim] = spec.offset
    table.garbage[victim] = 0
    table.live[victim] = 0
    table.corrupt_sectors.discard(victim)
    table.dirty_sectors.discard(victim)
    table.reserved_sector = victim
    device.reserved_sector = victim
    logger.info("Sector defragmented", victim=victim, moved=len(live_blocks), into=reserved)
    return table


def _recover_reserved(table: MountTable, device: FlashDevice) -> None:
    """
    Restore an erased sector after an interrupted defragmentation: evacuate
    the sector with the least live data whose blocks fit elsewhere
    """
    order = sorted(table.sectors, key=lambda s: (table.live[s.index], s.index))
    for spec in order:
        victim = spec.index
        blocks = sorted(
            ((tag, entry) for tag, entry in table.entries.items() if entry.sector == victim),
            key=lambda item: item[1].address,
        )
        free = {
            s.index: table.free_space(s.index)
            for s in table.sectors
            if s.index != victim and table.writable(s.index)
        }
        plan = []
        for tag, entry in blocks:
            fits = [index for index, room in free.items() if room >= entry.size]
            if not fits:
                break
            target = max(fits, key=lambda index: (free[index], -index))
            free[target] -= entry.size
            plan.append((tag, entry, target))
        if len(plan) != len(blocks):
            continue
        for tag, entry, target in plan:
            data = device.read(entry.data_offset, entry.data_len)
            _append(table, device, target, tag, data)
        device.erase(victim)
        _forget_sector(table, victim)
        table.cursors[victim] = spec.offset
        table.garbage[victim] = 0
        table.live[victim] = 0
        table.corrupt_sectors.discard(victim)
        table.dirty_sectors.discard(victim)
        table.reserved_sector = victim
        device.reserved_sector = victim
        logger.info("Recovered reserved sector", sector=victim, moved=len(plan))
        return
    logger.warning("No sector could be evacuated; defragmentation unavailable")


def repair(table: MountTable, device: FlashDevice) -> MountTable:
    """
    Bring a freshly mounted device back to a quiescent state:
    supersede losing duplicates, recover the reserved sector, then
    defragment corrupt, dirty or mostly-garbage sectors
    """
    for tag in list(table.duplicates):
        _supersede_duplicates(table, device, tag)

    if table.reserved_sector is None:
        _recover_reserved(table, device)

    for spec in table.sectors:
        if table.reserved_sector is None:
            break
        if table.needs_defrag(spec.index) and table.live[spec.index] <= table.sectors[table.reserved_sector].size:
            defragment(table, device, spec.index)
    return table


# =============================================================================
# FILESYSTEM FACADE
# =============================================================================
class FlashFileSystem:
    """
    Mounted filesystem: a device plus its RAM index

    Single writer: mutations need exclusive access; readers may run
    concurrently only between mutations.
    """

    def __init__(self, device: FlashDevice, auto_repair: bool = True):
        self.device = device
        self.auto_repair = auto_repair
        self.table = mount(device)
        if auto_repair:
            repair(self.table, device)
        logger.debug(
            "Filesystem mounted",
            blocks=len(self.table.entries),
            reserved=self.table.reserved_sector,
            garbage=self.table.garbage_bytes,
        )

    def remount(self) -> MountTable:
        self.table = mount(self.device)
        if self.auto_repair:
            repair(self.table, self.device)
        return self.table

    def write(self, tag: bytes, data: bytes, sector: Optional[int] = None) -> None:
        write(self.table, self.device, tag, data, sector=sector)

    def read(self, tag: bytes) -> Optional[bytes]:
        return read(self.table, self.device, tag)

    def delete(self, tag: bytes) -> bool:
        return delete(self.table, self.device, tag)

    def defragment(self, victim: int) -> None:
        defragment(self.table, self.device, victim)

    def items(self) -> Dict[bytes, bytes]:
        return {tag: self.read(tag) for tag in sorted(self.table.entries)}

    def blocks(self) -> List[ScannedBlock]:
        return list(iter_blocks(self.device))

    def stats(self) -> Dict[str, object]:
        return {
            "blocks": len(self.table.entries),
            "reserved_sector": self.table.reserved_sector,
            "garbage_bytes": self.table.garbage_bytes,
            "garbage_ratio": round(self.table.garbage_ratio, 4),
            "corrupt_sectors": sorted(self.table.corrupt_sectors),
            "dirty_sectors": sorted(self.table.dirty_sectors),
        }
