"""
intel_hex.py
Intel HEX encoding of flash snapshots

Only record types 00 (data), 01 (end of file) and 04 (extended linear
address) are produced or accepted. Data records carry at most 16 bytes and
never cross a 16-byte aligned window; windows made only of erased bytes
(0xFF) are skipped. Output is uppercase with LF line endings.
"""
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from app.core.exceptions import ChecksumMismatch, CorruptImageError, FlashError, MalformedRecord
from app.core.flash_device import ERASED_BYTE, FlashDevice

RECORD_WIDTH = 16
EOF_LINE = ":00000001FF"


class RecordType(IntEnum):
    DATA = 0x00
    EOF = 0x01
    EXT_LINEAR_ADDRESS = 0x04


def record_checksum(raw: bytes) -> int:
    """Two's complement of the low byte of the byte sum"""
    return (-sum(raw)) & 0xFF


@dataclass(frozen=True)
class HexRecord:
    """One Intel HEX line"""
    record_type: RecordType
    address: int
    payload: bytes = b""

    @property
    def byte_count(self) -> int:
        return len(self.payload)

    def raw(self) -> bytes:
        return bytes([self.byte_count]) + self.address.to_bytes(2, "big") + bytes([self.record_type]) + self.payload

    @property
    def checksum(self) -> int:
        return record_checksum(self.raw())

    def to_line(self) -> str:
        raw = self.raw()
        return ":" + (raw + bytes([record_checksum(raw)])).hex().upper()

    @classmethod
    def parse(cls, line: str, line_no: int = 1) -> "HexRecord":
        """
        Parse one line

        Raises:
            MalformedRecord: framing, length or record type problem
            ChecksumMismatch: checksum byte does not validate
        """
        line = line.strip()
        if not line.startswith(":"):
            raise MalformedRecord(line=line_no, reason="missing ':' start code")
        try:
            raw = bytes.fromhex(line[1:])
        except ValueError:
            raise MalformedRecord(line=line_no, reason="non-hex characters") from None
        if len(raw) < 5:
            raise MalformedRecord(line=line_no, reason="record too short")
        count = raw[0]
        if len(raw) != count + 5:
            raise MalformedRecord(line=line_no, reason=f"byte count {count} does not match record length")
        if sum(raw) & 0xFF:
            raise ChecksumMismatch(line=line_no)
        try:
            record_type = RecordType(raw[3])
        except ValueError:
            raise MalformedRecord(line=line_no, reason=f"unsupported record type 0x{raw[3]:02X}") from None
        return cls(record_type=record_type, address=int.from_bytes(raw[1:3], "big"), payload=raw[4:-1])


def _ext_linear(upper: int) -> HexRecord:
    return HexRecord(RecordType.EXT_LINEAR_ADDRESS, 0, upper.to_bytes(2, "big"))


def encode_hex(snapshot: Union[bytes, np.ndarray], base_address: int = 0) -> str:
    """
    Encode a snapshot as Intel HEX

    Args:
        snapshot: raw device bytes
        base_address: absolute address of snapshot byte 0

    Returns:
        str: HEX text ending with the EOF record and a newline
    """
    cells = np.frombuffer(bytes(snapshot), dtype=np.uint8) if not isinstance(snapshot, np.ndarray) else snapshot
    if base_address < 0 or base_address + cells.size > 0x1_0000_0000:
        raise FlashError(f"snapshot does not fit 32-bit addressing at base 0x{base_address:X}")

    lines: List[str] = []
    current_upper = None
    # windows are aligned on absolute addresses
    lead = base_address % RECORD_WIDTH
    start = 0
    while start < cells.size:
        stop = min(cells.size, start + RECORD_WIDTH - (lead if start == 0 else 0))
        window = cells[start:stop]
        used = np.flatnonzero(window != ERASED_BYTE)
        if used.size:
            first, last = start + int(used[0]), start + int(used[-1])
            address = base_address + first
            upper = address >> 16
            if upper != current_upper:
                lines.append(_ext_linear(upper).to_line())
                current_upper = upper
            payload = cells[first:last + 1].tobytes()
            lines.append(HexRecord(RecordType.DATA, address & 0xFFFF, payload).to_line())
        start = stop
    lines.append(EOF_LINE)
    return "\n".join(lines) + "\n"


def decode_hex(text: str) -> Dict[int, int]:
    """
    Decode Intel HEX text into an absolute address -> byte map

    Raises:
        ChecksumMismatch, MalformedRecord
    """
    memory: Dict[int, int] = {}
    upper = 0
    last_line = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        last_line = line_no
        record = HexRecord.parse(line, line_no)
        if record.record_type is RecordType.EOF:
            return memory
        if record.record_type is RecordType.EXT_LINEAR_ADDRESS:
            if record.byte_count != 2:
                raise MalformedRecord(line=line_no, reason="extended linear address needs 2 bytes")
            upper = int.from_bytes(record.payload, "big")
            continue
        base = (upper << 16) + record.address
        for offset, value in enumerate(record.payload):
            memory[base + offset] = value
    raise MalformedRecord(line=last_line, reason="missing end-of-file record")


def device_from_hex(text: str, sector_sizes: Sequence[int], base_address: int) -> FlashDevice:
    """Load decoded HEX data into a fresh erased device"""
    device = FlashDevice(sector_sizes)
    for address, value in decode_hex(text).items():
        offset = address - base_address
        if not 0 <= offset < device.size:
            raise CorruptImageError(
                reason=f"address 0x{address:08X} outside the device at base 0x{base_address:08X}"
            )
        device.cells[offset] = value
    return device


def save_hex(path: Union[str, Path], snapshot: bytes, base_address: int) -> Path:
    path = Path(path)
    path.write_text(encode_hex(snapshot, base_address), encoding="ascii", newline="\n")
    return path


def read_hex_text(path: Union[str, Path]) -> str:
    """
    Read a HEX file as ASCII text

    Raises:
        MalformedRecord: a byte outside ASCII, reported with its line
    """
    raw = Path(path).read_bytes()
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        line = raw.count(b"\n", 0, exc.start) + 1
        raise MalformedRecord(line=line, reason=f"non-ASCII byte 0x{raw[exc.start]:02X}") from exc


def load_hex(path: Union[str, Path]) -> Dict[int, int]:
    return decode_hex(read_hex_text(path))
