"""
crc.py
CRC-8 used as the filesystem block hashsum

Parameters: polynomial 0x07, init 0x00, no input/output reflection, no final
XOR (the SMBus PEC parameterization). Check value of b"123456789" is 0xF4.
"""
from typing import Iterable

POLYNOMIAL = 0x07
INIT = 0x00


def _build_table() -> tuple:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            if crc & 0x80:
                crc = ((crc << 1) ^ POLYNOMIAL) & 0xFF
            else:
                crc = (crc << 1) & 0xFF
        table.append(crc)
    return tuple(table)


CRC8_TABLE = _build_table()


def crc8(data: Iterable[int], crc: int = INIT) -> int:
    """
    Table-driven CRC-8

    Args:
        data: bytes (or any iterable of 0..255 ints)
        crc: running value, to continue a checksum over several fragments

    Returns:
        int: checksum in 0..255
    """
    table = CRC8_TABLE
    for byte in data:
        crc = table[crc ^ byte]
    return crc
