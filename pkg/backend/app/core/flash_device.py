"""
flash_device.py
Simulated sectored NOR flash

The model follows the physical rules the filesystem relies on:
- programming may only move bits from 1 to 0; a 0 -> 1 transition raises
  ProgramError and leaves the cells untouched
- erasing works on a whole sector and sets every byte to 0xFF
- sector sizes are powers of two

Every programmed byte and every sector erase is one "step". A fault budget
(fail_after) makes the device raise PowerLoss at a chosen step so tests can
cut a write at every possible point; steps already performed stay applied.
"""
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import FlashError, PowerLoss, ProgramError

ERASED_BYTE = 0xFF
KIB = 1024

# STM32F401RE: 512 KiB in one bank
STM32F401RE_SECTORS_KIB: Tuple[int, ...] = (16, 16, 16, 16, 64, 128, 128, 128)


class SectorSpec(NamedTuple):
    """One sector of the device"""
    index: int
    offset: int
    size: int

    @property
    def end(self) -> int:
        return self.offset + self.size


def build_geometry(sizes: Sequence[int]) -> Tuple[SectorSpec, ...]:
    """
    Lay sectors out back to back

    Args:
        sizes: sector sizes in bytes

    Returns:
        tuple of SectorSpec

    Raises:
        FlashError: empty geometry or a size that is not a power of two
    """
    if not sizes:
        raise FlashError("flash geometry needs at least one sector")
    sectors = []
    offset = 0
    for index, size in enumerate(sizes):
        if size <= 0 or size & (size - 1):
            raise FlashError(f"sector {index} size {size} is not a power of two")
        sectors.append(SectorSpec(index, offset, size))
        offset += size
    return tuple(sectors)


class FlashDevice:
    """
    Sectored NOR flash backed by a numpy byte array

    Attributes:
        sectors: sector layout
        cells: raw cell contents (uint8)
        reserved_sector: sector kept erased for defragmentation (maintained by
            the filesystem; re-derived at mount)
        partial_erase: when set, a crash during erase leaves the first half of
            the sector erased and the rest untouched
        steps: number of program/erase steps performed so far
    """

    def __init__(
        self,
        sector_sizes: Sequence[int],
        cells: Optional[Union[bytes, np.ndarray]] = None,
        partial_erase: bool = False,
    ):
        self.sectors = build_geometry(sector_sizes)
        self.size = self.sectors[-1].end
        if cells is None:
            self.cells = np.full(self.size, ERASED_BYTE, dtype=np.uint8)
        else:
            array = np.frombuffer(bytes(cells), dtype=np.uint8) if not isinstance(cells, np.ndarray) else cells
            if array.size != self.size:
                raise FlashError(f"image is {array.size} bytes, geometry needs {self.size}")
            self.cells = array.astype(np.uint8, copy=True)
        self.reserved_sector: Optional[int] = None
        self.partial_erase = partial_erase
        self.steps = 0
        self._budget: Optional[int] = None

    # =============================================================================
    # CONSTRUCTION HELPERS
    # =============================================================================
    @classmethod
    def from_kib(cls, sizes_kib: Sequence[int], **kwargs) -> "FlashDevice":
        return cls([size * KIB for size in sizes_kib], **kwargs)

    @classmethod
    def from_bytes(cls, sector_sizes: Sequence[int], image: bytes) -> "FlashDevice":
        return cls(sector_sizes, cells=image)

    @classmethod
    def load(cls, path: Union[str, Path], sector_sizes: Sequence[int]) -> "FlashDevice":
        """Load a raw snapshot (exact cell bytes)"""
        return cls(sector_sizes, cells=Path(path).read_bytes())

    def save(self, path: Union[str, Path]) -> None:
        """Store a raw snapshot (exact cell bytes)"""
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        return self.cells.tobytes()

    def copy(self) -> "FlashDevice":
        clone = FlashDevice([s.size for s in self.sectors], cells=self.cells, partial_erase=self.partial_erase)
        clone.reserved_sector = self.reserved_sector
        return clone

    @property
    def sector_sizes(self) -> List[int]:
        return [s.size for s in self.sectors]

    # =============================================================================
    # FAULT INJECTION
    # =============================================================================
    def fail_after(self, steps: Optional[int]) -> None:
        """
        Arm a crash: ``steps`` more steps succeed, the next one raises PowerLoss

        Args:
            steps: remaining step budget, None disarms
        """
        self._budget = steps

    def _step(self) -> None:
        if self._budget is not None:
            if self._budget <= 0:
                raise PowerLoss(steps=self.steps)
            self._budget -= 1
        self.steps += 1

    def flip_bit(self, address: int, bit: int) -> None:
        """Corrupt one cell bit, bypassing program semantics"""
        self.cells[address] ^= np.uint8(1 << bit)

    # =============================================================================
    # GEOMETRY QUERIES
    # =============================================================================
    def is_erased(self, sector: int, start: Optional[int] = None) -> bool:
        """True when the sector (optionally from ``start`` on) is all 0xFF"""
        spec = self.sectors[sector]
        begin = spec.offset if start is None else start
        return bool(np.all(self.cells[begin:spec.end] == ERASED_BYTE))

    # =============================================================================
    # CELL OPERATIONS
    # =============================================================================
    def read(self, address: int, length: int) -> bytes:
        if address < 0 or address + length > self.size:
            raise FlashError(f"read 0x{address:X}+{length} outside device")
        return self.cells[address:address + length].tobytes()

    def program(self, address: int, data: bytes) -> None:
        """
        Program bytes; each byte is one step

        Raises:
            ProgramError: some bit would go from 0 to 1
            PowerLoss: fault budget exhausted (earlier bytes stay programmed)
        """
        length = len(data)
        if address < 0 or address + length > self.size:
            raise FlashError(f"program 0x{address:X}+{length} outside device")
        new = np.frombuffer(bytes(data), dtype=np.uint8)
        old = self.cells[address:address + length]
        rising = np.nonzero(new & ~old)[0]
        if rising.size:
            index = int(rising[0])
            raise ProgramError(address=address + index, old=int(old[index]), new=int(new[index]))

        if self._budget is None:
            self.cells[address:address + length] = new
            self.steps += length
            return
        for index in range(length):
            self._step()
            self.cells[address + index] = new[index]

    def erase(self, sector: int) -> None:
        """Erase one sector (one step)"""
        spec = self.sectors[sector]
        try:
            self._step()
        except PowerLoss:
            if self.partial_erase:
                half = spec.offset + spec.size // 2
                self.cells[spec.offset:half] = ERASED_BYTE
            raise
        self.cells[spec.offset:spec.end] = ERASED_BYTE
