# app/services/image_serializer.py

"""
Initial flash image

The Java Card initial state is stored as filesystem blocks in one target
sector. The first tag byte gives the block kind:

    [0x00]                           package table (installed-package bitmap)
    [0x01, package]                  CAP components of one package
    [0x02, package, field]           non-default static field initial value
    [0x03, package, class, field]    applet field (written by the VM at runtime)
"""
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import structlog

from app.core.exceptions import BuildError, CorruptImageError, SectorOverflow, TypeWidthMismatch
from app.core.flash_device import FlashDevice
from app.core.flash_fs import FlashFileSystem, encoded_block_size
from app.models.cap import CapFile
from app.models.jca import TypeRef
from app.models.memory import MemoryConfig

logger = structlog.get_logger()

TAG_PACKAGE_TABLE = 0x00
TAG_CAP = 0x01
TAG_STATIC_FIELD = 0x02
TAG_APPLET_FIELD = 0x03

CAP_INDEX_ENTRY = 5  # u4 offset, u1 component tag

Block = Tuple[bytes, bytes]


class FieldTypeCode(IntEnum):
    """Type byte leading every field block"""
    BYTE = 0
    BOOLEAN = 1
    SHORT = 2
    INT = 3
    OBJECT = 4
    ARRAY_BYTE = (1 << 7) | 0
    ARRAY_BOOLEAN = (1 << 7) | 1
    ARRAY_SHORT = (1 << 7) | 2
    ARRAY_INT = (1 << 7) | 3
    ARRAY_OBJECT = (1 << 7) | 4
    TRANSIENT_ARRAY_BYTE = (1 << 6) | (1 << 7) | 0
    TRANSIENT_ARRAY_BOOLEAN = (1 << 6) | (1 << 7) | 1
    TRANSIENT_ARRAY_SHORT = (1 << 6) | (1 << 7) | 2
    TRANSIENT_ARRAY_INT = (1 << 6) | (1 << 7) | 3
    TRANSIENT_ARRAY_OBJECT = (1 << 6) | (1 << 7) | 4

    @classmethod
    def for_type(cls, type_ref: TypeRef, transient: bool = False) -> "FieldTypeCode":
        base = {"byte": 0, "boolean": 1, "short": 2, "int": 3, "reference": 4}.get(type_ref.base)
        if base is None:
            raise ValueError(f"type {type_ref} has no field type code")
        if transient and not type_ref.array:
            raise ValueError("only arrays can be transient")
        code = base
        if type_ref.array:
            code |= 0x80
            if transient:
                code |= 0x40
        return cls(code)

    @property
    def base(self) -> "FieldTypeCode":
        return FieldTypeCode(self & 0x0F)

    @property
    def is_array(self) -> bool:
        return bool(self & 0x80)

    @property
    def is_transient(self) -> bool:
        return bool(self & 0x40)

    @property
    def value_width(self) -> int:
        """Bytes per value (per element for arrays); objects carry no value bytes"""
        return {0: 1, 1: 1, 2: 2, 3: 4, 4: 0}[self & 0x0F]


def _check_value(type_code: int, value: bytes) -> None:
    try:
        code = FieldTypeCode(type_code)
    except ValueError as exc:
        raise TypeWidthMismatch(type_code=type_code, expected="a known type code", actual=len(value)) from exc
    width = code.value_width
    if code.is_array:
        if width == 0 and value:
            raise TypeWidthMismatch(type_code=type_code, expected="0", actual=len(value))
        if width and len(value) % width:
            raise TypeWidthMismatch(type_code=type_code, expected=f"a multiple of {width}", actual=len(value))
    elif len(value) != width:
        raise TypeWidthMismatch(type_code=type_code, expected=str(width), actual=len(value))


def _byte(value: int, what: str) -> int:
    if not 0 <= value <= 0xFF:
        raise BuildError(component="image", dependency=f"{what} {value} does not fit one byte")
    return value


# =============================================================================
# BLOCK CODECS
# =============================================================================
def encode_package_table(installed: Iterable[int], minimum: int = 8) -> Block:
    """
    Installed-package bitmap, bit i (LSB first) set iff package i is installed

    Args:
        installed: package ids
        minimum: bitmap floor in bytes
    """
    ids = sorted({_byte(i, "package id") for i in installed})
    length = max((ids[-1] + 1 + 7) // 8 if ids else 0, minimum)
    bitmap = bytearray(length)
    for package_id in ids:
        bitmap[package_id // 8] |= 1 << (package_id % 8)
    return bytes([TAG_PACKAGE_TABLE]), bytes(bitmap)


def encode_cap_block(package_id: int, cap: CapFile) -> Block:
    """
    CAP components of one package

    Data layout: u1 count, count x (u4 offset, u1 tag), then the component
    files (tag, size, body) back to back; offsets count from the start of data.
    """
    components = cap.ordered()
    offset = 1 + CAP_INDEX_ENTRY * len(components)
    index = bytearray([len(components)])
    payload = bytearray()
    for component in components:
        index += offset.to_bytes(4, "big") + bytes([component.tag])
        encoded = component.to_bytes()
        payload += encoded
        offset += len(encoded)
    return bytes([TAG_CAP, _byte(package_id, "package id")]), bytes(index + payload)


def decode_cap_block(data: bytes) -> Dict[int, bytes]:
    """
    Inverse of the CAP block layout

    Returns:
        Dict[int, bytes]: component tag -> component file (tag, size, body)

    Raises:
        CorruptImageError: index and contents disagree
    """
    if not data:
        raise CorruptImageError(reason="empty CAP block")
    count = data[0]
    table_end = 1 + CAP_INDEX_ENTRY * count
    if len(data) < table_end:
        raise CorruptImageError(reason=f"CAP block index needs {table_end} bytes, has {len(data)}")
    components: Dict[int, bytes] = {}
    expected = table_end
    for i in range(count):
        entry = data[1 + CAP_INDEX_ENTRY * i: 1 + CAP_INDEX_ENTRY * (i + 1)]
        offset, tag = int.from_bytes(entry[:4], "big"), entry[4]
        if offset != expected or offset + 3 > len(data) or data[offset] != tag:
            raise CorruptImageError(reason=f"component {tag} index entry points to 0x{offset:X}")
        size = int.from_bytes(data[offset + 1: offset + 3], "big")
        end = offset + 3 + size
        if end > len(data):
            raise CorruptImageError(reason=f"component {tag} overruns the CAP block")
        components[tag] = bytes(data[offset:end])
        expected = end
    if expected != len(data):
        raise CorruptImageError(reason=f"{len(data) - expected} trailing bytes in CAP block")
    return components


def encode_static_field(package_id: int, field_no: int, type_code: int, value: bytes) -> Block:
    """
    Raises:
        TypeWidthMismatch: ``value`` does not match the width of ``type_code``
    """
    _check_value(type_code, value)
    tag = bytes([TAG_STATIC_FIELD, _byte(package_id, "package id"), _byte(field_no, "field number")])
    return tag, bytes([type_code]) + bytes(value)


def encode_applet_field(package_id: int, class_no: int, field_no: int, type_code: int, value: bytes) -> Block:
    """Runtime applet-field block; never part of the initial image"""
    _check_value(type_code, value)
    tag = bytes(
        [
            TAG_APPLET_FIELD,
            _byte(package_id, "package id"),
            _byte(class_no, "class number"),
            _byte(field_no, "field number"),
        ]
    )
    return tag, bytes([type_code]) + bytes(value)


# =============================================================================
# IMAGE
# =============================================================================
def image_blocks(caps: Sequence[CapFile], config: MemoryConfig) -> List[Block]:
    """
    Blocks of the initial image in write order: package table, CAP blocks by
    package id, then static field values
    """
    ids = config.package_ids()
    missing = [cap.package_name for cap in caps if cap.package_name not in ids]
    if missing:
        raise BuildError(component="image", dependency=f"packages without an id: {', '.join(missing)}")
    ordered = sorted(caps, key=lambda cap: ids[cap.package_name])

    blocks = [encode_package_table((ids[cap.package_name] for cap in ordered), minimum=config.bitmap_min)]
    blocks += [encode_cap_block(ids[cap.package_name], cap) for cap in ordered]
    for cap in ordered:
        for value in cap.static_values:
            blocks.append(encode_static_field(ids[cap.package_name], value.field_no, value.type_code, value.value))
    return blocks


def estimate_image_size(caps: Sequence[CapFile], config: MemoryConfig, blocks: Optional[List[Block]] = None) -> int:
    """Sector bytes the image occupies, headers and checksums included"""
    blocks = blocks if blocks is not None else image_blocks(caps, config)
    return sum(encoded_block_size(len(tag), len(data)) for tag, data in blocks)


def _reserved_sector(config: MemoryConfig) -> int:
    candidates = [s for s in config.geometry if s.index != config.target_sector]
    return max(candidates, key=lambda s: (s.size, s.index)).index


def build_initial_image(caps: Sequence[CapFile], config: MemoryConfig) -> FlashDevice:
    """
    Fresh device whose target sector holds the committed initial-state blocks

    Raises:
        SectorOverflow: the blocks do not fit the target sector
    """
    blocks = image_blocks(caps, config)
    required = estimate_image_size(caps, config, blocks)
    available = config.target.size
    if required > available:
        raise SectorOverflow(required=required, available=available, sector=config.target_sector)

    device = FlashDevice(config.sector_sizes)
    device.reserved_sector = _reserved_sector(config)
    fs = FlashFileSystem(device)
    for tag, data in blocks:
        fs.write(tag, data, sector=config.target_sector)

    logger.info(
        "Initial image built",
        sector=config.target_sector,
        blocks=len(blocks),
        bytes=required,
        available=available,
    )
    return device
