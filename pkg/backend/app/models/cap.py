# app/models/cap.py

"""
Built CAP file structures
"""
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Tuple

CAP_MAGIC = 0xDECAFFED
CAP_MAJOR, CAP_MINOR = 2, 2


class ComponentKind(IntEnum):
    """Component tags of the CAP format"""
    HEADER = 1
    DIRECTORY = 2
    APPLET = 3
    IMPORT = 4
    CONSTANT_POOL = 5
    CLASS = 6
    METHOD = 7
    STATIC_FIELD = 8
    REFERENCE_LOCATION = 9
    EXPORT = 10
    DESCRIPTOR = 11
    DEBUG = 12

    @property
    def file_name(self) -> str:
        return COMPONENT_FILE_NAMES[self]


COMPONENT_FILE_NAMES = {
    ComponentKind.HEADER: "Header",
    ComponentKind.DIRECTORY: "Directory",
    ComponentKind.APPLET: "Applet",
    ComponentKind.IMPORT: "Import",
    ComponentKind.CONSTANT_POOL: "ConstantPool",
    ComponentKind.CLASS: "Class",
    ComponentKind.METHOD: "Method",
    ComponentKind.STATIC_FIELD: "StaticField",
    ComponentKind.REFERENCE_LOCATION: "RefLocation",
    ComponentKind.EXPORT: "Export",
    ComponentKind.DESCRIPTOR: "Descriptor",
    ComponentKind.DEBUG: "Debug",
}

# order of components inside archives and image blocks
LOAD_ORDER: Tuple[ComponentKind, ...] = (
    ComponentKind.HEADER,
    ComponentKind.DIRECTORY,
    ComponentKind.IMPORT,
    ComponentKind.APPLET,
    ComponentKind.CLASS,
    ComponentKind.METHOD,
    ComponentKind.STATIC_FIELD,
    ComponentKind.EXPORT,
    ComponentKind.CONSTANT_POOL,
    ComponentKind.REFERENCE_LOCATION,
    ComponentKind.DESCRIPTOR,
)


@dataclass(frozen=True)
class ComponentBinary:
    """One encoded component: u1 tag, u2 size, body"""
    kind: ComponentKind
    body: bytes

    @property
    def tag(self) -> int:
        return int(self.kind)

    @property
    def size(self) -> int:
        return len(self.body)

    def to_bytes(self) -> bytes:
        return bytes([self.tag]) + self.size.to_bytes(2, "big") + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ComponentBinary":
        size = int.from_bytes(raw[1:3], "big")
        if len(raw) != size + 3:
            raise ValueError(f"component tag {raw[0]} declares {size} bytes, has {len(raw) - 3}")
        return cls(ComponentKind(raw[0]), bytes(raw[3:]))


@dataclass(frozen=True)
class StaticFieldValue:
    """Non-default static initial value carried into the flash image"""
    field_no: int
    type_code: int
    value: bytes
    class_name: str = ""
    field_name: str = ""


@dataclass(frozen=True)
class Relocation:
    """Constant-pool operand position inside the Method component body"""
    offset: int
    width: int  # 1 or 2 bytes
    cp_index: int


@dataclass
class CapFile:
    """
    CAP components of one package plus build metadata

    Attributes:
        components: emitted components by kind
        method_offsets: (class, method key text) -> offset in the Method body
        static_values: non-default static initial values for the image
        has_native_stubs: some method body is an impdep stub
    """
    package_name: str
    package_aid: bytes
    package_version: Tuple[int, int]
    components: Dict[ComponentKind, ComponentBinary] = field(default_factory=dict)
    method_offsets: Dict[Tuple[str, str], int] = field(default_factory=dict)
    static_values: List[StaticFieldValue] = field(default_factory=list)
    relocations: List[Relocation] = field(default_factory=list)
    has_native_stubs: bool = False
    uses_impdep: bool = False

    @property
    def bcv_expected(self) -> bool:
        """Packages with impdep bytecodes cannot pass the bytecode verifier"""
        return not self.uses_impdep

    def get(self, kind: ComponentKind) -> Optional[ComponentBinary]:
        return self.components.get(kind)

    def ordered(self) -> List[ComponentBinary]:
        return [self.components[k] for k in LOAD_ORDER if k in self.components]

    def component_sizes(self) -> Dict[str, int]:
        return {c.kind.file_name: c.size for c in self.ordered()}

    @property
    def total_size(self) -> int:
        return sum(c.size + 3 for c in self.ordered())
