# app/services/cap_builder.py

"""
CAP component construction

Components are produced in dependency order: StaticField, Import and Method
straight from the JCA model, then the Class layout (the ConstantPool needs
class offsets), ConstantPool, Export, Descriptor, ReferenceLocation, Applet,
Header, and the Directory last once every size is known.

Method is encoded before the ConstantPool with raw constant-pool indices; the
ConstantPool then resolves internal static references against the finished
Method and StaticField offsets, which breaks the Method/ConstantPool cycle.
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import structlog

from app.config import settings
from app.core.exceptions import BuildError, ConfigError, UnresolvedLabel
from app.models.cap import (
    CAP_MAGIC,
    CAP_MAJOR,
    CAP_MINOR,
    CapFile,
    ComponentBinary,
    ComponentKind,
    Relocation,
    StaticFieldValue,
)
from app.models.jca import (
    Accessor,
    ClassRef,
    CpEntry,
    CpKind,
    JcaClass,
    JcaField,
    JcaMethod,
    JcaPackage,
    MethodKey,
    MethodSignature,
    TypeRef,
)
from app.models.natives import NativeMethodTable
from app.services.bytecode_assembler import assemble_method, inject_native_stub
from app.services.image_serializer import FieldTypeCode
from app.services.instruction_set import InstructionSet, get_instruction_set

logger = structlog.get_logger()

# Java Card API packages in the order they must be built
REFERENCE_API_ORDER = (
    "java.lang",
    "java.io",
    "java.rmi",
    "javacard.framework",
    "javacard.framework.service",
    "javacard.security",
    "javacardx.crypto",
    "javacardx.biometry",
    "javacardx.external",
    "javacardx.biometry1toN",
    "javacardx.security",
    "javacardx.framework.util",
    "javacardx.framework.math",
    "javacardx.framework.tlv",
    "javacardx.framework.string",
    "javacardx.apdu",
    "javacardx.apdu.util",
)

# Header flags
ACC_INT = 0x01
ACC_EXPORT = 0x02
ACC_APPLET = 0x04

# Class component flag nibble
CLASS_INTERFACE = 0x8
CLASS_SHAREABLE = 0x4
CLASS_REMOTE = 0x2

# Method header flag nibble
METHOD_EXTENDED = 0x8
METHOD_ABSTRACT = 0x4

# Descriptor access flags
DESC_PUBLIC = 0x01
DESC_PRIVATE = 0x02
DESC_PROTECTED = 0x04
DESC_STATIC = 0x08
DESC_FINAL = 0x10
DESC_NATIVE = 0x20
DESC_ABSTRACT = 0x40
DESC_INIT = 0x80
DESC_CLASS_INTERFACE = 0x40
DESC_CLASS_ABSTRACT = 0x80

NO_SUPERCLASS = 0xFFFF
EXTERNAL_METHOD = 0xFFFF
NO_TYPE = 0xFFFF
NO_REFERENCE_TOKEN = 0xFF
CONSTANT_FIELD_REF = b"\x00\xff\xff"
DIRECTORY_SIZE = 2 * len(ComponentKind) + 6 + 3

ACCESS_FLAGS = {
    Accessor.PUBLIC: DESC_PUBLIC,
    Accessor.PRIVATE: DESC_PRIVATE,
    Accessor.PROTECTED: DESC_PROTECTED,
    Accessor.PACKAGE: 0,
}
ARRAY_INIT_TYPES = {"boolean": 2, "byte": 3, "short": 4, "int": 5}
PRIMITIVE_WIDTHS = {"boolean": 1, "byte": 1, "short": 2, "int": 4}
TYPE_NIBBLES = {"void": 0x1, "boolean": 0x2, "byte": 0x3, "short": 0x4, "int": 0x5, "reference": 0x6}
ARRAY_NIBBLES = {"boolean": 0xA, "byte": 0xB, "short": 0xC, "int": 0xD, "reference": 0xE}

INSTALL_KEY = MethodKey(
    name="install",
    params=(TypeRef.primitive("byte", array=True), TypeRef.primitive("short"), TypeRef.primitive("byte")),
)
NOT_INT_PREFIXES = ("if", "invoke", "instanceof", "impdep")


def _pack(component: str, fmt: str, *values: int) -> bytes:
    try:
        return struct.pack(">" + fmt, *values)
    except struct.error as exc:
        raise BuildError(component=component, dependency=f"value {values} does not fit '{fmt}'") from exc


def _delta_encode(offsets: Sequence[int]) -> bytes:
    """Offsets as byte gaps from the previous one; gaps of 255 or more are split into 255 steps"""
    out = bytearray()
    previous = 0
    for offset in sorted(offsets):
        gap = offset - previous
        while gap >= 255:
            out.append(255)
            gap -= 255
        out.append(gap)
        previous = offset
    return bytes(out)


def _field_width(fld: JcaField) -> int:
    return 2 if fld.type.is_reference else PRIMITIVE_WIDTHS[fld.type.base]


def _encode_value(base: str, value: int, where: str) -> bytes:
    width = PRIMITIVE_WIDTHS[base]
    low, high = -(1 << (8 * width - 1)), (1 << (8 * width)) - 1
    if not low <= value <= high:
        raise BuildError(component="StaticField", dependency=f"initial value {value} of {where} does not fit {base}")
    return (value & ((1 << (8 * width)) - 1)).to_bytes(width, "big")


def _uses_int(package: JcaPackage) -> bool:
    types: List[TypeRef] = []
    for cls_ in package.classes:
        types += [f.type for f in cls_.fields]
        for method in cls_.methods:
            types += list(method.signature.param_types) + [method.signature.returns]
    for entry in package.constant_pool:
        if entry.field_type is not None:
            types.append(entry.field_type)
        if entry.method_signature is not None:
            types += list(entry.method_signature.param_types) + [entry.method_signature.returns]
    if any(t.base == "int" for t in types):
        return True
    for _, method in package.iter_methods():
        for ins in method.body or []:
            name = ins.mnemonic
            if name == "s2i" or (name.startswith("i") and not name.startswith(NOT_INT_PREFIXES)):
                return True
    return False


@dataclass(frozen=True)
class _MethodInfo:
    offset: int
    bytecode_count: int
    handler_count: int
    handler_index: int


class _TypePool:
    """Deduplicated type descriptors; offsets count from the start of type_descriptor_info"""

    def __init__(self, base: int):
        self.offsets: Dict[Tuple[int, ...], int] = {}
        self.encoded = bytearray()
        self.base = base

    def add(self, nibbles: List[int]) -> int:
        key = tuple(nibbles)
        if key not in self.offsets:
            self.offsets[key] = self.base + len(self.encoded)
            padded = list(key) + [0] * (len(key) % 2)
            self.encoded.append(len(key))
            self.encoded += bytes((padded[i] << 4) | padded[i + 1] for i in range(0, len(padded), 2))
        return self.offsets[key]


class CapBuilder:
    """
    Builds the components of one package

    Args:
        package: validated package model
        natives: registry shared by every package of the build
        isa: instruction table, process default when omitted
    """

    def __init__(self, package: JcaPackage, natives: NativeMethodTable, isa: Optional[InstructionSet] = None):
        self.pkg = package
        self.natives = natives
        self.isa = isa or get_instruction_set()
        self.classes = package.emission_order
        self.components: Dict[ComponentKind, bytes] = {}
        self.static_offsets: Dict[Tuple[str, str], int] = {}
        self.static_values: List[StaticFieldValue] = []
        self.array_init_count = 0
        self.array_init_size = 0
        self.image_size = 0
        self.class_offsets: Dict[str, int] = {}
        self.methods: Dict[Tuple[str, MethodKey], _MethodInfo] = {}
        self.relocations: List[Relocation] = []
        self.has_native_stubs = False

    # =============================================================================
    # LOOKUPS
    # =============================================================================
    def _superchain(self, cls_: JcaClass) -> Iterator[JcaClass]:
        """``cls_`` and its superclasses, stopping at the first external one"""
        seen = set()
        current: Optional[JcaClass] = cls_
        while current is not None and current.name not in seen:
            seen.add(current.name)
            yield current
            parent = current.superclass
            current = None if parent is None else self.pkg.resolve(parent)

    def _has_external_ancestor(self, cls_: JcaClass) -> bool:
        last = list(self._superchain(cls_))[-1]
        return last.superclass is not None and last.superclass.external

    def _find_method(self, cls_: JcaClass, key: MethodKey) -> Optional[Tuple[JcaClass, JcaMethod]]:
        for owner in self._superchain(cls_):
            method = owner.find_method(key)
            if method is not None:
                return owner, method
        return None

    def _find_field(self, cls_: JcaClass, name: str) -> Optional[Tuple[JcaClass, JcaField]]:
        for owner in self._superchain(cls_):
            fld = owner.find_field(name)
            if fld is not None:
                return owner, fld
        return None

    def _internal_class(self, ref: ClassRef, component: str) -> JcaClass:
        cls_ = self.pkg.resolve(ref)
        if cls_ is None:
            raise BuildError(component=component, dependency=f"class {ref} is not declared in {self.pkg.name}")
        return cls_

    def _class_ref(self, ref: ClassRef, component: str) -> bytes:
        if ref.external:
            return bytes([0x80 | ref.package_token, ref.class_token])
        if ref.name not in self.class_offsets:
            raise BuildError(component=component, dependency=f"class {ref.name} is not declared in {self.pkg.name}")
        return _pack(component, "H", self.class_offsets[ref.name])

    def _method_offset(self, owner: JcaClass, method: JcaMethod, component: str) -> int:
        info = self.methods.get((owner.name, method.key))
        if info is None:
            raise BuildError(component=component, dependency=f"method {owner.name}.{method.key} has no Method offset")
        return info.offset

    def _resolve_cp_method(self, index: int, entry: CpEntry) -> Tuple[JcaClass, JcaMethod]:
        cls_ = self._internal_class(entry.class_ref, "ConstantPool")
        for owner in self._superchain(cls_):
            if entry.method_signature is not None:
                method = owner.find_method(MethodKey(name=entry.member, params=entry.method_signature.param_types))
                if method is not None:
                    return owner, method
                continue
            named = owner.methods_named(entry.member)
            if len(named) > 1:
                raise BuildError(component="ConstantPool", dependency=f"entry {index}: {owner.name}.{entry.member} is ambiguous")
            if named:
                return owner, named[0]
        raise BuildError(component="ConstantPool", dependency=f"entry {index}: method {cls_.name}.{entry.member} not found")

    def _resolve_cp_field(self, index: int, entry: CpEntry) -> Tuple[JcaClass, JcaField]:
        cls_ = self._internal_class(entry.class_ref, "ConstantPool")
        found = self._find_field(cls_, entry.member)
        if found is None:
            raise BuildError(component="ConstantPool", dependency=f"entry {index}: field {cls_.name}.{entry.member} not found")
        return found

    # =============================================================================
    # STATIC FIELD
    # =============================================================================
    def _build_static_field(self) -> bytes:
        statics = [(c, f) for c in self.classes for f in c.static_fields if not f.is_constant]
        arrays = [(c, f) for c, f in statics if f.type.array and f.type.base in ARRAY_INIT_TYPES and isinstance(f.initial, list)]
        in_arrays = {id(f) for _, f in arrays}
        references = [(c, f) for c, f in statics if f.type.is_reference and id(f) not in in_arrays]
        primitives = [(c, f) for c, f in statics if not f.type.is_reference]
        defaults = [(c, f) for c, f in primitives if not f.initial]
        non_defaults = [(c, f) for c, f in primitives if f.initial]

        image_order = arrays + references + defaults + non_defaults
        offset = 0
        for cls_, fld in image_order:
            self.static_offsets[(cls_.name, fld.name)] = offset
            offset += _field_width(fld)
        self.image_size = offset

        out = bytearray()
        out += _pack("StaticField", "HH", self.image_size, len(arrays) + len(references))
        out += _pack("StaticField", "H", len(arrays))
        array_values: Dict[int, bytes] = {}
        for cls_, fld in arrays:
            where = f"{cls_.name}.{fld.name}"
            values = b"".join(_encode_value(fld.type.base, v, where) for v in fld.initial)
            array_values[id(fld)] = values
            out += _pack("StaticField", "BH", ARRAY_INIT_TYPES[fld.type.base], len(values)) + values
            self.array_init_size += len(values)
        self.array_init_count = len(arrays)

        scalar_values = {
            id(f): _encode_value(f.type.base, f.initial, f"{c.name}.{f.name}") for c, f in non_defaults
        }
        non_default_bytes = b"".join(scalar_values[id(f)] for _, f in non_defaults)
        out += _pack("StaticField", "HH", sum(_field_width(f) for _, f in defaults), len(non_default_bytes))
        out += non_default_bytes

        for field_no, (cls_, fld) in enumerate(image_order):
            value = array_values.get(id(fld), scalar_values.get(id(fld)))
            if value is None:
                continue
            if field_no > 0xFF:
                raise BuildError(component="StaticField", dependency=f"field number {field_no} of {cls_.name}.{fld.name} exceeds 255")
            self.static_values.append(
                StaticFieldValue(
                    field_no=field_no,
                    type_code=int(FieldTypeCode.for_type(fld.type)),
                    value=value,
                    class_name=cls_.name,
                    field_name=fld.name,
                )
            )
        return bytes(out)

    # =============================================================================
    # IMPORT
    # =============================================================================
    def _build_import(self) -> bytes:
        out = bytearray(_pack("Import", "B", len(self.pkg.imports)))
        for imp in self.pkg.imports:
            out += bytes([imp.minor, imp.major, len(imp.aid)]) + imp.aid
        return bytes(out)

    # =============================================================================
    # METHOD
    # =============================================================================
    def _method_body(self, cls_: JcaClass, method: JcaMethod) -> Tuple[list, int, int]:
        """(instructions, max_stack, max_locals) as emitted"""
        if method.abstract:
            return [], 0, 0
        if method.native:
            index = self.natives.index_of(self.pkg.name, cls_.name, method.name, method.signature.param_types)
            if index is None:
                raise BuildError(component="Method", dependency=f"native {cls_.name}.{method.name} has no dispatch index")
            self.has_native_stubs = True
            return inject_native_stub(method, index), max(1, method.signature.returns.words), 0
        return method.body, method.max_stack, method.max_locals

    def _method_header(self, method: JcaMethod, max_stack: int, max_locals: int) -> bytes:
        flags = METHOD_ABSTRACT if method.abstract else 0
        if max(max_stack, method.nargs, max_locals) > 0x0F:
            return bytes([(flags | METHOD_EXTENDED) << 4, max_stack, method.nargs, max_locals])
        return bytes([(flags << 4) | max_stack, (method.nargs << 4) | max_locals])

    def _build_method(self) -> bytes:
        emitted = [(c, m) for c in self.classes if not c.interface for m in c.methods]
        handler_count = sum(len(m.handlers) for _, m in emitted)
        if handler_count > 0xFF:
            raise BuildError(component="Method", dependency=f"{handler_count} exception handlers exceed 255")

        handlers = bytearray()
        methods = bytearray()
        offset = 1 + 8 * handler_count
        handler_index = 0
        for cls_, method in emitted:
            body, max_stack, max_locals = self._method_body(cls_, method)
            header = self._method_header(method, max_stack, max_locals)
            assembled = assemble_method(body, self.isa)
            code_start = offset + len(header)

            for position, width, cp_index in assembled.relocations:
                self.relocations.append(Relocation(offset=code_start + position, width=width, cp_index=cp_index))
            for i, handler in enumerate(method.handlers):
                for label in (handler.start, handler.end, handler.handler):
                    if label not in assembled.label_offsets:
                        raise UnresolvedLabel(label=label)
                start = assembled.label_offsets[handler.start]
                length = assembled.label_offsets[handler.end] - start
                if length <= 0:
                    raise BuildError(component="Method", dependency=f"{cls_.name}.{method.name}: empty handler range")
                nested = i + 1 < len(method.handlers) and (
                    assembled.label_offsets[method.handlers[i + 1].start] <= start
                    and assembled.label_offsets[method.handlers[i + 1].end] >= start + length
                )
                handlers += _pack(
                    "Method",
                    "HHHH",
                    code_start + start,
                    (0 if nested else 0x8000) | length,
                    code_start + assembled.label_offsets[handler.handler],
                    handler.catch_type,
                )

            self.methods[(cls_.name, method.key)] = _MethodInfo(
                offset=offset,
                bytecode_count=len(assembled.code),
                handler_count=len(method.handlers),
                handler_index=handler_index if method.handlers else 0,
            )
            handler_index += len(method.handlers)
            methods += header + assembled.code
            offset += len(header) + len(assembled.code)

        body = bytes([handler_count]) + bytes(handlers) + bytes(methods)
        if len(body) > 0xFFFF:
            raise BuildError(component="Method", dependency=f"{len(body)} bytes exceed the 65535-byte component")
        return body

    # =============================================================================
    # CLASS
    # =============================================================================
    def _virtual_token(self, cls_: JcaClass, key: MethodKey) -> int:
        found = self._find_method(cls_, key)
        if found is not None:
            return found[1].token
        for table in (cls_.public_method_table, cls_.package_method_table):
            if table is not None and key in table.entries:
                return table.base + table.entries.index(key)
        raise BuildError(component="Class", dependency=f"{cls_.name} does not implement {key}")

    def _interface_table(self, cls_: JcaClass) -> List[Tuple[ClassRef, List[int]]]:
        """Explicit implemented-interface tables, plus derived ones for internal interfaces"""
        table = [(impl.interface, [self._virtual_token(cls_, k) for k in impl.methods]) for impl in cls_.interface_impls]
        covered = {str(impl.interface) for impl in cls_.interface_impls}
        for ref in cls_.implements:
            if str(ref) in covered:
                continue
            if ref.external:
                table.append((ref, []))
                continue
            iface = self._internal_class(ref, "Class")
            table.append((ref, [self._virtual_token(cls_, m.key) for m in iface.methods]))
        return table

    def _vtable(self, cls_: JcaClass, table) -> List[int]:
        if table is None:
            return []
        offsets = []
        for key in table.entries:
            found = self._find_method(cls_, key)
            if found is not None:
                offsets.append(self._method_offset(found[0], found[1], "Class"))
            elif self._has_external_ancestor(cls_):
                offsets.append(EXTERNAL_METHOD)
            else:
                raise BuildError(component="Class", dependency=f"{cls_.name} method table names unknown {key}")
        return offsets

    def _encode_class(self, cls_: JcaClass) -> bytes:
        if cls_.interface:
            flags = CLASS_INTERFACE
            flags |= CLASS_SHAREABLE if cls_.is_shareable else 0
            flags |= CLASS_REMOTE if cls_.remote_interfaces else 0
            if len(cls_.extends) > 0x0F:
                raise BuildError(component="Class", dependency=f"{cls_.name} extends more than 15 interfaces")
            out = bytearray([(flags << 4) | len(cls_.extends)])
            for ref in cls_.extends:
                out += self._class_ref(ref, "Class")
            if flags & CLASS_REMOTE:
                name = cls_.name.encode("ascii")
                out += bytes([len(name)]) + name
            return bytes(out)

        interfaces = self._interface_table(cls_)
        if len(interfaces) > 0x0F:
            raise BuildError(component="Class", dependency=f"{cls_.name} implements more than 15 interfaces")
        flags = CLASS_SHAREABLE if cls_.is_shareable else 0
        out = bytearray([(flags << 4) | len(interfaces)])
        parent = cls_.superclass
        out += self._class_ref(parent, "Class") if parent is not None else _pack("Class", "H", NO_SUPERCLASS)

        instance = cls_.instance_fields
        references = [f for f in instance if f.type.is_reference]
        size = sum(f.type.words for f in instance)
        first_reference = min((f.token for f in references), default=NO_REFERENCE_TOKEN)
        out += _pack("Class", "BBB", size, first_reference, len(references))

        public = self._vtable(cls_, cls_.public_method_table)
        package = self._vtable(cls_, cls_.package_method_table)
        public_base = cls_.public_method_table.base if cls_.public_method_table else 0
        package_base = cls_.package_method_table.base if cls_.package_method_table else 0
        out += _pack("Class", "BBBB", public_base, len(public), package_base, len(package))
        out += b"".join(_pack("Class", "H", o) for o in public + package)

        for ref, tokens in interfaces:
            out += self._class_ref(ref, "Class") + _pack("Class", "B", len(tokens)) + bytes(tokens)
        return bytes(out)

    def _build_class(self) -> bytes:
        # sizes do not depend on offsets, so a placeholder pass yields the layout
        self.class_offsets = {c.name: 0 for c in self.classes}
        offset = 2
        for cls_ in self.classes:
            size = len(self._encode_class(cls_))
            self.class_offsets[cls_.name] = offset
            offset += size
        return _pack("Class", "H", 0) + b"".join(self._encode_class(c) for c in self.classes)

    # =============================================================================
    # CONSTANT POOL
    # =============================================================================
    def _encode_cp_entry(self, index: int, entry: CpEntry) -> bytes:
        tag = bytes([entry.kind.cap_tag])
        ref = entry.class_ref
        if entry.kind is CpKind.CLASSREF:
            return tag + self._class_ref(ref, "ConstantPool") + b"\x00"

        if not entry.kind.is_static:
            if ref.external:
                token = entry.member
            elif entry.kind.is_field:
                owner, fld = self._resolve_cp_field(index, entry)
                token = fld.token
            else:
                owner, method = self._resolve_cp_method(index, entry)
                token = method.token
            return tag + self._class_ref(ref, "ConstantPool") + _pack("ConstantPool", "B", token)

        if ref.external:
            return tag + bytes([0x80 | ref.package_token, ref.class_token]) + _pack("ConstantPool", "B", entry.member)
        if entry.kind is CpKind.STATIC_FIELDREF:
            owner, fld = self._resolve_cp_field(index, entry)
            if fld.is_constant:
                raise BuildError(
                    component="ConstantPool", dependency=f"entry {index}: {owner.name}.{fld.name} is a compile-time constant"
                )
            offset = self.static_offsets[(owner.name, fld.name)]
        else:
            owner, method = self._resolve_cp_method(index, entry)
            offset = self._method_offset(owner, method, "ConstantPool")
        return tag + b"\x00" + _pack("ConstantPool", "H", offset)

    def _build_constant_pool(self) -> bytes:
        pool = self.pkg.constant_pool
        return _pack("ConstantPool", "H", len(pool)) + b"".join(
            self._encode_cp_entry(i, e) for i, e in enumerate(pool)
        )

    # =============================================================================
    # EXPORT
    # =============================================================================
    def _exports(self) -> bool:
        if not any(c.is_public for c in self.classes):
            return False
        return not self.pkg.applets or any(c.interface and c.is_shareable for c in self.classes)

    def _build_export(self) -> bytes:
        public = sorted((c for c in self.classes if c.is_public), key=lambda c: c.token)
        exported = (Accessor.PUBLIC, Accessor.PROTECTED)
        out = bytearray(_pack("Export", "B", len(public)))
        for cls_ in public:
            fields = [f for f in cls_.static_fields if f.access in exported and not f.is_constant]
            methods = [m for m in cls_.methods if m.access in exported and (m.static or m.is_constructor)]
            out += _pack("Export", "HBB", self.class_offsets[cls_.name], len(fields), len(methods))
            out += b"".join(_pack("Export", "H", self.static_offsets[(cls_.name, f.name)]) for f in fields)
            out += b"".join(_pack("Export", "H", self._method_offset(cls_, m, "Export")) for m in methods)
        return bytes(out)

    # =============================================================================
    # DESCRIPTOR
    # =============================================================================
    def _type_nibbles(self, t: TypeRef) -> List[int]:
        nibbles = [ARRAY_NIBBLES[t.base] if t.array else TYPE_NIBBLES[t.base]]
        if t.class_ref is not None:
            ref = self._class_ref(t.class_ref, "Descriptor")
            nibbles += [ref[0] >> 4, ref[0] & 0x0F, ref[1] >> 4, ref[1] & 0x0F]
        return nibbles

    def _signature_nibbles(self, signature: MethodSignature) -> List[int]:
        nibbles: List[int] = []
        for t in signature.param_types:
            nibbles += self._type_nibbles(t)
        return nibbles + self._type_nibbles(signature.returns)

    def _cp_type(self, pool: _TypePool, index: int, entry: CpEntry) -> int:
        if entry.kind is CpKind.CLASSREF:
            return NO_TYPE
        if entry.kind.is_field:
            field_type = entry.field_type
            if field_type is None and entry.internal:
                field_type = self._resolve_cp_field(index, entry)[1].type
            return NO_TYPE if field_type is None else pool.add(self._type_nibbles(field_type))
        signature = entry.method_signature
        if signature is None and entry.internal:
            signature = self._resolve_cp_method(index, entry)[1].signature
        return NO_TYPE if signature is None else pool.add(self._signature_nibbles(signature))

    def _field_descriptor(self, pool: _TypePool, cls_: JcaClass, fld: JcaField) -> bytes:
        access = ACCESS_FLAGS[fld.access] | (DESC_STATIC if fld.static else 0) | (DESC_FINAL if fld.final else 0)
        if fld.is_constant:
            field_ref = CONSTANT_FIELD_REF
        elif fld.static:
            field_ref = b"\x00" + _pack("Descriptor", "H", self.static_offsets[(cls_.name, fld.name)])
        else:
            field_ref = self._class_ref(ClassRef(name=cls_.name), "Descriptor") + bytes([fld.token])
        if fld.type.is_reference:
            type_value = pool.add(self._type_nibbles(fld.type))
        else:
            type_value = 0x8000 | TYPE_NIBBLES[fld.type.base]
        return bytes([fld.token, access]) + field_ref + _pack("Descriptor", "H", type_value)

    def _method_descriptor(self, pool: _TypePool, cls_: JcaClass, method: JcaMethod) -> bytes:
        access = ACCESS_FLAGS[method.access]
        access |= DESC_STATIC if method.static else 0
        access |= DESC_FINAL if method.final else 0
        access |= DESC_NATIVE if method.native else 0
        access |= DESC_ABSTRACT if method.abstract or cls_.interface else 0
        access |= DESC_INIT if method.is_constructor else 0
        info = self.methods.get((cls_.name, method.key), _MethodInfo(0, 0, 0, 0))
        type_offset = pool.add(self._signature_nibbles(method.signature))
        return bytes([method.token, access]) + _pack(
            "Descriptor", "HHHHH", info.offset, type_offset, info.bytecode_count, info.handler_count, info.handler_index
        )

    def _class_descriptor(self, pool: _TypePool, cls_: JcaClass) -> bytes:
        access = DESC_PUBLIC if cls_.is_public else 0
        access |= DESC_FINAL if cls_.final else 0
        access |= DESC_CLASS_INTERFACE | DESC_CLASS_ABSTRACT if cls_.interface else 0
        access |= DESC_CLASS_ABSTRACT if cls_.abstract else 0
        interfaces = cls_.extends if cls_.interface else cls_.implements
        out = bytearray([cls_.token, access])
        out += self._class_ref(ClassRef(name=cls_.name), "Descriptor")
        out += _pack("Descriptor", "BHH", len(interfaces), len(cls_.fields), len(cls_.methods))
        for ref in interfaces:
            out += self._class_ref(ref, "Descriptor")
        for fld in cls_.fields:
            out += self._field_descriptor(pool, cls_, fld)
        for method in cls_.methods:
            out += self._method_descriptor(pool, cls_, method)
        return bytes(out)

    def _build_descriptor(self) -> bytes:
        cp = self.pkg.constant_pool
        pool = _TypePool(base=2 + 2 * len(cp))
        cp_types = [self._cp_type(pool, i, e) for i, e in enumerate(cp)]
        classes = [self._class_descriptor(pool, c) for c in self.classes]
        out = bytearray(_pack("Descriptor", "B", len(classes)))
        out += b"".join(classes)
        out += _pack("Descriptor", "H", len(cp))
        out += b"".join(_pack("Descriptor", "H", t) for t in cp_types)
        out += pool.encoded
        return bytes(out)

    # =============================================================================
    # REFERENCE LOCATION, APPLET, HEADER, DIRECTORY
    # =============================================================================
    def _build_reference_location(self) -> bytes:
        one = _delta_encode([r.offset for r in self.relocations if r.width == 1])
        two = _delta_encode([r.offset for r in self.relocations if r.width == 2])
        return _pack("RefLocation", "H", len(one)) + one + _pack("RefLocation", "H", len(two)) + two

    def _build_applet(self) -> bytes:
        out = bytearray(_pack("Applet", "B", len(self.pkg.applets)))
        for applet in self.pkg.applets:
            cls_ = self.pkg.find_class(applet.class_name)
            method = cls_.find_method(INSTALL_KEY) if cls_ is not None else None
            if method is None or not method.static:
                raise BuildError(
                    component="Applet", dependency=f"{applet.class_name} has no static install(byte[], short, byte)"
                )
            out += bytes([len(applet.aid)]) + applet.aid
            out += _pack("Applet", "H", self._method_offset(cls_, method, "Applet"))
        return bytes(out)

    def _build_header(self) -> bytes:
        flags = ACC_INT if _uses_int(self.pkg) else 0
        flags |= ACC_EXPORT if ComponentKind.EXPORT in self.components else 0
        flags |= ACC_APPLET if ComponentKind.APPLET in self.components else 0
        name = self.pkg.name.replace(".", "/").encode("ascii")
        out = _pack("Header", "IBBB", CAP_MAGIC, CAP_MINOR, CAP_MAJOR, flags)
        out += bytes([self.pkg.minor, self.pkg.major, len(self.pkg.aid)]) + self.pkg.aid
        return out + _pack("Header", "B", len(name)) + name

    def _build_directory(self) -> bytes:
        sizes = [len(self.components.get(kind, b"")) for kind in ComponentKind]
        sizes[ComponentKind.DIRECTORY - 1] = DIRECTORY_SIZE
        out = b"".join(_pack("Directory", "H", s) for s in sizes)
        out += _pack("Directory", "HHH", self.image_size, self.array_init_count, self.array_init_size)
        out += _pack("Directory", "BBB", len(self.pkg.imports), len(self.pkg.applets), 0)
        return out

    # =============================================================================
    # DRIVER
    # =============================================================================
    def build(self) -> CapFile:
        self.components[ComponentKind.STATIC_FIELD] = self._build_static_field()
        self.components[ComponentKind.IMPORT] = self._build_import()
        self.components[ComponentKind.METHOD] = self._build_method()
        self.components[ComponentKind.CLASS] = self._build_class()
        self.components[ComponentKind.CONSTANT_POOL] = self._build_constant_pool()
        if self._exports():
            self.components[ComponentKind.EXPORT] = self._build_export()
        self.components[ComponentKind.DESCRIPTOR] = self._build_descriptor()
        self.components[ComponentKind.REFERENCE_LOCATION] = self._build_reference_location()
        if self.pkg.applets:
            self.components[ComponentKind.APPLET] = self._build_applet()
        self.components[ComponentKind.HEADER] = self._build_header()
        self.components[ComponentKind.DIRECTORY] = self._build_directory()

        for kind, body in self.components.items():
            if len(body) > 0xFFFF:
                raise BuildError(component=kind.file_name, dependency=f"{len(body)} bytes exceed the u2 size field")

        return CapFile(
            package_name=self.pkg.name,
            package_aid=self.pkg.aid,
            package_version=(self.pkg.major, self.pkg.minor),
            components={kind: ComponentBinary(kind, body) for kind, body in self.components.items()},
            method_offsets={(c, str(k)): info.offset for (c, k), info in self.methods.items()},
            static_values=self.static_values,
            relocations=sorted(self.relocations, key=lambda r: r.offset),
            has_native_stubs=self.has_native_stubs,
            uses_impdep=self.pkg.uses_impdep,
        )


def build_cap(package: JcaPackage, natives: NativeMethodTable, isa: Optional[InstructionSet] = None) -> CapFile:
    """
    Build every CAP component of one package

    Args:
        package: validated package model
        natives: native registry; every native method of ``package`` must be in it
        isa: instruction table, process default when omitted

    Returns:
        CapFile

    Raises:
        BuildError: names the component whose dependency could not be resolved
    """
    cap = CapBuilder(package, natives, isa).build()
    logger.info(
        "CAP built",
        package=package.name,
        components=len(cap.components),
        size=cap.total_size,
        native_stubs=cap.has_native_stubs,
    )
    return cap


def build_caps(
    packages: Sequence[JcaPackage],
    natives: NativeMethodTable,
    workers: Optional[int] = None,
    isa: Optional[InstructionSet] = None,
) -> List[CapFile]:
    """Build packages, optionally on a thread pool; results keep the input order"""
    isa = isa or get_instruction_set()
    workers = workers or settings.BUILD_WORKERS
    if workers <= 1 or len(packages) < 2:
        return [build_cap(p, natives, isa) for p in packages]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: build_cap(p, natives, isa), packages))


def _api_rank(package: JcaPackage) -> Tuple[int, str]:
    if package.name in REFERENCE_API_ORDER:
        return REFERENCE_API_ORDER.index(package.name), package.name
    return len(REFERENCE_API_ORDER), package.name


def build_order(packages: Sequence[JcaPackage]) -> List[JcaPackage]:
    """
    Topological order over imports; ties follow the Java Card API order, then the name

    Raises:
        ConfigError: the imports form a cycle
    """
    by_aid = {p.aid: p for p in packages}
    depends = {
        p.name: {by_aid[i.aid].name for i in p.imports if i.aid in by_aid} - {p.name} for p in packages
    }
    pending = {p.name: p for p in packages}
    placed: List[JcaPackage] = []
    done = set()
    while pending:
        ready = [p for name, p in pending.items() if depends[name] <= done]
        if not ready:
            raise ConfigError(path="<packages>", reason=f"import cycle among {', '.join(sorted(pending))}")
        chosen = min(ready, key=_api_rank)
        placed.append(chosen)
        done.add(chosen.name)
        del pending[chosen.name]
    return placed


def check_order(packages: Sequence[JcaPackage], path: str = "<config>") -> None:
    """
    Raises:
        ConfigError: a package imports a corpus package listed after it
    """
    position = {p.aid: i for i, p in enumerate(packages)}
    for i, package in enumerate(packages):
        for imp in package.imports:
            j = position.get(imp.aid)
            if j is not None and j > i:
                raise ConfigError(
                    path=path, reason=f"package {package.name} imports {packages[j].name}, which is listed after it"
                )
