# app/models/jca.py

"""
Pydantic models for parsed Java Card Assembly packages
"""
from enum import Enum
from typing import Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

PRIMITIVE_TYPES = ("void", "boolean", "byte", "short", "int")
REFERENCE = "reference"

Operand = Union[int, str]


class Accessor(str, Enum):
    PUBLIC = "public"
    PROTECTED = "protected"
    PRIVATE = "private"
    PACKAGE = "package"


class CpKind(str, Enum):
    """Constant-pool entry kinds; values are the JCA keywords"""
    CLASSREF = "classRef"
    INSTANCE_FIELDREF = "instanceFieldRef"
    VIRTUAL_METHODREF = "virtualMethodRef"
    SUPER_METHODREF = "superMethodRef"
    STATIC_FIELDREF = "staticFieldRef"
    STATIC_METHODREF = "staticMethodRef"

    @property
    def cap_tag(self) -> int:
        return list(CpKind).index(self) + 1

    @property
    def is_field(self) -> bool:
        return self in (CpKind.INSTANCE_FIELDREF, CpKind.STATIC_FIELDREF)

    @property
    def is_method(self) -> bool:
        return self in (CpKind.VIRTUAL_METHODREF, CpKind.SUPER_METHODREF, CpKind.STATIC_METHODREF)

    @property
    def is_static(self) -> bool:
        return self in (CpKind.STATIC_FIELDREF, CpKind.STATIC_METHODREF)


# =============================================================================
# TYPES AND SIGNATURES
# =============================================================================
class ClassRef(BaseModel):
    """A class named inside the package, or an (import token, class token) pair"""
    model_config = ConfigDict(frozen=True)

    name: Optional[str] = None
    package_token: Optional[int] = Field(default=None, ge=0, le=127)
    class_token: Optional[int] = Field(default=None, ge=0, le=255)

    @property
    def external(self) -> bool:
        return self.package_token is not None

    def __str__(self) -> str:
        return f"{self.package_token}.{self.class_token}" if self.external else str(self.name)


class TypeRef(BaseModel):
    """Java Card type: primitive or class reference, optionally one array level"""
    model_config = ConfigDict(frozen=True)

    base: str
    class_ref: Optional[ClassRef] = None
    array: bool = False

    @field_validator("base")
    def validate_base(cls, v):
        if v not in PRIMITIVE_TYPES and v != REFERENCE:
            raise ValueError(f"unknown type {v!r}")
        return v

    @classmethod
    def primitive(cls, name: str, array: bool = False) -> "TypeRef":
        return cls(base=name, array=array)

    @classmethod
    def of_class(cls, ref: ClassRef, array: bool = False) -> "TypeRef":
        return cls(base=REFERENCE, class_ref=ref, array=array)

    @property
    def is_void(self) -> bool:
        return self.base == "void" and not self.array

    @property
    def is_reference(self) -> bool:
        return self.array or self.base == REFERENCE

    @property
    def words(self) -> int:
        """Stack words occupied by a value of this type"""
        if self.is_void:
            return 0
        if self.base == "int" and not self.array:
            return 2
        return 1

    def __str__(self) -> str:
        name = str(self.class_ref) if self.base == REFERENCE else self.base
        return name + ("[]" if self.array else "")


class Parameter(BaseModel):
    model_config = ConfigDict(frozen=True)

    type: TypeRef
    name: Optional[str] = None


class MethodSignature(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: Tuple[Parameter, ...] = ()
    returns: TypeRef

    @property
    def param_types(self) -> Tuple[TypeRef, ...]:
        return tuple(p.type for p in self.params)

    @property
    def param_words(self) -> int:
        return sum(p.type.words for p in self.params)

    def __str__(self) -> str:
        return f"{self.returns}({', '.join(str(t) for t in self.param_types)})"


class MethodKey(BaseModel):
    """Method identity inside a class: name plus parameter types"""
    model_config = ConfigDict(frozen=True)

    name: str
    params: Tuple[TypeRef, ...] = ()

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(t) for t in self.params)})"


# =============================================================================
# PACKAGE STRUCTURE
# =============================================================================
class ImportEntry(BaseModel):
    aid: bytes
    major: int = Field(..., ge=0, le=255)
    minor: int = Field(..., ge=0, le=255)


class AppletDecl(BaseModel):
    aid: bytes
    class_name: str


class CpEntry(BaseModel):
    """
    Constant-pool entry

    ``member`` is the member name for internal entries and the member token
    for external ones; class references leave it unset.
    """
    kind: CpKind
    class_ref: ClassRef
    member: Optional[Operand] = None
    field_type: Optional[TypeRef] = None
    method_signature: Optional[MethodSignature] = None

    @property
    def internal(self) -> bool:
        return not self.class_ref.external


class Instruction(BaseModel):
    labels: List[str] = Field(default_factory=list)
    mnemonic: str
    operands: List[Operand] = Field(default_factory=list)


class ExceptionHandler(BaseModel):
    start: str
    end: str
    handler: str
    catch_type: int = Field(..., ge=0, le=0xFFFF)  # constant-pool index, 0 catches everything


class MethodTable(BaseModel):
    base: int = Field(..., ge=0, le=255)
    entries: List[MethodKey] = Field(default_factory=list)


class InterfaceImpl(BaseModel):
    interface: ClassRef
    methods: List[MethodKey] = Field(default_factory=list)


class JcaField(BaseModel):
    name: str
    type: TypeRef
    access: Accessor = Accessor.PACKAGE
    static: bool = False
    final: bool = False
    token: int = Field(..., ge=0, le=255)
    initial: Optional[Union[int, List[int]]] = None

    @property
    def is_constant(self) -> bool:
        """static final primitive with an initializer: folded by the compiler, no storage"""
        return self.static and self.final and not self.type.is_reference and isinstance(self.initial, int)


class JcaMethod(BaseModel):
    name: str
    access: Accessor = Accessor.PACKAGE
    static: bool = False
    final: bool = False
    abstract: bool = False
    native: bool = False
    signature: MethodSignature
    token: int = Field(..., ge=0, le=255)
    max_stack: int = Field(default=0, ge=0, le=255)
    max_locals: int = Field(default=0, ge=0, le=255)
    nargs: int = Field(default=0, ge=0, le=255)
    body: Optional[List[Instruction]] = None
    handlers: List[ExceptionHandler] = Field(default_factory=list)

    @property
    def key(self) -> MethodKey:
        return MethodKey(name=self.name, params=self.signature.param_types)

    @property
    def is_constructor(self) -> bool:
        return self.name == "<init>"

    @property
    def is_virtual(self) -> bool:
        return not self.static and not self.is_constructor and self.access is not Accessor.PRIVATE

    @property
    def has_body(self) -> bool:
        return self.body is not None


class JcaClass(BaseModel):
    name: str
    token: int = Field(..., ge=0, le=255)
    access: Accessor = Accessor.PACKAGE
    abstract: bool = False
    final: bool = False
    interface: bool = False
    extends: List[ClassRef] = Field(default_factory=list)
    implements: List[ClassRef] = Field(default_factory=list)
    shareable_interfaces: List[ClassRef] = Field(default_factory=list)
    remote_interfaces: List[ClassRef] = Field(default_factory=list)
    fields: List[JcaField] = Field(default_factory=list)
    public_method_table: Optional[MethodTable] = None
    package_method_table: Optional[MethodTable] = None
    interface_impls: List[InterfaceImpl] = Field(default_factory=list)
    methods: List[JcaMethod] = Field(default_factory=list)

    @property
    def superclass(self) -> Optional[ClassRef]:
        return None if self.interface or not self.extends else self.extends[0]

    @property
    def is_public(self) -> bool:
        return self.access is Accessor.PUBLIC

    @property
    def is_shareable(self) -> bool:
        return bool(self.shareable_interfaces)

    def find_method(self, key: MethodKey) -> Optional[JcaMethod]:
        for method in self.methods:
            if method.key == key:
                return method
        return None

    def methods_named(self, name: str) -> List[JcaMethod]:
        return [m for m in self.methods if m.name == name]

    def find_field(self, name: str) -> Optional[JcaField]:
        for fld in self.fields:
            if fld.name == name:
                return fld
        return None

    @property
    def instance_fields(self) -> List[JcaField]:
        return [f for f in self.fields if not f.static]

    @property
    def static_fields(self) -> List[JcaField]:
        return [f for f in self.fields if f.static]


class JcaPackage(BaseModel):
    """One parsed JCA file"""
    name: str
    aid: bytes
    major: int = Field(..., ge=0, le=255)
    minor: int = Field(..., ge=0, le=255)
    imports: List[ImportEntry] = Field(default_factory=list)
    applets: List[AppletDecl] = Field(default_factory=list)
    constant_pool: List[CpEntry] = Field(default_factory=list)
    classes: List[JcaClass] = Field(default_factory=list)

    @field_validator("aid")
    def validate_aid(cls, v):
        if not 5 <= len(v) <= 16:
            raise ValueError(f"AID length {len(v)} outside 5..16")
        return v

    def find_class(self, name: str) -> Optional[JcaClass]:
        for cls_ in self.classes:
            if cls_.name == name:
                return cls_
        return None

    def resolve(self, ref: ClassRef) -> Optional[JcaClass]:
        return None if ref.external else self.find_class(ref.name)

    @property
    def emission_order(self) -> List[JcaClass]:
        """Interfaces first, then classes, each in declaration order"""
        return [c for c in self.classes if c.interface] + [c for c in self.classes if not c.interface]

    def iter_methods(self) -> Iterator[Tuple[JcaClass, JcaMethod]]:
        for cls_ in self.classes:
            for method in cls_.methods:
                yield cls_, method

    @property
    def native_methods(self) -> List[Tuple[JcaClass, JcaMethod]]:
        return [(c, m) for c, m in self.iter_methods() if m.native]

    @property
    def uses_impdep(self) -> bool:
        if self.native_methods:
            return True
        return any(
            ins.mnemonic in ("impdep1", "impdep2")
            for _, m in self.iter_methods()
            for ins in (m.body or [])
        )
