# app/models/natives.py

"""
Pydantic models for the native method registry and the startup entry point
"""
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.models.jca import Parameter, TypeRef

MAX_NATIVE_INDEX = 0xFFFF


class NativeMethod(BaseModel):
    """One native method and its 2-byte dispatch index"""
    model_config = ConfigDict(frozen=True)

    index: int = Field(..., ge=0, le=MAX_NATIVE_INDEX)
    package: str
    package_id: int = Field(..., ge=0, le=255)
    class_name: str
    class_token: int = Field(default=0, ge=0, le=255)
    method_name: str
    method_token: int = Field(default=0, ge=0, le=255)
    params: Tuple[Parameter, ...] = ()
    return_type: TypeRef
    is_static: bool = False

    @property
    def macro_name(self) -> str:
        return f"{self.class_name.upper()}_{self.method_name.upper()}"

    @property
    def function_name(self) -> str:
        return f"{self.class_name}_{self.method_name}"

    @property
    def param_types(self) -> Tuple[TypeRef, ...]:
        return tuple(p.type for p in self.params)


class NativeMethodTable(BaseModel):
    """Ordered native registry; indices are dense from 0"""
    entries: List[NativeMethod] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def index_of(self, package: str, class_name: str, method_name: str, params: Tuple[TypeRef, ...]) -> Optional[int]:
        for entry in self.entries:
            if (entry.package, entry.class_name, entry.method_name, entry.param_types) == (
                package,
                class_name,
                method_name,
                params,
            ):
                return entry.index
        return None

    def for_package(self, package: str) -> List[NativeMethod]:
        return [e for e in self.entries if e.package == package]

    def macros(self) -> Dict[str, int]:
        return {e.macro_name: e.index for e in self.entries}


class EntryPoint(BaseModel):
    """(package, class, method) tokens of the first method run at startup"""
    model_config = ConfigDict(frozen=True)

    package_token: int = Field(..., ge=0, le=255)
    class_token: int = Field(..., ge=0, le=255)
    method_token: int = Field(..., ge=0, le=255)
