# app/models/memory.py

"""
Pydantic models for the build configuration (flash geometry, package ids,
entry point)
"""
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.flash_device import KIB, STM32F401RE_SECTORS_KIB, SectorSpec, build_geometry

STM32_BASE_ADDRESS = 0x08000000
STM32_TARGET_SECTOR = 5
MAX_PACKAGES = 256


class PackageSpec(BaseModel):
    """One package of the build, in package-id order"""
    name: str = Field(..., min_length=1, description="Dotted package name")
    native_only: bool = Field(default=False, description="Package is allowed to carry impdep stubs")

    @field_validator("name")
    def validate_name(cls, v):
        parts = v.strip().split(".")
        if any(not part for part in parts):
            raise ValueError(f"invalid package name {v!r}")
        return ".".join(parts)


class EntryPointConfig(BaseModel):
    """Startup method named by package, class and method (names or raw tokens)"""
    model_config = ConfigDict(populate_by_name=True)

    package: Union[int, str] = Field(..., description="Package name or package id")
    class_name: Union[int, str] = Field(..., alias="class", description="Class name or class token")
    method: Union[int, str] = Field(..., description="Method name or method token")


class MemoryConfig(BaseModel):
    """
    Build configuration

    Every key defaults to the STM32F401RE setup: eight sectors of
    16/16/16/16/64/128/128/128 KiB and the image placed in sector 5.
    """
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    sectors: List[int] = Field(default=list(STM32F401RE_SECTORS_KIB), description="Sector sizes in KiB")
    target_sector: int = Field(default=STM32_TARGET_SECTOR, ge=0, description="Sector receiving the image")
    packages: List[PackageSpec] = Field(default_factory=list, description="Packages in package-id order")
    entry_point: Optional[EntryPointConfig] = Field(default=None, description="Startup method")
    bitmap_min: int = Field(default=8, ge=1, le=32, description="Minimum package bitmap length in bytes")
    base_address: int = Field(default=STM32_BASE_ADDRESS, ge=0, le=0xFFFFFFFF, description="Absolute flash address")
    pop_receiver: bool = Field(default=False, description="Instance natives pop their receiver")

    @field_validator("sectors")
    def validate_sectors(cls, v):
        if not v:
            raise ValueError("at least one sector is required")
        for size in v:
            if size <= 0 or size & (size - 1):
                raise ValueError(f"sector size {size} KiB is not a power of two")
        return v

    @field_validator("packages", mode="before")
    def coerce_packages(cls, v):
        if v is None:
            return []
        return [{"name": item} if isinstance(item, str) else item for item in v]

    @field_validator("base_address", mode="before")
    def parse_base_address(cls, v):
        if isinstance(v, str):
            return int(v, 0)
        return v

    @model_validator(mode="after")
    def validate_layout(self):
        if self.target_sector >= len(self.sectors):
            raise ValueError(f"target_sector {self.target_sector} outside {len(self.sectors)} sectors")
        if len(self.sectors) < 2:
            raise ValueError("a reserved sector needs at least two sectors")
        if len(self.packages) > MAX_PACKAGES:
            raise ValueError(f"{len(self.packages)} packages exceed the {MAX_PACKAGES} package ids")
        names = [p.name for p in self.packages]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate packages: {', '.join(duplicates)}")
        return self

    # =============================================================================
    # DERIVED VIEWS
    # =============================================================================
    @property
    def sector_sizes(self) -> List[int]:
        return [size * KIB for size in self.sectors]

    @property
    def geometry(self) -> tuple:
        return build_geometry(self.sector_sizes)

    @property
    def target(self) -> SectorSpec:
        return self.geometry[self.target_sector]

    @property
    def package_names(self) -> List[str]:
        return [p.name for p in self.packages]

    def package_ids(self) -> Dict[str, int]:
        return {p.name: index for index, p in enumerate(self.packages)}

    def is_native_only(self, name: str) -> bool:
        return any(p.name == name and p.native_only for p in self.packages)

    def with_packages(self, names: List[str]) -> "MemoryConfig":
        """Copy with the package list replaced (native_only flags kept by name)"""
        flags = {p.name: p.native_only for p in self.packages}
        packages = [PackageSpec(name=n, native_only=flags.get(n, False)) for n in names]
        return self.model_copy(update={"packages": packages})
