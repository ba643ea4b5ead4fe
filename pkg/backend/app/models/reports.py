# app/models/reports.py

"""
Pydantic models for build reports
"""
from typing import Dict, List

from pydantic import BaseModel, Field, model_validator

from app.models.natives import EntryPoint


class PackageReport(BaseModel):
    """Per-package build summary"""
    name: str
    package_id: int = Field(..., ge=0, le=255)
    aid: str = Field(..., description="Package AID, uppercase hex")
    components: Dict[str, int] = Field(default_factory=dict, description="Component body sizes")
    cap_bytes: int = Field(..., ge=0, description="Component files including tag and size bytes")
    native_methods: int = 0
    static_values: int = 0
    bcv_expected: bool = True
    native_only: bool = False

    @model_validator(mode="after")
    def check_total(self):
        expected = sum(size + 3 for size in self.components.values())
        if self.cap_bytes != expected:
            raise ValueError(f"cap_bytes {self.cap_bytes} differs from component total {expected}")
        return self


class BuildReport(BaseModel):
    """Result of one ``build`` run"""
    generator: str
    packages: List[PackageReport] = Field(default_factory=list)
    native_method_count: int = 0
    entry_point: EntryPoint
    target_sector: int
    sector_capacity: int
    image_bytes: int = Field(..., ge=0, description="Target-sector bytes used by the image blocks")
    image_blocks: int = 0
    base_address: int
    files: Dict[str, str] = Field(default_factory=dict, description="Output file -> sha256")
    warnings: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_totals(self):
        natives = sum(p.native_methods for p in self.packages)
        if natives != self.native_method_count:
            raise ValueError(f"native_method_count {self.native_method_count} differs from package total {natives}")
        if self.image_bytes > self.sector_capacity:
            raise ValueError("image exceeds the target sector")
        return self

    @property
    def total_cap_bytes(self) -> int:
        return sum(p.cap_bytes for p in self.packages)
