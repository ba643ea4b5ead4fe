# app/services/pipeline.py

"""
Build pipeline

config + JCA directory -> parsed packages -> native registry -> CAP files ->
jni.h -> initial flash image -> flash.hex, plus CAP artifacts, a manifest
and a JSON build report in the output directory.
"""
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import orjson
import structlog

from app.config import load_memory_config, settings
from app.core.exceptions import ConfigError, MissingPackageError
from app.core.flash_device import FlashDevice
from app.core.flash_fs import mount
from app.core.intel_hex import save_hex
from app.models.cap import CapFile
from app.models.jca import JcaPackage
from app.models.memory import MemoryConfig
from app.models.natives import EntryPoint, NativeMethodTable
from app.models.reports import BuildReport, PackageReport
from app.services.cap_builder import build_caps, build_order, check_order
from app.services.cap_export import export_cap_artifact, write_manifest
from app.services.dispatcher_generator import generate_header, resolve_entry_point
from app.services.image_serializer import estimate_image_size, image_blocks, build_initial_image
from app.services.jca_parser import parse_file
from app.services.native_collector import collect_native_methods

logger = structlog.get_logger()

FLASH_HEX = "flash.hex"
FLASH_BIN = "flash.bin"
JNI_HEADER = "jni.h"
CAP_DIR = "cap"
MANIFEST = "cap/manifest.jsonl"
REPORT = "build_report.json"


@dataclass
class BuildResult:
    """Everything a build produced, in memory"""
    config: MemoryConfig
    packages: List[JcaPackage]
    natives: NativeMethodTable
    caps: List[CapFile]
    entry_point: EntryPoint
    header: str
    device: FlashDevice
    report: BuildReport
    warnings: List[str] = field(default_factory=list)


def discover_packages(jca_dir: Union[str, Path]) -> Dict[str, Tuple[Path, JcaPackage]]:
    """
    Parse every ``*.jca`` file below ``jca_dir``

    Raises:
        ConfigError: the directory is missing or two files declare one package
    """
    jca_dir = Path(jca_dir)
    if not jca_dir.is_dir():
        raise ConfigError(path=str(jca_dir), reason="JCA directory does not exist")
    found: Dict[str, Tuple[Path, JcaPackage]] = {}
    for path in sorted(jca_dir.rglob("*.jca")):
        package = parse_file(path)
        if package.name in found:
            raise ConfigError(
                path=str(path), reason=f"package {package.name} is also declared in {found[package.name][0]}"
            )
        found[package.name] = (path, package)
    return found


def select_packages(
    config: MemoryConfig,
    found: Dict[str, Tuple[Path, JcaPackage]],
    jca_dir: Union[str, Path],
    config_path: str = "<config>",
) -> Tuple[MemoryConfig, List[JcaPackage], List[str]]:
    """
    Packages in package-id order

    The configured list is used as given; without one, every discovered
    package is ordered by its imports and the config is completed with
    that order.

    Raises:
        MissingPackageError: a configured package has no JCA file
        ConfigError: a package is listed before one of its imports
    """
    warnings: List[str] = []
    if config.packages:
        for name in config.package_names:
            if name not in found:
                raise MissingPackageError(package=name, directory=str(jca_dir))
        packages = [found[name][1] for name in config.package_names]
        check_order(packages, config_path)
        for name in sorted(set(found) - set(config.package_names)):
            warnings.append(f"{found[name][0]} declares {name}, which the configuration does not list")
    else:
        packages = build_order([pkg for _, pkg in found.values()])
        config = config.with_packages([p.name for p in packages])
    return config, packages, warnings


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build(
    config: MemoryConfig,
    packages: Sequence[JcaPackage],
    config_path: str = "<config>",
    workers: Optional[int] = None,
) -> Tuple[NativeMethodTable, List[CapFile], EntryPoint, str, FlashDevice, List[str]]:
    """In-memory stages: natives, CAP files, jni.h text, flash image"""
    warnings: List[str] = []
    natives = collect_native_methods(packages, config.package_ids())
    caps = build_caps(packages, natives, workers=workers)
    for cap in caps:
        if cap.uses_impdep and not config.is_native_only(cap.package_name):
            warnings.append(f"package {cap.package_name} uses impdep bytecodes but is not marked native_only")

    entry = resolve_entry_point(packages, caps, config, config_path)
    header = generate_header(natives, entry, pop_receiver=config.pop_receiver)
    device = build_initial_image(caps, config)

    table = mount(device)
    if table.garbage_bytes or table.corrupt_sectors:
        warnings.append(f"image is not garbage-free: {table.garbage_bytes} garbage bytes")
    return natives, caps, entry, header, device, warnings


def run_build(
    config_path: Optional[Union[str, Path]],
    jca_dir: Union[str, Path],
    out_dir: Union[str, Path],
    base_address: Optional[int] = None,
    workers: Optional[int] = None,
) -> BuildResult:
    """
    Full build writing every output file

    Args:
        config_path: MemoryConfig JSON, None for the STM32F401RE defaults
        jca_dir: directory searched recursively for ``*.jca``
        out_dir: output directory (created)
        base_address: overrides the configured flash base address

    Returns:
        BuildResult
    """
    source = str(config_path) if config_path is not None else "<defaults>"
    config = load_memory_config(config_path)
    found = discover_packages(jca_dir)
    config, packages, warnings = select_packages(config, found, jca_dir, source)
    logger.info("Packages selected", count=len(packages), packages=[p.name for p in packages])

    natives, caps, entry, header, device, stage_warnings = build(config, packages, source, workers)
    warnings += stage_warnings
    base = config.base_address if base_address is None else base_address

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    device.save(out_dir / FLASH_BIN)
    written.append(out_dir / FLASH_BIN)
    written.append(save_hex(out_dir / FLASH_HEX, device.to_bytes(), base))
    (out_dir / JNI_HEADER).write_text(header, encoding="utf-8", newline="\n")
    written.append(out_dir / JNI_HEADER)
    for cap in caps:
        written += export_cap_artifact(cap, out_dir / CAP_DIR)
    written.append(write_manifest(caps, out_dir / MANIFEST))

    ids = config.package_ids()
    blocks = image_blocks(caps, config)
    report = BuildReport(
        generator=f"{settings.APP_NAME} {settings.APP_VERSION}",
        packages=[
            PackageReport(
                name=cap.package_name,
                package_id=ids[cap.package_name],
                aid=cap.package_aid.hex().upper(),
                components=cap.component_sizes(),
                cap_bytes=cap.total_size,
                native_methods=len(natives.for_package(cap.package_name)),
                static_values=len(cap.static_values),
                bcv_expected=cap.bcv_expected,
                native_only=config.is_native_only(cap.package_name),
            )
            for cap in caps
        ],
        native_method_count=len(natives),
        entry_point=entry,
        target_sector=config.target_sector,
        sector_capacity=config.target.size,
        image_bytes=estimate_image_size(caps, config, blocks),
        image_blocks=len(blocks),
        base_address=base,
        files={p.relative_to(out_dir).as_posix(): _sha256(p) for p in sorted(written)},
        warnings=warnings,
    )
    (out_dir / REPORT).write_bytes(
        orjson.dumps(report.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n"
    )

    for warning in warnings:
        logger.warning("Build warning", detail=warning)
    logger.info(
        "Build finished",
        out=str(out_dir),
        packages=len(caps),
        natives=len(natives),
        image_bytes=report.image_bytes,
    )
    return BuildResult(
        config=config,
        packages=list(packages),
        natives=natives,
        caps=caps,
        entry_point=entry,
        header=header,
        device=device,
        report=report,
        warnings=warnings,
    )
