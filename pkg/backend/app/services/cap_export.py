# app/services/cap_export.py

"""
CAP artifacts on disk: per-component files, the zip archive the bytecode
verifier reads, and the JSON-lines build manifest
"""
import zipfile
from pathlib import Path
from typing import Dict, List, Sequence, Union

import orjson
import structlog

from app.core.exceptions import ArtifactWriteError
from app.models.cap import CapFile, ComponentKind

logger = structlog.get_logger()

# fixed member timestamp keeps archives byte-identical across builds
ZIP_DATE_TIME = (1980, 1, 1, 0, 0, 0)


def package_path(cap: CapFile) -> str:
    return cap.package_name.replace(".", "/")


def component_member(cap: CapFile, kind: ComponentKind) -> str:
    """Archive member name of a component, e.g. ``com/example/javacard/Header.cap``"""
    return f"{package_path(cap)}/javacard/{kind.file_name}.cap"


def export_cap_artifact(cap: CapFile, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write one file per component and a ``<package>.cap`` archive

    Args:
        cap: built package
        out_dir: artifact root

    Returns:
        List[Path]: component files in load order, then the archive

    Raises:
        ArtifactWriteError: file system error, with the offending path
    """
    out_dir = Path(out_dir)
    written: List[Path] = []
    archive = out_dir / f"{cap.package_name}.cap"
    target = archive
    try:
        for component in cap.ordered():
            target = out_dir / component_member(cap, component.kind)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(component.to_bytes())
            written.append(target)

        target = archive
        with zipfile.ZipFile(archive, "w", compression=zipfile.ZIP_STORED) as zf:
            for component in cap.ordered():
                info = zipfile.ZipInfo(component_member(cap, component.kind), date_time=ZIP_DATE_TIME)
                info.external_attr = 0o644 << 16
                zf.writestr(info, component.to_bytes())
        written.append(archive)
    except OSError as exc:
        raise ArtifactWriteError(path=str(target), reason=exc.strerror or str(exc)) from exc

    logger.debug("CAP artifact written", package=cap.package_name, files=len(written))
    return written


def read_cap_archive(path: Union[str, Path]) -> Dict[str, bytes]:
    """Component file name (``Header``, ``Method``...) -> component file bytes"""
    components: Dict[str, bytes] = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if "/javacard/" in name and name.endswith(".cap"):
                components[name.rsplit("/", 1)[-1][: -len(".cap")]] = zf.read(name)
    return components


def manifest_entry(cap: CapFile) -> dict:
    return {
        "package": cap.package_name,
        "aid": cap.package_aid.hex().upper(),
        "components": cap.component_sizes(),
        "bcv_expected": cap.bcv_expected,
    }


def write_manifest(caps: Sequence[CapFile], path: Union[str, Path], append: bool = False) -> Path:
    """
    One JSON line per package: package, aid, component sizes, bcv_expected

    Raises:
        ArtifactWriteError: file system error
    """
    path = Path(path)
    lines = b"".join(orjson.dumps(manifest_entry(cap), option=orjson.OPT_SORT_KEYS) + b"\n" for cap in caps)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("ab" if append else "wb") as fh:
            fh.write(lines)
    except OSError as exc:
        raise ArtifactWriteError(path=str(path), reason=exc.strerror or str(exc)) from exc
    return path
