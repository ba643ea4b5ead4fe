# app/services/native_collector.py

"""
Native method registry construction
"""
from typing import Mapping, Optional, Sequence

import structlog

from app.core.exceptions import NameCollision, TooManyNatives
from app.models.jca import JcaPackage
from app.models.natives import MAX_NATIVE_INDEX, NativeMethod, NativeMethodTable

logger = structlog.get_logger()


def collect_native_methods(
    packages: Sequence[JcaPackage],
    package_ids: Optional[Mapping[str, int]] = None,
) -> NativeMethodTable:
    """
    Index every native method in encounter order, starting at 0

    Args:
        packages: packages in configuration order
        package_ids: package name -> id; defaults to the position in ``packages``

    Returns:
        NativeMethodTable

    Raises:
        TooManyNatives: more methods than 2-byte indices
        NameCollision: two methods map to the same dispatch macro
    """
    found = [(pkg, cls_, method) for pkg in packages for cls_, method in pkg.native_methods]
    if len(found) > MAX_NATIVE_INDEX:
        raise TooManyNatives(count=len(found))

    ids = dict(package_ids) if package_ids is not None else {pkg.name: i for i, pkg in enumerate(packages)}
    entries = []
    macros = {}
    for index, (pkg, cls_, method) in enumerate(found):
        entry = NativeMethod(
            index=index,
            package=pkg.name,
            package_id=ids[pkg.name],
            class_name=cls_.name,
            class_token=cls_.token,
            method_name=method.name,
            method_token=method.token,
            params=method.signature.params,
            return_type=method.signature.returns,
            is_static=method.static,
        )
        if entry.macro_name in macros:
            raise NameCollision(name=entry.macro_name)
        macros[entry.macro_name] = index
        entries.append(entry)

    logger.info("Native methods collected", count=len(entries), packages=len(packages))
    return NativeMethodTable(entries=entries)
