# app/services/jca_printer.py

"""
Canonical JCA pretty-printer

Every default the parser would fill in (tokens, .nargs) is written out, so
the printed text parses back into an equal JcaPackage.
"""
from typing import List

from app.models.jca import (
    Accessor,
    ClassRef,
    CpEntry,
    Instruction,
    JcaClass,
    JcaField,
    JcaMethod,
    JcaPackage,
    MethodKey,
    Parameter,
)

INDENT = "    "


def format_aid(aid: bytes) -> str:
    return ":".join(f"0x{b:02X}" for b in aid)


def _access(access: Accessor) -> List[str]:
    return [] if access is Accessor.PACKAGE else [access.value]


def _key(key: MethodKey) -> str:
    return f"{key.name}({', '.join(str(t) for t in key.params)})"


def _param(param: Parameter) -> str:
    return f"{param.type} {param.name}" if param.name else str(param.type)


def _cp_entry(entry: CpEntry) -> str:
    target = str(entry.class_ref)
    if entry.member is not None:
        target += f".{entry.member}"
    line = f"{entry.kind.value} {target}"
    if entry.field_type is not None:
        line += f" : {entry.field_type}"
    elif entry.method_signature is not None:
        line += f" : {entry.method_signature}"
    return line + ";"


def _field(fld: JcaField) -> str:
    words = _access(fld.access)
    if fld.static:
        words.append("static")
    if fld.final:
        words.append("final")
    words += [str(fld.type), fld.name, str(fld.token)]
    line = " ".join(words)
    if isinstance(fld.initial, list):
        line += " = {" + ", ".join(str(v) for v in fld.initial) + "}"
    elif fld.initial is not None:
        line += f" = {fld.initial}"
    return line + ";"


def _instruction(ins: Instruction) -> str:
    prefix = "".join(f"{label}: " for label in ins.labels)
    operands = "".join(f" {value}" for value in ins.operands)
    return f"{prefix}{ins.mnemonic}{operands};"


def _method(method: JcaMethod, depth: int) -> List[str]:
    pad = INDENT * depth
    words = _access(method.access)
    for flag in ("static", "final", "abstract", "native"):
        if getattr(method, flag):
            words.append(flag)
    params = ", ".join(_param(p) for p in method.signature.params)
    head = f"{pad}.method {' '.join(words + [str(method.signature.returns)])} {method.name}({params}) {method.token}"
    if not method.has_body:
        return [head + ";"]
    inner = pad + INDENT
    lines = [
        head + " {",
        f"{inner}.stack {method.max_stack};",
        f"{inner}.locals {method.max_locals};",
        f"{inner}.nargs {method.nargs};",
    ]
    lines += [inner + _instruction(ins) for ins in method.body]
    if method.handlers:
        lines.append(f"{inner}.exceptionTable {{")
        for h in method.handlers:
            lines.append(f"{inner}{INDENT}{h.start} {h.end} {h.handler} {h.catch_type};")
        lines.append(f"{inner}}}")
    lines.append(pad + "}")
    return lines


def _refs(refs: List[ClassRef]) -> str:
    return ", ".join(str(r) for r in refs)


def _class(cls_: JcaClass) -> List[str]:
    pad, inner = INDENT, INDENT * 2
    words = [".interface" if cls_.interface else ".class"] + _access(cls_.access)
    if cls_.abstract and not cls_.interface:
        words.append("abstract")
    if cls_.final:
        words.append("final")
    words += [cls_.name, str(cls_.token)]
    if cls_.extends:
        words += ["extends", _refs(cls_.extends)]
    if cls_.implements:
        words += ["implements", _refs(cls_.implements)]
    lines = [pad + " ".join(words) + " {"]

    for directive, refs in ((".shareable", cls_.shareable_interfaces), (".remote", cls_.remote_interfaces)):
        if refs:
            lines.append(f"{inner}{directive} {{")
            lines += [f"{inner}{INDENT}{r};" for r in refs]
            lines.append(inner + "}")
    if cls_.fields:
        lines.append(inner + ".fields {")
        lines += [inner + INDENT + _field(f) for f in cls_.fields]
        lines.append(inner + "}")
    for directive, table in (
        (".publicMethodTable", cls_.public_method_table),
        (".packageMethodTable", cls_.package_method_table),
    ):
        if table is not None:
            lines.append(f"{inner}{directive} {table.base} {{")
            lines += [f"{inner}{INDENT}{_key(k)};" for k in table.entries]
            lines.append(inner + "}")
    if cls_.interface_impls:
        lines.append(inner + ".implementedInterfaceInfoTable {")
        for impl in cls_.interface_impls:
            lines.append(f"{inner}{INDENT}{impl.interface} {{")
            lines += [f"{inner}{INDENT * 2}{_key(k)};" for k in impl.methods]
            lines.append(f"{inner}{INDENT}}}")
        lines.append(inner + "}")
    for method in cls_.methods:
        lines.append("")
        lines += _method(method, depth=2)
    lines.append(pad + "}")
    return lines


def format_package(package: JcaPackage) -> str:
    """
    Render a package in canonical JCA syntax

    Args:
        package: parsed or built model

    Returns:
        str: JCA text ending with a newline
    """
    pad = INDENT
    lines = [
        f".package {package.name} {{",
        f"{pad}.aid {format_aid(package.aid)};",
        f"{pad}.version {package.major}.{package.minor};",
        "",
        f"{pad}.imports {{",
    ]
    for token, imp in enumerate(package.imports):
        lines.append(f"{pad * 2}{format_aid(imp.aid)} {imp.major}.{imp.minor};  // {token}")
    lines += [pad + "}", "", f"{pad}.applets {{"]
    lines += [f"{pad * 2}{format_aid(a.aid)} {a.class_name};" for a in package.applets]
    lines += [pad + "}", "", f"{pad}.constantPool {{"]
    for index, entry in enumerate(package.constant_pool):
        lines.append(f"{pad * 2}{_cp_entry(entry)}  // {index}")
    lines.append(pad + "}")
    for cls_ in package.classes:
        lines.append("")
        lines += _class(cls_)
    lines.append("}")
    return "\n".join(lines) + "\n"

