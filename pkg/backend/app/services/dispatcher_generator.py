# app/services/dispatcher_generator.py

"""
Native dispatcher generation

Produces the C-syntax ``jni.h`` text the JCVM implementation compiles: the
startup entry point, one extern declaration and one index macro per native
method, and ``callJCNativeMethod``, a switch over the 2-byte index that pops
the Java Card arguments, calls the host function and pushes its result.
"""
import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import orjson
import structlog

from app.config import settings
from app.core.exceptions import ConfigError, NameCollision
from app.models.cap import CapFile
from app.models.jca import JcaPackage, Parameter, TypeRef
from app.models.memory import MemoryConfig
from app.models.natives import EntryPoint, NativeMethod, NativeMethodTable

logger = structlog.get_logger()

INDENT = "  "
RECEIVER_NAME = "self"
# generated locals a declared parameter name must not shadow
RESERVED_NAMES = frozenset({"context", "index", "stack", "heap", "ret", RECEIVER_NAME})

C_TYPES = {"byte": "jbyte_t", "boolean": "jbool_t", "short": "jshort_t", "int": "jint_t"}
STACK_SUFFIXES = {"byte": "Byte", "boolean": "Byte", "short": "Short", "int": "Int"}

JAVA_TYPES_COMMENT = """/**
 * Java types to provide by the JCVM implementation:
 *   - jref_t: for Java Card reference
 *   - jshort_t: for Java Card short value
 *   - jbyte_t: for Java Card byte value
 *   - jbool_t: for Java Card boolean value
 *   - jint_t: for Java Card integer value
 */"""


@dataclass(frozen=True)
class PopOp:
    """``<c_type> <variable> = stack.<operation>();``"""
    variable: str
    c_type: str
    operation: str

    def render(self) -> str:
        return f"{self.c_type} {self.variable} = stack.{self.operation}();"


def c_type(type_ref: TypeRef) -> str:
    if type_ref.is_void:
        return "void"
    if type_ref.is_reference:
        return "jref_t"
    return C_TYPES[type_ref.base]


def _stack_suffix(type_ref: TypeRef) -> str:
    return "Reference" if type_ref.is_reference else STACK_SUFFIXES[type_ref.base]


def push_operation(type_ref: TypeRef) -> Optional[str]:
    """Stack push matching a return type; None for void"""
    return None if type_ref.is_void else f"push_{_stack_suffix(type_ref)}"


def _param_names(params: Sequence[Union[Parameter, TypeRef]]) -> List[str]:
    names = []
    for position, param in enumerate(params):
        name = param.name if isinstance(param, Parameter) else None
        if not name or name in RESERVED_NAMES or name in names:
            name = f"param_{position:02d}"
        names.append(name)
    return names


def pop_sequence(params: Sequence[Union[Parameter, TypeRef]]) -> List[PopOp]:
    """
    Pops for a parameter list, last parameter first

    Args:
        params: declared parameters (names kept) or bare types (named ``param_NN``)

    Returns:
        List[PopOp]: in execution order
    """
    names = _param_names(params)
    types = [p.type if isinstance(p, Parameter) else p for p in params]
    ops = [PopOp(name, c_type(t), f"pop_{_stack_suffix(t)}") for name, t in zip(names, types)]
    return list(reversed(ops))


# =============================================================================
# TEXT GENERATION
# =============================================================================
def _takes_receiver(entry: NativeMethod, pop_receiver: bool) -> bool:
    return pop_receiver and not entry.is_static


def _extern(entry: NativeMethod, pop_receiver: bool) -> str:
    names = _param_names(entry.params)
    args = [f"{c_type(p.type)} {name}" for p, name in zip(entry.params, names)]
    if _takes_receiver(entry, pop_receiver):
        args.insert(0, f"jref_t {RECEIVER_NAME}")
    return f"extern {c_type(entry.return_type)} {entry.function_name}({', '.join(args) or 'void'});"


def _case(entry: NativeMethod, pop_receiver: bool) -> List[str]:
    pad = INDENT * 3
    lines = [f"{INDENT * 2}case {entry.macro_name}: {{"]
    lines += [pad + op.render() for op in pop_sequence(entry.params)]
    args = _param_names(entry.params)
    if _takes_receiver(entry, pop_receiver):
        lines.append(f"{pad}jref_t {RECEIVER_NAME} = stack.pop_Reference();")
        args.insert(0, RECEIVER_NAME)
    call = f"{entry.function_name}({', '.join(args)});"
    push = push_operation(entry.return_type)
    if push is None:
        lines.append(pad + call)
    else:
        lines.append(f"{pad}{c_type(entry.return_type)} ret = {call}")
        lines.append(f"{pad}stack.{push}(ret);")
    lines += [f"{pad}break;", f"{INDENT * 2}}}"]
    return lines


def input_digest(table: NativeMethodTable, entry: EntryPoint, pop_receiver: bool = False) -> str:
    """SHA-256 over the canonical JSON of the generator inputs"""
    payload = {
        "entry_point": entry.model_dump(mode="json"),
        "natives": [e.model_dump(mode="json") for e in table],
        "pop_receiver": pop_receiver,
    }
    return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()


def generate_header(
    table: NativeMethodTable,
    entry: EntryPoint,
    pop_receiver: bool = False,
    version: Optional[str] = None,
) -> str:
    """
    Render the dispatcher header

    Args:
        table: native registry, indices dense from 0
        entry: startup (package, class, method) tokens
        pop_receiver: instance natives also pop and receive ``this``
        version: generator version for the banner

    Returns:
        str: header text ending with a newline

    Raises:
        NameCollision: two entries share a macro or function name
    """
    seen = set()
    for native in table:
        for name in (native.macro_name, native.function_name):
            if name in seen:
                raise NameCollision(name=name)
            seen.add(name)

    version = version or settings.APP_VERSION
    lines = [
        "/*",
        f" * jni.h - native methods of the Java Card VM, generated by {settings.APP_NAME} {version}",
        f" * input sha256: {input_digest(table, entry, pop_receiver)}",
        " * extension: JAVACARD_NATIVE_METHOD_COUNT is the number of native methods",
        " */",
        "#ifndef JCIMAGE_JNI_H",
        "#define JCIMAGE_JNI_H",
        "",
        "/* STARTING METHOD PARAMETERS */",
        f"#define STARTING_JAVACARD_PACKAGE 0x{entry.package_token:02X}",
        f"#define STARTING_JAVACARD_CLASS 0x{entry.class_token:02X}",
        f"#define STARTING_JAVACARD_METHOD 0x{entry.method_token:02X}",
        "",
        JAVA_TYPES_COMMENT,
        "",
        "/* METHOD SIGNATURES TO IMPLEMENT */",
    ]
    lines += [_extern(native, pop_receiver) for native in table]
    lines += ["", "/* NATIVE METHOD INDEXES */"]
    lines += [f"#define {native.macro_name} 0x{native.index:04X}" for native in table]
    lines += [
        "",
        f"#define JAVACARD_NATIVE_METHOD_COUNT {len(table)}",
        "",
        "void callJCNativeMethod(Context& context, jshort_t index) {",
        f"{INDENT}Stack& stack = context.getStack();",
        f"{INDENT}Heap& heap = context.getHeap();",
        f"{INDENT}switch(index) {{",
    ]
    for native in table:
        lines += _case(native, pop_receiver)
    lines += [
        f"{INDENT * 2}default:",
        f"{INDENT * 3}// If the native method index is unknown, a Java Security Exception must be thrown!",
        f"{INDENT * 3}throw SecurityException();",
        f"{INDENT}}}",
        "}",
        "",
        "#endif",
    ]
    return "\n".join(lines) + "\n"


# =============================================================================
# ENTRY POINT
# =============================================================================
def resolve_entry_point(
    packages: Sequence[JcaPackage],
    caps: Sequence[CapFile],
    config: MemoryConfig,
    config_path: str = "<config>",
) -> EntryPoint:
    """
    Resolve the configured startup method to tokens

    Without an ``entry_point`` key the tuple (0, 0, 0) is used.

    Raises:
        ConfigError: names that do not resolve to a static method with a body
    """
    spec = config.entry_point
    if spec is None:
        logger.warning("No entry point configured, using (0, 0, 0)")
        return EntryPoint(package_token=0, class_token=0, method_token=0)

    def fail(reason: str) -> ConfigError:
        return ConfigError(path=config_path, reason=f"entry_point: {reason}")

    ids = config.package_ids()
    if isinstance(spec.package, int):
        names = [n for n, i in ids.items() if i == spec.package]
        if not names:
            raise fail(f"package id {spec.package} is not configured")
        package_name = names[0]
    else:
        package_name = spec.package
        if package_name not in ids:
            raise fail(f"package {package_name} is not configured")
    package = next((p for p in packages if p.name == package_name), None)
    cap = next((c for c in caps if c.package_name == package_name), None)
    if package is None or cap is None:
        raise fail(f"package {package_name} was not built")

    if isinstance(spec.class_name, int):
        cls_ = next((c for c in package.classes if c.token == spec.class_name), None)
    else:
        cls_ = package.find_class(spec.class_name)
    if cls_ is None:
        raise fail(f"class {spec.class_name} not found in {package_name}")

    if isinstance(spec.method, int):
        candidates = [m for m in cls_.methods if m.static and m.token == spec.method]
    else:
        candidates = [m for m in cls_.methods_named(spec.method) if m.static]
    if len(candidates) != 1:
        what = "ambiguous" if candidates else "not a static method"
        raise fail(f"{cls_.name}.{spec.method} is {what}")
    method = candidates[0]
    if (cls_.name, str(method.key)) not in cap.method_offsets or method.abstract:
        raise fail(f"{cls_.name}.{method.name} has no code in the Method component")

    entry = EntryPoint(package_token=ids[package_name], class_token=cls_.token, method_token=method.token)
    logger.debug("Entry point resolved", package=package_name, cls=cls_.name, method=method.name)
    return entry
