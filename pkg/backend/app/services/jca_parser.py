# app/services/jca_parser.py

"""
Recursive-descent parser for Java Card Assembly

The accepted grammar is documented in JCA_GRAMMAR.md. Parsing runs in two
stages: the token stream is turned into draft records, then tokens and
argument counts that the text leaves out are filled in and the result is
validated into a JcaPackage.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import structlog
from pydantic import ValidationError

from app.core.exceptions import LexError, ParseError, SemanticError
from app.models.jca import (
    PRIMITIVE_TYPES,
    Accessor,
    AppletDecl,
    ClassRef,
    CpEntry,
    CpKind,
    ExceptionHandler,
    ImportEntry,
    InterfaceImpl,
    Instruction,
    JcaClass,
    JcaField,
    JcaMethod,
    JcaPackage,
    MethodKey,
    MethodSignature,
    MethodTable,
    Parameter,
    TypeRef,
)
from app.services.instruction_set import CP_KINDS, LABEL_KINDS, REFERENCE_ATYPES, InstructionSet, get_instruction_set
from app.services.jca_lexer import Token, TokenKind, tokenize

logger = structlog.get_logger()

ACCESS_MODIFIERS = {"public": Accessor.PUBLIC, "protected": Accessor.PROTECTED, "private": Accessor.PRIVATE}
CLASS_MODIFIERS = {"public", "abstract", "final"}
FIELD_MODIFIERS = {"public", "protected", "private", "static", "final"}
METHOD_MODIFIERS = {"public", "protected", "private", "static", "final", "abstract", "native"}
CP_KINDS_BY_KEYWORD = {kind.value: kind for kind in CpKind}
BOOLEAN_LITERALS = {"true": 1, "false": 0}


class JcaParser:
    """Parser over one token list; use parse_package() rather than this class directly"""

    def __init__(self, tokens: Sequence[Token], source: str = "<jca>", instruction_set: Optional[InstructionSet] = None):
        self.tokens = list(tokens)
        self.pos = 0
        self.source = source
        self.isa = instruction_set or get_instruction_set()

    # =============================================================================
    # CURSOR HELPERS
    # =============================================================================
    def _peek(self, offset: int = 0) -> Optional[Token]:
        index = self.pos + offset
        return self.tokens[index] if index < len(self.tokens) else None

    def _at(self, kind: TokenKind, value: Union[str, int, None] = None, offset: int = 0) -> bool:
        token = self._peek(offset)
        return token is not None and token.kind is kind and (value is None or token.value == value)

    def _error(self, expected: str) -> ParseError:
        token = self._peek()
        if token is None:
            last = self.tokens[-1] if self.tokens else None
            line = last.line if last else 1
            column = (last.column + len(last.text)) if last else 1
            return ParseError(line=line, column=column, expected=expected, found="end of input", source=self.source)
        return ParseError(line=token.line, column=token.column, expected=expected, found=token.text, source=self.source)

    def _advance(self) -> Token:
        token = self._peek()
        if token is None:
            raise self._error("more input")
        self.pos += 1
        return token

    def _expect(self, kind: TokenKind, value: Union[str, int, None] = None, expected: Optional[str] = None) -> Token:
        if not self._at(kind, value):
            raise self._error(expected or repr(value if value is not None else kind.value))
        return self._advance()

    def _ident(self, expected: str = "identifier") -> str:
        return self._expect(TokenKind.IDENT, expected=expected).value

    def _integer(self, expected: str = "integer") -> int:
        if self._at(TokenKind.DEC) or self._at(TokenKind.HEX):
            return self._advance().value
        raise self._error(expected)

    def _directive_name(self) -> Optional[str]:
        if self._at(TokenKind.DOT) and self._at(TokenKind.IDENT, offset=1):
            return self._peek(1).value
        return None

    def _accept_directive(self, *names: str) -> Optional[str]:
        name = self._directive_name()
        if name in names:
            self.pos += 2
            return name
        return None

    def _expect_directive(self, name: str) -> None:
        if not self._accept_directive(name):
            raise self._error(f".{name}")

    def _semicolon(self) -> None:
        self._expect(TokenKind.SEMICOLON)

    def _semantic(self, reason: str, token: Optional[Token] = None) -> SemanticError:
        where = f"line {token.line}: " if token else ""
        return SemanticError(reason=where + reason, source=self.source)

    # =============================================================================
    # LEXICAL BUILDING BLOCKS
    # =============================================================================
    def _qualified_name(self) -> str:
        parts = [self._ident("package name")]
        while (self._at(TokenKind.DOT) or self._at(TokenKind.SLASH)) and self._at(TokenKind.IDENT, offset=1):
            self.pos += 1
            parts.append(self._ident())
        return ".".join(parts)

    def _aid(self) -> bytes:
        values = [self._aid_byte()]
        if self._at(TokenKind.COLON):
            while self._at(TokenKind.COLON):
                self._advance()
                values.append(self._aid_byte())
        else:
            while self._at(TokenKind.HEX):
                values.append(self._aid_byte())
        return bytes(values)

    def _aid_byte(self) -> int:
        token = self._expect(TokenKind.HEX, expected="AID byte")
        if token.value > 0xFF:
            raise ParseError(
                line=token.line, column=token.column, expected="AID byte 0x00..0xFF", found=token.text, source=self.source
            )
        return token.value

    def _version(self) -> Tuple[int, int]:
        major = self._expect(TokenKind.DEC, expected="major version").value
        self._expect(TokenKind.DOT)
        minor = self._expect(TokenKind.DEC, expected="minor version").value
        return major, minor

    def _class_ref(self) -> ClassRef:
        if self._at(TokenKind.DEC):
            package_token = self._advance().value
            self._expect(TokenKind.DOT)
            class_token = self._expect(TokenKind.DEC, expected="class token").value
            return ClassRef(package_token=package_token, class_token=class_token)
        return ClassRef(name=self._ident("class reference"))

    def _type(self) -> TypeRef:
        if self._at(TokenKind.IDENT) and self._peek().value in PRIMITIVE_TYPES:
            base = self._advance().value
            ref = None
        else:
            base, ref = "reference", self._class_ref()
        array = False
        if self._at(TokenKind.LBRACKET):
            self._advance()
            self._expect(TokenKind.RBRACKET)
            array = True
        if base == "void" and array:
            raise self._error("element type other than void")
        return TypeRef(base=base, class_ref=ref, array=array)

    def _type_list(self) -> List[TypeRef]:
        self._expect(TokenKind.LPAREN)
        types: List[TypeRef] = []
        if not self._at(TokenKind.RPAREN):
            types.append(self._type())
            while self._at(TokenKind.COMMA):
                self._advance()
                types.append(self._type())
        self._expect(TokenKind.RPAREN)
        return types

    def _method_key(self) -> MethodKey:
        name = self._ident("method name")
        return MethodKey(name=name, params=tuple(self._type_list()))

    def _modifiers(self, allowed: Set[str]) -> List[str]:
        found: List[str] = []
        while self._at(TokenKind.IDENT) and self._peek().value in allowed:
            token = self._advance()
            if token.value in found:
                raise self._semantic(f"repeated modifier {token.value}", token)
            found.append(token.value)
        return found

    def _accessor(self, modifiers: List[str], token: Optional[Token]) -> Accessor:
        access = [ACCESS_MODIFIERS[m] for m in modifiers if m in ACCESS_MODIFIERS]
        if len(access) > 1:
            raise self._semantic("conflicting access modifiers", token)
        return access[0] if access else Accessor.PACKAGE

    def _block(self, item) -> list:
        """'{' item* '}'"""
        self._expect(TokenKind.LBRACE)
        items = []
        while not self._at(TokenKind.RBRACE):
            if self._peek() is None:
                raise self._error("'}'")
            items.append(item())
        self._advance()
        return items

    # =============================================================================
    # PACKAGE
    # =============================================================================
    def parse(self) -> JcaPackage:
        try:
            package = self._parse()
        except ValidationError as exc:
            raise SemanticError(reason=_first_error(exc), source=self.source) from exc
        validate_package(package, self.source, self.isa)
        return package

    def _parse(self) -> JcaPackage:
        self._expect_directive("package")
        name = self._qualified_name()
        self._expect(TokenKind.LBRACE)
        aid: Optional[bytes] = None
        version: Optional[Tuple[int, int]] = None
        imports: List[ImportEntry] = []
        applets: List[AppletDecl] = []
        constant_pool: List[CpEntry] = []
        drafts: List[dict] = []

        while not self._at(TokenKind.RBRACE):
            start = self._peek()
            if self._accept_directive("aid"):
                aid = self._aid()
                self._semicolon()
            elif self._accept_directive("version"):
                version = self._version()
                self._semicolon()
            elif self._accept_directive("imports"):
                imports.extend(self._block(self._import_entry))
            elif self._accept_directive("applet", "applets"):
                applets.extend(self._block(self._applet_decl))
            elif self._accept_directive("constantPool"):
                constant_pool.extend(self._block(self._cp_entry))
            elif self._accept_directive("constant"):
                self._expect(TokenKind.IDENT, "pool", expected="'pool'")
                constant_pool.extend(self._block(self._cp_entry))
            elif self._directive_name() in ("class", "interface"):
                drafts.append(self._class_decl(position=len(drafts)))
            elif start is None:
                raise self._error("'}'")
            else:
                raise self._error("package section")
        closing = self._advance()
        if self._peek() is not None:
            raise self._error("end of input")
        if aid is None:
            raise ParseError(line=closing.line, column=closing.column, expected=".aid", found="}", source=self.source)
        if version is None:
            raise ParseError(line=closing.line, column=closing.column, expected=".version", found="}", source=self.source)

        return JcaPackage(
            name=name,
            aid=aid,
            major=version[0],
            minor=version[1],
            imports=imports,
            applets=applets,
            constant_pool=constant_pool,
            classes=[self._finish_class(draft) for draft in drafts],
        )

    def _import_entry(self) -> ImportEntry:
        aid = self._aid()
        major, minor = self._version()
        self._semicolon()
        return ImportEntry(aid=aid, major=major, minor=minor)

    def _applet_decl(self) -> AppletDecl:
        aid = self._aid()
        class_name = self._ident("applet class name")
        self._semicolon()
        return AppletDecl(aid=aid, class_name=class_name)

    def _cp_entry(self) -> CpEntry:
        keyword = self._expect(TokenKind.IDENT, expected="constant-pool entry kind")
        kind = CP_KINDS_BY_KEYWORD.get(keyword.value)
        if kind is None:
            self.pos -= 1
            raise self._error("constant-pool entry kind")

        member: Optional[Union[int, str]] = None
        if self._at(TokenKind.DEC):
            package_token = self._advance().value
            self._expect(TokenKind.DOT)
            class_token = self._expect(TokenKind.DEC, expected="class token").value
            class_ref = ClassRef(package_token=package_token, class_token=class_token)
            if self._at(TokenKind.DOT):
                self._advance()
                member = self._expect(TokenKind.DEC, expected="member token").value
        else:
            class_ref = ClassRef(name=self._ident("class name"))
            if self._at(TokenKind.DOT):
                self._advance()
                member = self._ident("member name")

        if kind is CpKind.CLASSREF and member is not None:
            raise self._semantic("classRef entries name no member", keyword)
        if kind is not CpKind.CLASSREF and member is None:
            raise self._semantic(f"{kind.value} entry needs a member", keyword)

        field_type = method_signature = None
        if self._at(TokenKind.COLON):
            self._advance()
            declared = self._type()
            if self._at(TokenKind.LPAREN):
                params = tuple(Parameter(type=t) for t in self._type_list())
                method_signature = MethodSignature(params=params, returns=declared)
            else:
                field_type = declared
        if kind.is_field and method_signature is not None:
            raise self._semantic(f"{kind.value} entry has a method signature", keyword)
        if kind.is_method and field_type is not None:
            raise self._semantic(f"{kind.value} entry has a field type", keyword)
        if kind is CpKind.CLASSREF and (field_type or method_signature):
            raise self._semantic("classRef entries carry no signature", keyword)
        self._semicolon()
        return CpEntry(
            kind=kind, class_ref=class_ref, member=member, field_type=field_type, method_signature=method_signature
        )

    # =============================================================================
    # CLASSES
    # =============================================================================
    def _class_decl(self, position: int) -> dict:
        keyword = self._peek(1)
        self.pos += 2
        interface = keyword.value == "interface"
        modifiers = self._modifiers(CLASS_MODIFIERS)
        name_token = self._expect(TokenKind.IDENT, expected="class name")
        token = self._advance().value if self._at(TokenKind.DEC) else None

        extends: List[ClassRef] = []
        implements: List[ClassRef] = []
        if self._at(TokenKind.IDENT, "extends"):
            self._advance()
            extends = self._class_ref_list()
        if self._at(TokenKind.IDENT, "implements"):
            self._advance()
            implements = self._class_ref_list()
        if not interface and len(extends) > 1:
            raise self._semantic(f"class {name_token.value} extends more than one class", name_token)
        if interface and implements:
            raise self._semantic(f"interface {name_token.value} cannot implement", name_token)
        if "final" in modifiers and ("abstract" in modifiers or interface):
            raise self._semantic(f"class {name_token.value} is both final and abstract", name_token)

        draft = {
            "name": name_token.value,
            "line_token": name_token,
            "token": position if token is None else token,
            "access": Accessor.PUBLIC if "public" in modifiers else Accessor.PACKAGE,
            "abstract": "abstract" in modifiers or interface,
            "final": "final" in modifiers,
            "interface": interface,
            "extends": extends,
            "implements": implements,
            "shareable_interfaces": [],
            "remote_interfaces": [],
            "fields": [],
            "public_method_table": None,
            "package_method_table": None,
            "interface_impls": [],
            "methods": [],
        }

        self._expect(TokenKind.LBRACE)
        while not self._at(TokenKind.RBRACE):
            if self._accept_directive("shareable"):
                draft["shareable_interfaces"].extend(self._block(self._class_ref_item))
            elif self._accept_directive("remote"):
                draft["remote_interfaces"].extend(self._block(self._class_ref_item))
            elif self._accept_directive("fields"):
                draft["fields"].extend(self._block(self._field_decl))
            elif self._accept_directive("publicMethodTable"):
                draft["public_method_table"] = self._method_table()
            elif self._accept_directive("packageMethodTable"):
                draft["package_method_table"] = self._method_table()
            elif self._accept_directive("implementedInterfaceInfoTable"):
                draft["interface_impls"].extend(self._block(self._interface_impl))
            elif self._accept_directive("method"):
                draft["methods"].append(self._method_decl())
            elif self._peek() is None:
                raise self._error("'}'")
            else:
                raise self._error("class section")
        self._advance()
        return draft

    def _class_ref_list(self) -> List[ClassRef]:
        refs = [self._class_ref()]
        while self._at(TokenKind.COMMA):
            self._advance()
            refs.append(self._class_ref())
        return refs

    def _class_ref_item(self) -> ClassRef:
        ref = self._class_ref()
        self._semicolon()
        return ref

    def _method_table(self) -> MethodTable:
        base = self._expect(TokenKind.DEC, expected="method table base").value

        def entry() -> MethodKey:
            key = self._method_key()
            self._semicolon()
            return key

        return MethodTable(base=base, entries=self._block(entry))

    def _interface_impl(self) -> InterfaceImpl:
        interface = self._class_ref()

        def entry() -> MethodKey:
            key = self._method_key()
            self._semicolon()
            return key

        return InterfaceImpl(interface=interface, methods=self._block(entry))

    def _field_decl(self) -> dict:
        start = self._peek()
        modifiers = self._modifiers(FIELD_MODIFIERS)
        field_type = self._type()
        if field_type.is_void:
            raise self._semantic("fields cannot be void", start)
        name = self._ident("field name")
        token = self._advance().value if self._at(TokenKind.DEC) else None
        initial: Optional[Union[int, List[int]]] = None
        if self._at(TokenKind.EQUALS):
            self._advance()
            initial = self._field_value()
        self._semicolon()
        return {
            "name": name,
            "type": field_type,
            "access": self._accessor(modifiers, start),
            "static": "static" in modifiers,
            "final": "final" in modifiers,
            "token": token,
            "initial": initial,
        }

    def _field_value(self) -> Union[int, List[int]]:
        if self._at(TokenKind.LBRACE):
            self._advance()
            values: List[int] = []
            if not self._at(TokenKind.RBRACE):
                values.append(self._scalar())
                while self._at(TokenKind.COMMA):
                    self._advance()
                    values.append(self._scalar())
            self._expect(TokenKind.RBRACE)
            return values
        return self._scalar()

    def _scalar(self) -> int:
        if self._at(TokenKind.IDENT) and self._peek().value in BOOLEAN_LITERALS:
            return BOOLEAN_LITERALS[self._advance().value]
        return self._integer("constant value")

    # =============================================================================
    # METHODS
    # =============================================================================
    def _method_decl(self) -> dict:
        start = self._peek()
        modifiers = self._modifiers(METHOD_MODIFIERS)
        returns = self._type()
        name_token = self._expect(TokenKind.IDENT, expected="method name")
        self._expect(TokenKind.LPAREN)
        params: List[Parameter] = []
        if not self._at(TokenKind.RPAREN):
            params.append(self._parameter())
            while self._at(TokenKind.COMMA):
                self._advance()
                params.append(self._parameter())
        self._expect(TokenKind.RPAREN)
        token = self._advance().value if self._at(TokenKind.DEC) else None

        draft = {
            "name": name_token.value,
            "line_token": name_token,
            "access": self._accessor(modifiers, start),
            "static": "static" in modifiers,
            "final": "final" in modifiers,
            "abstract": "abstract" in modifiers,
            "native": "native" in modifiers,
            "signature": MethodSignature(params=tuple(params), returns=returns),
            "token": token,
            "max_stack": 0,
            "max_locals": 0,
            "nargs": None,
            "body": None,
            "handlers": [],
        }
        if draft["final"] and draft["abstract"]:
            raise self._semantic(f"method {name_token.value} is both final and abstract", name_token)

        if self._at(TokenKind.SEMICOLON):
            self._advance()
            return draft
        if draft["native"] or draft["abstract"]:
            raise self._semantic(f"{'native' if draft['native'] else 'abstract'} method {name_token.value} has a body", name_token)

        self._expect(TokenKind.LBRACE)
        seen: Set[str] = set()
        while True:
            name = self._accept_directive("stack", "locals", "nargs")
            if not name:
                break
            if name in seen:
                raise self._semantic(f"repeated .{name}", name_token)
            seen.add(name)
            value = self._expect(TokenKind.DEC, expected=f".{name} value").value
            self._semicolon()
            draft["max_stack" if name == "stack" else "max_locals" if name == "locals" else "nargs"] = value
        if "stack" not in seen or "locals" not in seen:
            raise self._error(".stack and .locals")

        body: List[Instruction] = []
        while not self._at(TokenKind.RBRACE) and self._directive_name() != "exceptionTable":
            if self._peek() is None:
                raise self._error("'}'")
            body.append(self._instruction())
        if self._accept_directive("exceptionTable"):
            draft["handlers"] = self._block(self._handler)
        self._expect(TokenKind.RBRACE)
        draft["body"] = body
        return draft

    def _parameter(self) -> Parameter:
        param_type = self._type()
        if param_type.is_void:
            raise self._error("parameter type")
        name = self._ident() if self._at(TokenKind.IDENT) else None
        return Parameter(type=param_type, name=name)

    def _instruction(self) -> Instruction:
        labels: List[str] = []
        while self._at(TokenKind.IDENT) and self._at(TokenKind.COLON, offset=1):
            labels.append(self._advance().value)
            self._advance()
        if labels and (self._at(TokenKind.RBRACE) or self._at(TokenKind.DOT)):
            raise self._error(f"instruction after label {labels[-1]}")
        mnemonic_token = self._peek()
        mnemonic = self._ident("instruction mnemonic")
        spec = self.isa.get(mnemonic)
        if spec is None:
            self.pos -= 1
            raise self._error("JCVM instruction mnemonic")
        operands: List[Union[int, str]] = []
        while not self._at(TokenKind.SEMICOLON):
            if self._at(TokenKind.IDENT):
                operands.append(self._advance().value)
            elif self._at(TokenKind.DEC) or self._at(TokenKind.HEX):
                operands.append(self._advance().value)
            else:
                raise self._error("operand or ';'")
        arity = spec.expected_arity(operands)
        if arity is None or arity != len(operands):
            raise ParseError(
                line=mnemonic_token.line,
                column=mnemonic_token.column,
                expected=f"{arity if arity is not None else 'valid'} operands for {mnemonic}",
                found=f"{len(operands)} operands",
                source=self.source,
            )
        for kind, value in zip(spec.operand_kinds(operands), operands):
            wants_label = kind in LABEL_KINDS
            if wants_label != isinstance(value, str):
                raise ParseError(
                    line=mnemonic_token.line,
                    column=mnemonic_token.column,
                    expected=f"{'label' if wants_label else 'number'} operand for {mnemonic}",
                    found=str(value),
                    source=self.source,
                )
        self._semicolon()
        return Instruction(labels=labels, mnemonic=mnemonic, operands=operands)

    def _handler(self) -> ExceptionHandler:
        start = self._ident("start label")
        end = self._ident("end label")
        handler = self._ident("handler label")
        catch_type = self._integer("catch type index")
        self._semicolon()
        return ExceptionHandler(start=start, end=end, handler=handler, catch_type=catch_type)

    # =============================================================================
    # DEFAULTS
    # =============================================================================
    def _finish_class(self, draft: dict) -> JcaClass:
        name_token = draft.pop("line_token")
        draft["fields"] = _assign_field_tokens(draft["fields"])
        draft["methods"] = self._assign_method_tokens(draft, name_token)
        return JcaClass(**draft)

    def _assign_method_tokens(self, draft: dict, name_token: Token) -> List[JcaMethod]:
        table_tokens: Dict[MethodKey, int] = {}
        for table in (draft["package_method_table"], draft["public_method_table"]):
            if table is not None:
                for index, key in enumerate(table.entries):
                    table_tokens[key] = table.base + index

        def is_virtual(m: dict) -> bool:
            return not m["static"] and m["name"] != "<init>" and m["access"] is not Accessor.PRIVATE

        used = {True: set(), False: set()}
        for m in draft["methods"]:
            if m["token"] is not None:
                used[is_virtual(m)].add(m["token"])
            elif is_virtual(m):
                key = MethodKey(name=m["name"], params=m["signature"].param_types)
                if key in table_tokens:
                    m["token"] = table_tokens[key]
                    used[True].add(m["token"])
        counters = {True: 0, False: 0}
        methods: List[JcaMethod] = []
        for m in draft["methods"]:
            line_token = m.pop("line_token")
            space = is_virtual(m)
            if m["token"] is None:
                while counters[space] in used[space]:
                    counters[space] += 1
                m["token"] = counters[space]
                used[space].add(m["token"])
            expected = m["signature"].param_words + (0 if m["static"] else 1)
            if m["nargs"] is None:
                m["nargs"] = expected
            elif m["nargs"] != expected:
                raise self._semantic(
                    f"{draft['name']}.{m['name']} declares .nargs {m['nargs']}, signature needs {expected}", line_token
                )
            methods.append(JcaMethod(**m))
        return methods


def _assign_field_tokens(drafts: List[dict]) -> List[JcaField]:
    """Fill missing field tokens: references first, then primitives (instance and static numbered apart)"""
    for static in (False, True):
        group = [f for f in drafts if f["static"] == static]
        used = {f["token"] for f in group if f["token"] is not None}
        ordered = [f for f in group if f["type"].is_reference] + [f for f in group if not f["type"].is_reference]
        counter = 0
        for f in ordered:
            if f["token"] is None:
                while counter in used:
                    counter += 1
                f["token"] = counter
                used.add(counter)
    return [JcaField(**f) for f in drafts]


def _first_error(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return str(exc)
    first = errors[0]
    location = ".".join(str(part) for part in first.get("loc", ()))
    return f"{location}: {first.get('msg')}" if location else str(first.get("msg"))


# =============================================================================
# SEMANTIC CHECKS
# =============================================================================
def validate_package(package: JcaPackage, source: str = "<jca>", isa: Optional[InstructionSet] = None) -> None:
    """
    Check cross-references that the grammar alone cannot enforce

    Raises:
        SemanticError: first violation found
    """
    isa = isa or get_instruction_set()

    def fail(reason: str) -> None:
        raise SemanticError(reason=reason, source=source)

    seen_aids: Set[bytes] = set()
    for imp in package.imports:
        if imp.aid in seen_aids:
            fail(f"duplicate import AID {imp.aid.hex().upper()}")
        seen_aids.add(imp.aid)
        if not 5 <= len(imp.aid) <= 16:
            fail(f"import AID {imp.aid.hex().upper()} length outside 5..16")

    names = [c.name for c in package.classes]
    for name in set(names):
        if names.count(name) > 1:
            fail(f"class {name} declared twice")
    tokens = [c.token for c in package.classes]
    if len(set(tokens)) != len(tokens):
        fail("class tokens are not unique")

    def check_ref(ref: ClassRef, where: str) -> None:
        if ref.external:
            if ref.package_token >= len(package.imports):
                fail(f"{where}: import token {ref.package_token} not declared")
        elif package.find_class(ref.name) is None:
            fail(f"{where}: class {ref.name} not declared")

    def check_type(t: TypeRef, where: str) -> None:
        if t.class_ref is not None:
            check_ref(t.class_ref, where)

    for applet in package.applets:
        target = package.find_class(applet.class_name)
        if target is None:
            fail(f"applet class {applet.class_name} not declared")
        if target.interface or target.abstract:
            fail(f"applet class {applet.class_name} is not instantiable")
        if not 5 <= len(applet.aid) <= 16:
            fail(f"applet AID {applet.aid.hex().upper()} length outside 5..16")

    for index, entry in enumerate(package.constant_pool):
        where = f"constant pool entry {index}"
        check_ref(entry.class_ref, where)
        if entry.field_type is not None:
            check_type(entry.field_type, where)
        if entry.method_signature is not None:
            for t in entry.method_signature.param_types + (entry.method_signature.returns,):
                check_type(t, where)
        if entry.kind is CpKind.CLASSREF:
            continue
        if entry.internal:
            if not isinstance(entry.member, str):
                fail(f"{where}: internal member must be named")
            owner = package.find_class(entry.class_ref.name)
            if entry.kind.is_field:
                fld = owner.find_field(entry.member)
                if fld is None:
                    fail(f"{where}: field {owner.name}.{entry.member} not declared")
                if fld.static != entry.kind.is_static:
                    fail(f"{where}: {entry.kind.value} names {'a static' if fld.static else 'an instance'} field")
            else:
                candidates = owner.methods_named(entry.member)
                if entry.method_signature is not None:
                    candidates = [m for m in candidates if m.signature.param_types == entry.method_signature.param_types]
                if not candidates and entry.kind is not CpKind.SUPER_METHODREF:
                    fail(f"{where}: method {owner.name}.{entry.member} not declared")
                if len(candidates) > 1:
                    fail(f"{where}: method {owner.name}.{entry.member} is ambiguous without a signature")
        elif not isinstance(entry.member, int):
            fail(f"{where}: external member must be a token")

    for cls_ in package.classes:
        for ref in cls_.extends + cls_.implements + cls_.shareable_interfaces + cls_.remote_interfaces:
            check_ref(ref, f"class {cls_.name}")
        for fld in cls_.fields:
            check_type(fld.type, f"field {cls_.name}.{fld.name}")
            if isinstance(fld.initial, list) and not fld.type.array:
                fail(f"field {cls_.name}.{fld.name}: array initializer on a scalar")
            if isinstance(fld.initial, int) and fld.type.is_reference:
                fail(f"field {cls_.name}.{fld.name}: scalar initializer on a reference")
            if fld.type.array and fld.type.base == "reference" and fld.initial:
                fail(f"field {cls_.name}.{fld.name}: reference arrays cannot be initialized")
        for impl in cls_.interface_impls:
            check_ref(impl.interface, f"class {cls_.name}")
        for method in cls_.methods:
            _validate_method(package, cls_, method, fail, check_type, isa)
        for table in (cls_.public_method_table, cls_.package_method_table):
            if table is None:
                continue
            for key in table.entries:
                if cls_.find_method(key) is None and not _inherited(package, cls_, key):
                    fail(f"class {cls_.name}: method table entry {key} is neither declared nor inherited")


def _inherited(package: JcaPackage, cls_: JcaClass, key: MethodKey) -> bool:
    """True when ``key`` may come from a superclass (always true past an external class)"""
    seen: Set[str] = set()
    current = cls_
    while True:
        parent_ref = current.superclass
        if parent_ref is None:
            return False
        if parent_ref.external:
            return True
        parent = package.find_class(parent_ref.name)
        if parent is None or parent.name in seen:
            return False
        seen.add(parent.name)
        if parent.find_method(key) is not None:
            return True
        current = parent


def _validate_method(package, cls_, method, fail, check_type, isa) -> None:
    where = f"method {cls_.name}.{method.name}"
    for t in method.signature.param_types + (method.signature.returns,):
        check_type(t, where)
    if method.abstract and not (cls_.abstract or cls_.interface):
        fail(f"{where}: abstract method in a concrete class")
    if cls_.interface and not method.abstract:
        fail(f"{where}: interface methods must be abstract")
    if method.native and method.abstract:
        fail(f"{where}: native methods cannot be abstract")
    if not method.has_body:
        if not (method.native or method.abstract):
            fail(f"{where}: missing body")
        return

    labels: Set[str] = set()
    for ins in method.body:
        for label in ins.labels:
            if label in labels:
                fail(f"{where}: label {label} defined twice")
            labels.add(label)
    cp_size = len(package.constant_pool)
    for ins in method.body:
        spec = isa[ins.mnemonic]
        kinds = spec.operand_kinds(ins.operands)
        for position, (kind, value) in enumerate(zip(kinds, ins.operands)):
            if kind in LABEL_KINDS and value not in labels:
                fail(f"{where}: label {value} is not defined")
            if kind in CP_KINDS:
                if ins.mnemonic in ("checkcast", "instanceof") and ins.operands[0] not in REFERENCE_ATYPES:
                    continue
                if not 0 <= value < cp_size:
                    fail(f"{where}: {ins.mnemonic} constant-pool index {value} out of range")
    for handler in method.handlers:
        for label in (handler.start, handler.end, handler.handler):
            if label not in labels:
                fail(f"{where}: exception table label {label} is not defined")
        if handler.catch_type and handler.catch_type >= cp_size:
            fail(f"{where}: catch type index {handler.catch_type} out of range")


# =============================================================================
# ENTRY POINTS
# =============================================================================
def parse_package(tokens: Sequence[Token], source: str = "<jca>") -> JcaPackage:
    """Parse a token list into a validated JcaPackage"""
    return JcaParser(tokens, source=source).parse()


def parse_text(text: str, source: str = "<jca>") -> JcaPackage:
    return parse_package(tokenize(text, source=source), source=source)


def parse_file(path: Union[str, Path]) -> JcaPackage:
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw.count(b"\n", 0, exc.start) + 1
        column = exc.start - (raw.rfind(b"\n", 0, exc.start) + 1) + 1
        fragment = raw[exc.start:exc.end]
        raise LexError(
            f"{path}:{line}:{column}: invalid UTF-8 byte 0x{fragment[0]:02X}",
            line=line,
            column=column,
            fragment=fragment.hex(),
            source=str(path),
        ) from exc
    package = parse_text(text, source=str(path))
    logger.debug("JCA file parsed", path=str(path), package=package.name, classes=len(package.classes))
    return package
