"""
test_jca_parser.py
JCA parser: package structure, token defaults and semantic checks
"""
import pytest

from app.core.exceptions import ParseError, SemanticError
from app.models.jca import Accessor, ClassRef, CpKind, TypeRef
from app.services.jca_lexer import tokenize
from app.services.jca_parser import parse_file, parse_package, parse_text


def package_text(body: str, cp: str = "", applets: str = "") -> str:
    return f"""
.package demo {{
    .aid 0xA0:0x00:0x00:0x00:0x62:0x09;
    .version 1.0;
    .imports {{ 0xA0:0x00:0x00:0x00:0x62:0x00:0x01 1.0; }}
    .applets {{ {applets} }}
    .constantPool {{
        staticMethodRef 0.0.0 : void();
        {cp}
    }}
    {body}
}}
"""


def method_text(body: str, header: str = ".stack 1; .locals 0;", signature: str = "public static void run()") -> str:
    return package_text(f".class public Demo extends 0.0 {{ .method {signature} {{ {header} {body} }} }}")


# =============================================================================
# FIXTURE PACKAGE
# =============================================================================
def test_sample_package_header(sample_package):
    assert sample_package.name == "sample"
    assert sample_package.aid == bytes.fromhex("A00000006203010C01")
    assert (sample_package.major, sample_package.minor) == (1, 0)
    assert [imp.aid.hex().upper() for imp in sample_package.imports] == ["A0000000620001", "A0000000620101"]
    assert sample_package.imports[1].minor == 2
    assert sample_package.applets[0].class_name == "Example"
    assert sample_package.applets[0].aid == bytes.fromhex("A00000006203010C0101")


def test_parse_package_from_tokens(sample_package, fixtures_dir):
    tokens = tokenize((fixtures_dir / "sample.jca").read_text(encoding="utf-8"))
    assert parse_package(tokens) == sample_package


def test_sample_constant_pool(sample_package):
    pool = sample_package.constant_pool
    assert len(pool) == 10
    assert pool[0].kind is CpKind.STATIC_METHODREF
    assert pool[0].class_ref == ClassRef(package_token=1, class_token=3)
    assert pool[0].member == 0
    assert pool[2].kind is CpKind.CLASSREF and pool[2].member is None
    assert pool[4].field_type == TypeRef.primitive("short")
    assert pool[5].field_type == TypeRef.of_class(ClassRef(package_token=0, class_token=0))
    assert pool[8].field_type == TypeRef.primitive("byte", array=True)
    assert str(pool[9].method_signature) == "short(byte, byte)"
    assert pool[9].internal and not pool[0].internal


def test_default_tokens(sample_package):
    example = sample_package.find_class("Example")
    my_class = sample_package.find_class("MyClass")
    assert (example.token, my_class.token) == (0, 1)

    tokens = {m.name: m.token for m in example.methods}
    assert tokens == {"<init>": 0, "install": 1, "process": 7}
    assert {m.name: m.token for m in my_class.methods} == {"myNativeMethod": 0, "reset": 1}

    fields = {f.name: f.token for f in example.fields}
    # references first, instance and static fields numbered apart
    assert fields == {"class_field2": 0, "class_field1": 1, "static_field": 0, "MAX": 1}


def test_default_nargs(sample_package):
    example = sample_package.find_class("Example")
    nargs = {m.name: m.nargs for m in example.methods}
    assert nargs == {"<init>": 1, "install": 3, "process": 2}
    assert sample_package.find_class("MyClass").methods[0].nargs == 2


def test_methods_and_fields(sample_package):
    example = sample_package.find_class("Example")
    install = example.methods_named("install")[0]
    assert install.static and install.access is Accessor.PUBLIC
    assert [p.name for p in install.signature.params] == ["bArray", "bOffset", "bLength"]
    assert str(install.key) == "install(byte[], short, byte)"

    process = example.methods_named("process")[0]
    assert process.is_virtual
    assert [ins.labels for ins in process.body if ins.labels] == [["L_loop"], ["L_done"]]
    assert process.body[-1].mnemonic == "return"
    assert process.handlers[0].start == "L_loop" and process.handlers[0].catch_type == 0
    assert next(i for i in process.body if i.mnemonic == "sinc").operands == [2, 1]

    static_field = example.find_field("static_field")
    assert static_field.static and static_field.initial == [1, 2, 3, 4]
    assert example.find_field("MAX").is_constant
    assert example.find_field("class_field2").access is Accessor.PRIVATE

    natives = sample_package.native_methods
    assert [m.name for _, m in natives] == ["myNativeMethod", "reset"]
    assert all(m.body is None for _, m in natives)
    assert sample_package.uses_impdep


def test_corpus_interface_and_exports(corpus_packages):
    util = corpus_packages[0]
    resettable = util.find_class("Resettable")
    assert resettable.interface and resettable.abstract
    assert resettable.methods[0].abstract and resettable.methods[0].token == 0
    counter = util.find_class("Counter")
    assert counter.implements == [ClassRef(name="Resettable")]
    assert counter.public_method_table.base == 1
    assert counter.find_method(counter.public_method_table.entries[0]).token == 1
    assert [c.name for c in util.emission_order] == ["Resettable", "Counter"]


def test_parse_file_reports_source(fixtures_dir):
    package = parse_file(fixtures_dir / "corpus" / "crypto.jca")
    assert package.name == "com.acme.crypto"
    assert len(package.imports) == 2


# =============================================================================
# GRAMMAR VARIANTS
# =============================================================================
def test_space_separated_aid_and_slash_names():
    text = package_text("").replace(".package demo", ".package com/acme/demo").replace(
        "0xA0:0x00:0x00:0x00:0x62:0x09;", "0xA0 0x00 0x00 0x00 0x62 0x09;"
    )
    package = parse_text(text)
    assert package.name == "com.acme.demo"
    assert package.aid == bytes.fromhex("A00000006209")


def test_explicit_tokens_and_nargs_are_kept():
    text = method_text("return;", header=".stack 1; .locals 0; .nargs 1;", signature="public static void run(short x) 9")
    method = parse_text(text).classes[0].methods[0]
    assert method.token == 9
    assert method.nargs == 1


def test_int_parameters_take_two_words():
    text = method_text("return;", signature="public void run(int a, short b)")
    assert parse_text(text).classes[0].methods[0].nargs == 4


def test_boolean_initializers():
    text = package_text(".class Demo extends 0.0 { .fields { static boolean on = true; static boolean[] bits = {true, false}; } }")
    fields = parse_text(text).classes[0].fields
    assert [f.initial for f in fields] == [1, [1, 0]]


# =============================================================================
# ERRORS
# =============================================================================
@pytest.mark.parametrize(
    "body",
    [
        "return",  # missing ';'
        "frobnicate; return;",  # unknown mnemonic
        "sspush; return;",  # operand count
        "goto 5; return;",  # number where a label belongs
        "L_end:",  # label without instruction
    ],
)
def test_grammar_errors(body):
    with pytest.raises(ParseError):
        parse_text(method_text(body), source="demo.jca")


def test_parse_error_position():
    with pytest.raises(ParseError) as exc_info:
        parse_text(".package demo {\n  .aid 0xA0:0x00:0x00:0x00:0x62;\n  .version 1;\n}", source="demo.jca")
    error = exc_info.value
    assert (error.line, error.column) == (3, 13)
    assert error.found == ";"
    assert str(error).startswith("demo.jca:3:13: expected")


def test_missing_stack_directive():
    with pytest.raises(ParseError):
        parse_text(method_text("return;", header=".locals 0;"))


def test_missing_aid():
    with pytest.raises(ParseError) as exc_info:
        parse_text(".package demo { .version 1.0; }")
    assert exc_info.value.expected == ".aid"


def test_aid_byte_out_of_range():
    with pytest.raises(ParseError):
        parse_text(package_text("").replace("0x62:0x09;", "0x62:0x1FF;"))


@pytest.mark.parametrize(
    "text",
    [
        method_text("goto L_nowhere; return;"),
        method_text("invokestatic 5; return;"),
        method_text("return;", header=".stack 1; .locals 0; .nargs 3;"),
        package_text(".class Demo extends 0.0 { .method public abstract void run(); }"),
        package_text(".class Demo extends 0.0 { .method public static native void run() { .stack 1; .locals 0; return; } }"),
        package_text(".class Demo extends 0.0 { } .class Demo extends 0.0 { }"),
        package_text(".class Demo extends 5.0 { }"),
        package_text(".class Demo extends 0.0 { }", cp="instanceFieldRef Demo.missing : short;"),
        package_text(".class Demo extends 0.0 { }", applets="0xA0:0x00:0x00:0x00:0x62:0x09:0x01 Nope;"),
        package_text("").replace("0xA0:0x00:0x00:0x00:0x62:0x09;", "0xA0:0x00;"),
    ],
    ids=[
        "undefined-label",
        "cp-index-out-of-range",
        "nargs-mismatch",
        "abstract-in-concrete-class",
        "native-with-body",
        "duplicate-class",
        "undeclared-import",
        "undeclared-field",
        "undeclared-applet-class",
        "short-aid",
    ],
)
def test_semantic_errors(text):
    with pytest.raises(SemanticError) as exc_info:
        parse_text(text, source="demo.jca")
    assert exc_info.value.exit_code == 2
    assert str(exc_info.value).startswith("demo.jca: ")
