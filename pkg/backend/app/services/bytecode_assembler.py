# app/services/bytecode_assembler.py

"""
Bytecode assembly for method bodies

Two passes: the first lays out instruction offsets and label positions, the
second encodes operands (branch offsets are relative to the opcode of the
branching instruction). Constant-pool operands are reported as relocations
so the ReferenceLocation component can list them.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from app.core.exceptions import OperandOverflow, UnresolvedLabel
from app.models.jca import Instruction, JcaMethod, TypeRef
from app.services.instruction_set import (
    CP_KINDS,
    LABEL_KINDS,
    OPERAND_RANGES,
    REFERENCE_ATYPES,
    InstructionSet,
    get_instruction_set,
)

STUB_PUSH = "sspush"
STUB_TRAP = "impdep1"


@dataclass
class AssembledCode:
    """
    Encoded method body

    Attributes:
        code: bytecode bytes
        relocations: (offset in code, operand width, constant-pool index)
        label_offsets: label -> offset in code
    """
    code: bytes = b""
    relocations: List[Tuple[int, int, int]] = field(default_factory=list)
    label_offsets: Dict[str, int] = field(default_factory=dict)


def return_mnemonic(return_type: TypeRef) -> str:
    """Return instruction matching a declared return type"""
    if return_type.is_void:
        return "return"
    if return_type.is_reference:
        return "areturn"
    if return_type.base == "int":
        return "ireturn"
    return "sreturn"


def inject_native_stub(method: JcaMethod, index: int) -> List[Instruction]:
    """
    Body that traps into native code: push the dispatch index, impdep1, return

    Args:
        method: native method being replaced
        index: dispatch index 0..65535
    """
    return [
        Instruction(mnemonic=STUB_PUSH, operands=[index]),
        Instruction(mnemonic=STUB_TRAP),
        Instruction(mnemonic=return_mnemonic(method.signature.returns)),
    ]


def _encode(mnemonic: str, kind: str, value: int) -> bytes:
    width, low, high = OPERAND_RANGES[kind]
    if not low <= value <= high:
        raise OperandOverflow(mnemonic=mnemonic, value=value, kind=kind)
    return (value & ((1 << (8 * width)) - 1)).to_bytes(width, "big")


def assemble_method(body: Sequence[Instruction], isa: Optional[InstructionSet] = None) -> AssembledCode:
    """
    Encode a method body

    Args:
        body: instructions (empty for abstract methods)
        isa: instruction table, process default when omitted

    Returns:
        AssembledCode

    Raises:
        UnresolvedLabel: branch target or label not defined
        OperandOverflow: immediate or branch offset does not fit its encoding
    """
    isa = isa or get_instruction_set()

    # pass 1: layout
    offsets: List[int] = []
    labels: Dict[str, int] = {}
    position = 0
    for ins in body:
        spec = isa[ins.mnemonic]
        for label in ins.labels:
            labels[label] = position
        offsets.append(position)
        position += spec.encoded_size(ins.operands)

    # pass 2: encoding
    out = bytearray()
    relocations: List[Tuple[int, int, int]] = []
    for ins, start in zip(body, offsets):
        spec = isa[ins.mnemonic]
        out.append(spec.opcode)
        kinds = spec.operand_kinds(ins.operands)
        for kind, value in zip(kinds, ins.operands):
            if kind in LABEL_KINDS:
                if value not in labels:
                    raise UnresolvedLabel(label=str(value))
                out += _encode(ins.mnemonic, kind, labels[value] - start)
                continue
            if kind in CP_KINDS:
                typed = ins.mnemonic in ("checkcast", "instanceof")
                if not typed or ins.operands[0] in REFERENCE_ATYPES:
                    relocations.append((len(out), OPERAND_RANGES[kind][0], value))
            out += _encode(ins.mnemonic, kind, value)
    return AssembledCode(code=bytes(out), relocations=relocations, label_offsets=labels)
