# app/services/instruction_set.py

"""
JCVM instruction table

Loads the opcode/operand table shipped in ``app/data/jcvm_instructions.json``
and answers encoding questions for the parser and the assembler.

Operand kinds:
    s1, s2, s4      signed immediates (s2 also accepts 0..65535)
    u1, u2          unsigned byte (local index, count, atype, token), short
    cp1, cp2        constant-pool index, 1 or 2 bytes
    label1, label2  branch target, signed 1- or 2-byte offset
    stableswitch, itableswitch, slookupswitch, ilookupswitch
                    variable-length switch operand lists
"""
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import orjson
import structlog

from app.config import settings
from app.core.exceptions import ConfigError

logger = structlog.get_logger()

# kind -> (encoded bytes, min, max)
OPERAND_RANGES: Dict[str, Tuple[int, int, int]] = {
    "s1": (1, -0x80, 0x7F),
    "u1": (1, 0, 0xFF),
    "s2": (2, -0x8000, 0xFFFF),
    "u2": (2, 0, 0xFFFF),
    "s4": (4, -0x80000000, 0x7FFFFFFF),
    "cp1": (1, 0, 0xFF),
    "cp2": (2, 0, 0xFFFF),
    "label1": (1, -0x80, 0x7F),
    "label2": (2, -0x8000, 0x7FFF),
}

SWITCH_KINDS = frozenset({"stableswitch", "itableswitch", "slookupswitch", "ilookupswitch"})
CP_KINDS = frozenset({"cp1", "cp2"})
LABEL_KINDS = frozenset({"label1", "label2"})
# checkcast/instanceof atype values that name a class through the constant pool
REFERENCE_ATYPES = frozenset({0, 14})

Operand = Union[int, str]


@dataclass(frozen=True)
class InstructionSpec:
    """One row of the instruction table"""
    name: str
    opcode: int
    operands: Tuple[str, ...]

    @property
    def is_switch(self) -> bool:
        return bool(self.operands) and self.operands[0] in SWITCH_KINDS

    @property
    def is_branch(self) -> bool:
        return any(kind in LABEL_KINDS for kind in self.operands) or self.is_switch

    def operand_kinds(self, operands: Sequence[Operand]) -> Tuple[str, ...]:
        """Per-operand kinds, switch lists expanded"""
        if not self.is_switch:
            return self.operands
        kind = self.operands[0]
        wide = "s4" if kind.startswith("i") else "s2"
        if kind.endswith("tableswitch"):
            return ("label2", wide, wide) + ("label2",) * max(len(operands) - 3, 0)
        pairs = max(len(operands) - 2, 0) // 2
        return ("label2", "u2") + (wide, "label2") * pairs

    def expected_arity(self, operands: Sequence[Operand]) -> Optional[int]:
        """Operand count this instruction needs, None when it cannot be computed"""
        if not self.is_switch:
            return len(self.operands)
        kind = self.operands[0]
        if kind.endswith("tableswitch"):
            if len(operands) < 3 or not all(isinstance(v, int) for v in operands[1:3]):
                return None
            low, high = operands[1], operands[2]
            return 3 + (high - low + 1) if high >= low else None
        if len(operands) < 2 or not isinstance(operands[1], int):
            return None
        return 2 + 2 * operands[1]

    def encoded_size(self, operands: Sequence[Operand]) -> int:
        size = 1
        for kind in self.operand_kinds(operands):
            size += OPERAND_RANGES[kind][0]
        return size


class InstructionSet:
    """Lookup by mnemonic and by opcode"""

    def __init__(self, specs: Sequence[InstructionSpec], version: str = ""):
        self.version = version
        self.by_name: Dict[str, InstructionSpec] = {spec.name: spec for spec in specs}
        self.by_opcode: Dict[int, InstructionSpec] = {spec.opcode: spec for spec in specs}
        if len(self.by_name) != len(specs) or len(self.by_opcode) != len(specs):
            raise ConfigError(path="instruction table", reason="duplicate mnemonic or opcode")

    def __contains__(self, mnemonic: str) -> bool:
        return mnemonic in self.by_name

    def __getitem__(self, mnemonic: str) -> InstructionSpec:
        return self.by_name[mnemonic]

    def __len__(self) -> int:
        return len(self.by_name)

    def get(self, mnemonic: str) -> Optional[InstructionSpec]:
        return self.by_name.get(mnemonic)

    @classmethod
    def from_file(cls, path: Path) -> "InstructionSet":
        try:
            raw = orjson.loads(Path(path).read_bytes())
            specs = [
                InstructionSpec(name=row["name"], opcode=int(row["opcode"]), operands=tuple(row["operands"]))
                for row in raw["instructions"]
            ]
        except OSError as exc:
            raise ConfigError(path=str(path), reason=exc.strerror or str(exc)) from exc
        except (orjson.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(path=str(path), reason=f"invalid instruction table: {exc}") from exc
        unknown = {k for spec in specs for k in spec.operands} - set(OPERAND_RANGES) - SWITCH_KINDS
        if unknown:
            raise ConfigError(path=str(path), reason=f"unknown operand kinds {sorted(unknown)}")
        logger.debug("Instruction table loaded", path=str(path), instructions=len(specs))
        return cls(specs, version=str(raw.get("version", "")))


@lru_cache(maxsize=None)
def get_instruction_set(path: Optional[str] = None) -> InstructionSet:
    """Process-wide instruction table (loaded once per path)"""
    return InstructionSet.from_file(Path(path) if path else settings.INSTRUCTION_TABLE_PATH)
