"""
exceptions.py
Error hierarchy for the jcimage toolchain

Hierarchy:

  JcImageError               - base error (exit code 1)
      InputError             - bad input file or configuration (exit code 2)
          LexError           - unrecognized character sequence in JCA text
          ParseError         - grammar violation in JCA text
          SemanticError      - model invariant violated after parsing
          ConfigError        - build configuration unreadable or invalid
          MissingPackageError- configured package has no .jca file
          CorruptImageError  - flash image fails verification
          HexRecordError     - Intel HEX record decoder base error
              ChecksumMismatch
              MalformedRecord
      BuildError             - CAP/image construction failed (exit code 2)
          UnresolvedLabel
          OperandOverflow
          TooManyNatives
          NameCollision
          TypeWidthMismatch
          SectorOverflow
      FlashError             - filesystem and device errors
          FlashFull
          TagLenInvalid
          DataTooLarge
          HashMismatch
          CorruptSector
          ReservedTooSmall
          ProgramError       - 0 -> 1 bit transition without erase
          PowerLoss          - injected crash (simulation only)
      ArtifactWriteError     - output file could not be written
      LookupMiss             - requested tag absent (exit code 3)
"""

from typing import Any


class JcImageError(Exception):
    """Base exception; message is built from ``_fmt`` and keyword context"""

    _fmt = "jcimage error"
    exit_code = 1

    def __init__(self, msg: str = None, **kw: Any):
        self.msg = msg
        self.context = kw
        for key, value in kw.items():
            setattr(self, key, value)
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.msg:
            return self.msg
        try:
            return self._fmt % self.__dict__
        except (NameError, ValueError, KeyError, TypeError) as exc:
            return f"Unprintable exception {type(self).__name__}: {exc!r}"


# =============================================================================
# INPUT ERRORS
# =============================================================================
class InputError(JcImageError):
    _fmt = "invalid input"
    exit_code = 2


class LexError(InputError):
    _fmt = "%(source)s:%(line)d:%(column)d: unrecognized input %(fragment)r"

    def __init__(self, msg: str = None, *, line: int, column: int, fragment: str, source: str = "<jca>"):
        super().__init__(msg, line=line, column=column, fragment=fragment, source=source)


class ParseError(InputError):
    _fmt = "%(source)s:%(line)d:%(column)d: expected %(expected)s, found %(found)r"

    def __init__(self, msg: str = None, *, line: int, column: int, expected: str, found: str, source: str = "<jca>"):
        super().__init__(msg, line=line, column=column, expected=expected, found=found, source=source)


class SemanticError(InputError):
    _fmt = "%(source)s: %(reason)s"

    def __init__(self, msg: str = None, *, reason: str, source: str = "<jca>"):
        super().__init__(msg, reason=reason, source=source)


class ConfigError(InputError):
    _fmt = "configuration %(path)s: %(reason)s"

    def __init__(self, msg: str = None, *, path: str = "<config>", reason: str):
        super().__init__(msg, path=path, reason=reason)


class MissingPackageError(InputError):
    _fmt = "package %(package)s has no .jca file in %(directory)s"


class CorruptImageError(InputError):
    _fmt = "corrupt flash image: %(reason)s"


class HexRecordError(InputError):
    _fmt = "Intel HEX record error at line %(line)d"


class ChecksumMismatch(HexRecordError):
    _fmt = "Intel HEX record at line %(line)d has invalid checksum"


class MalformedRecord(HexRecordError):
    _fmt = "Intel HEX record at line %(line)d is malformed: %(reason)s"


# =============================================================================
# BUILD ERRORS
# =============================================================================
class BuildError(JcImageError):
    _fmt = "%(component)s component: %(dependency)s"
    exit_code = 2

    def __init__(self, msg: str = None, *, component: str, dependency: str, **kw: Any):
        super().__init__(msg, component=component, dependency=dependency, **kw)


class UnresolvedLabel(BuildError):
    _fmt = "%(component)s component: label %(label)s is not defined"

    def __init__(self, msg: str = None, *, label: str):
        super().__init__(msg, component="Method", dependency=f"label {label}", label=label)


class OperandOverflow(BuildError):
    _fmt = "%(component)s component: %(mnemonic)s operand %(value)d does not fit %(kind)s"

    def __init__(self, msg: str = None, *, mnemonic: str, value: int, kind: str):
        super().__init__(
            msg, component="Method", dependency=f"{mnemonic} operand", mnemonic=mnemonic, value=value, kind=kind
        )


class TooManyNatives(BuildError):
    _fmt = "%(count)d native methods exceed the 65535 dispatch indices"

    def __init__(self, msg: str = None, *, count: int):
        super().__init__(msg, component="Method", dependency="native index space", count=count)


class NameCollision(BuildError):
    _fmt = "native macro %(name)s is generated by more than one method"

    def __init__(self, msg: str = None, *, name: str):
        super().__init__(msg, component="jni.h", dependency=f"macro {name}", name=name)


class TypeWidthMismatch(BuildError):
    _fmt = "field type 0x%(type_code)02X expects %(expected)s bytes, got %(actual)d"

    def __init__(self, msg: str = None, *, type_code: int, expected: str, actual: int):
        super().__init__(
            msg, component="StaticField", dependency="value width", type_code=type_code, expected=expected, actual=actual
        )


class SectorOverflow(BuildError):
    _fmt = "image needs %(required)d bytes but sector %(sector)d holds %(available)d"

    def __init__(self, msg: str = None, *, required: int, available: int, sector: int):
        super().__init__(
            msg, component="image", dependency="target sector", required=required, available=available, sector=sector
        )


# =============================================================================
# FLASH ERRORS
# =============================================================================
class FlashError(JcImageError):
    _fmt = "flash error"


class FlashFull(FlashError):
    _fmt = "no sector can hold %(required)d more bytes"


class TagLenInvalid(FlashError):
    _fmt = "tag length %(length)d outside 1..30"


class DataTooLarge(FlashError):
    _fmt = "data length %(length)d does not fit a 4-byte length field"


class HashMismatch(FlashError):
    _fmt = "block at 0x%(address)X failed its checksum"


class CorruptSector(FlashError):
    _fmt = "sector %(sector)d is corrupt at 0x%(address)X"


class ReservedTooSmall(FlashError):
    _fmt = "reserved sector %(reserved)d holds %(available)d bytes, victim needs %(required)d"


class ProgramError(FlashError):
    _fmt = "program at 0x%(address)X would set bits 0 -> 1 (0x%(old)02X -> 0x%(new)02X)"


class PowerLoss(FlashError):
    _fmt = "power lost after %(steps)d flash steps"


# =============================================================================
# OUTPUT
# =============================================================================
class ArtifactWriteError(JcImageError):
    _fmt = "cannot write %(path)s: %(reason)s"


# =============================================================================
# LOOKUP
# =============================================================================
class LookupMiss(JcImageError):
    _fmt = "tag %(tag)s not found"
    exit_code = 3
