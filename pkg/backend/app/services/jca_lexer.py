# app/services/jca_lexer.py

"""
Tokenizer for Java Card Assembly text
"""
import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Union

from app.core.exceptions import LexError


class TokenKind(Enum):
    DOT = "."
    IDENT = "identifier"
    LBRACE = "{"
    RBRACE = "}"
    LPAREN = "("
    RPAREN = ")"
    LBRACKET = "["
    RBRACKET = "]"
    SEMICOLON = ";"
    COLON = ":"
    COMMA = ","
    SLASH = "/"
    EQUALS = "="
    HEX = "hex literal"
    DEC = "decimal literal"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    value: Union[str, int]
    line: int
    column: int
    text: str

    def __str__(self) -> str:
        return self.text


_PUNCTUATION = {kind.value: kind for kind in TokenKind if len(kind.value) == 1}

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>[ \t\r\n\f\ufeff]+)
    | (?P<line_comment>//[^\n]*)
    | (?P<block_comment>/\*.*?\*/)
    | (?P<hex>0[xX][0-9A-Fa-f]+)
    | (?P<dec>-?[0-9]+)
    | (?P<ident><init>|<clinit>|[A-Za-z_$][A-Za-z0-9_$]*)
    | (?P<punct>[.{}()\[\];:,/=])
    """,
    re.VERBOSE | re.DOTALL,
)


def tokenize(text: str, source: str = "<jca>") -> List[Token]:
    """
    Split JCA text into tokens; whitespace and comments are dropped

    Args:
        text: JCA source
        source: file name used in error messages

    Returns:
        list of Token

    Raises:
        LexError: unrecognized character sequence (also unterminated comments)
    """
    tokens: List[Token] = []
    pos, line, line_start = 0, 1, 0
    length = len(text)
    while pos < length:
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            fragment = re.match(r"\S+", text[pos:])
            raise LexError(
                line=line,
                column=pos - line_start + 1,
                fragment=fragment.group(0) if fragment else text[pos],
                source=source,
            )
        group = match.lastgroup
        lexeme = match.group(0)
        column = pos - line_start + 1
        if group == "hex":
            tokens.append(Token(TokenKind.HEX, int(lexeme, 16), line, column, lexeme))
        elif group == "dec":
            tokens.append(Token(TokenKind.DEC, int(lexeme), line, column, lexeme))
        elif group == "ident":
            tokens.append(Token(TokenKind.IDENT, lexeme, line, column, lexeme))
        elif group == "punct":
            tokens.append(Token(_PUNCTUATION[lexeme], lexeme, line, column, lexeme))
        newlines = lexeme.count("\n")
        if newlines:
            line += newlines
            line_start = pos + lexeme.rindex("\n") + 1
        pos = match.end()
    return tokens
