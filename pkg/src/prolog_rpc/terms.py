"""Prolog term data model, reader, writer, and message framing.

Everything that crosses the wire is a single Prolog term followed by a
period and a newline.  This module owns that text format end to end:

  * the term vocabulary (atoms, integers, floats, variables, compounds,
    with lists sugared over './2' and the '[]' atom),
  * a tokenizer and operator-precedence reader for a fixed operator
    table (no user-defined operators),
  * a writer that emits each term in a canonical spelling that reads
    back to the same term,
  * read_message / write_message, which frame terms on byte streams.

Integers are restricted to signed 64-bit, floats to finite values, and
double-quoted strings are rejected outright; the wire grammar is meant
to be small enough to re-implement from scratch in an afternoon.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

INT_MIN = -(2 ** 63)
INT_MAX = 2 ** 63 - 1


# ===================================================================
# Term data model
# ===================================================================

@dataclass(frozen=True, slots=True)
class SourceSpan:
    """Line/column of a token, for parse diagnostics.  1-based."""
    line: int
    column: int


class ParseError(Exception):
    """Raised on any malformed term text.  Carries a SourceSpan and,
    when raised by read_message, the framed text in `text`."""

    def __init__(self, message: str, span: SourceSpan, text: str = ""):
        super().__init__(f"{message} at line {span.line}, column {span.column}")
        self.message = message
        self.span = span
        self.text = text


class ConnectionClosed(Exception):
    """End of stream before a complete message was read."""


class MessageTooLarge(Exception):
    """A framed message exceeded the caller's byte budget."""


@dataclass(frozen=True, slots=True)
class Atom:
    """A Prolog atom.

    `quoted` records whether the source spelled the atom with quotes;
    the writer re-quotes such atoms verbatim so transcripts stay byte
    stable.  Equality and hashing ignore the flag.
    """
    name: str
    quoted: bool = field(default=False, compare=False)


@dataclass(frozen=True, slots=True)
class Integer:
    value: int


@dataclass(frozen=True, slots=True)
class Float:
    value: float


@dataclass(frozen=True, slots=True)
class Variable:
    """A named logic variable.

    `anonymous` marks variables that were written `_` in the source;
    each such occurrence gets a fresh generated name and is excluded
    from answer binding lists.  The flag does not affect equality.
    """
    name: str
    anonymous: bool = field(default=False, compare=False)


@dataclass(frozen=True, slots=True)
class Compound:
    """A compound term; arity is always at least one."""
    functor: str
    args: tuple

    def __post_init__(self):
        if not isinstance(self.args, tuple):
            object.__setattr__(self, "args", tuple(self.args))
        if len(self.args) == 0:
            raise ValueError("compound terms need at least one argument")


Term = Union[Atom, Integer, Float, Variable, Compound]

NIL = Atom("[]")
TRUE = Atom("true")


def make_list(items: Iterable[Term], tail: Term = NIL) -> Term:
    """Build a cons-cell list term from Python items."""
    out = tail
    for item in reversed(list(items)):
        out = Compound(".", (item, out))
    return out


def list_items(term: Term) -> tuple[list, Term]:
    """Unroll cons cells; returns (items, tail).  tail is NIL when proper."""
    items = []
    while isinstance(term, Compound) and term.functor == "." and len(term.args) == 2:
        items.append(term.args[0])
        term = term.args[1]
    return items, term


def term_variables(term: Term) -> list[Variable]:
    """All variables of a term in first-occurrence order, no duplicates."""
    seen: dict[str, Variable] = {}
    stack = [term]
    while stack:
        t = stack.pop()
        if isinstance(t, Variable):
            if t.name not in seen:
                seen[t.name] = t
        elif isinstance(t, Compound):
            stack.extend(reversed(t.args))
    return list(seen.values())


def variant(a: Term, b: Term) -> bool:
    """True when a and b are equal up to a bijective renaming of variables."""
    fwd: dict[str, str] = {}
    bwd: dict[str, str] = {}
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        if isinstance(x, Variable) and isinstance(y, Variable):
            if fwd.setdefault(x.name, y.name) != y.name:
                return False
            if bwd.setdefault(y.name, x.name) != x.name:
                return False
        elif isinstance(x, Compound) and isinstance(y, Compound):
            if x.functor != y.functor or len(x.args) != len(y.args):
                return False
            stack.extend(zip(x.args, y.args))
        elif x != y or type(x) is not type(y):
            return False
    return True


# ===================================================================
# Operator table
# ===================================================================
# Fixed; op/3 is deliberately unsupported.  (priority, type) per name.

INFIX_OPS: dict[str, tuple[int, str]] = {
    ":-": (1200, "xfx"),
    ";": (1100, "xfy"),
    "->": (1050, "xfy"),
    ",": (1000, "xfy"),
    "=": (700, "xfx"),
    "\\=": (700, "xfx"),
    "==": (700, "xfx"),
    "\\==": (700, "xfx"),
    "is": (700, "xfx"),
    "<": (700, "xfx"),
    ">": (700, "xfx"),
    "=<": (700, "xfx"),
    ">=": (700, "xfx"),
    "=:=": (700, "xfx"),
    "=\\=": (700, "xfx"),
    "+": (500, "yfx"),
    "-": (500, "yfx"),
    "*": (400, "yfx"),
    "/": (400, "yfx"),
    "mod": (400, "yfx"),
}

PREFIX_OPS: dict[str, tuple[int, str]] = {
    "-": (200, "fy"),
}

# The full priority argument ceiling, and the ceiling inside argument
# lists (just below ','/2 so commas separate).
MAX_PRIORITY = 1200
ARG_PRIORITY = 999


# ===================================================================
# Tokenizer
# ===================================================================

_SYMBOL_CHARS = frozenset("#&*+-./:<=>?@^~\\")
_LAYOUT = frozenset(" \t\r\n")
_ESCAPES = {"n": "\n", "t": "\t", "\\": "\\", "'": "'"}

# Token kinds: atom qatom var int float punct open end eof
# Each token is (kind, value, line, col, attached) where attached is
# only meaningful for '(' (True when it hugs a preceding atom, i.e. a
# functor application rather than grouping).


def _tokenize(text: str) -> list[tuple]:
    tokens: list[tuple] = []
    i, n = 0, len(text)
    line, col = 1, 1
    prev_end = -1          # index just past the previous token
    prev_kind = ""

    def err(msg: str, ln: int, cl: int):
        raise ParseError(msg, SourceSpan(ln, cl))

    def emit(kind: str, value, ln: int, cl: int, end: int, attached: bool = False):
        nonlocal prev_end, prev_kind
        tokens.append((kind, value, ln, cl, attached))
        prev_end = end
        prev_kind = kind

    while i < n:
        c = text[i]
        if c in _LAYOUT:
            if c == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1
            continue
        if c == "%":
            while i < n and text[i] != "\n":
                i += 1
            continue
        ln, cl = line, col

        if c == "(":
            attached = prev_end == i and prev_kind in ("atom", "qatom")
            emit("open", "(", ln, cl, i + 1, attached)
            i += 1
            col += 1
            continue
        if c in ")[],|":
            emit("punct", c, ln, cl, i + 1)
            i += 1
            col += 1
            continue
        if c in "!;":
            emit("atom", c, ln, cl, i + 1)
            i += 1
            col += 1
            continue
        if c == "'":
            i += 1
            col += 1
            chars: list[str] = []
            while True:
                if i >= n:
                    err("unterminated quoted atom", ln, cl)
                ch = text[i]
                if ch == "'":
                    if i + 1 < n and text[i + 1] == "'":
                        chars.append("'")
                        i += 2
                        col += 2
                        continue
                    i += 1
                    col += 1
                    break
                if ch == "\\":
                    if i + 1 >= n:
                        err("unterminated escape", line, col)
                    rep = _ESCAPES.get(text[i + 1])
                    if rep is None:
                        err(f"unknown escape \\{text[i + 1]!r}", line, col)
                    chars.append(rep)
                    i += 2
                    col += 2
                    continue
                chars.append(ch)
                if ch == "\n":
                    line += 1
                    col = 1
                else:
                    col += 1
                i += 1
            if not chars:
                err("empty quoted atom", ln, cl)
            emit("qatom", "".join(chars), ln, cl, i)
            continue
        if c == '"':
            err("double-quoted strings are not supported", ln, cl)
        if c.isdigit() and c.isascii():
            j = i
            while j < n and text[j].isdigit() and text[j].isascii():
                j += 1
            is_float = False
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit() and text[j + 1].isascii():
                is_float = True
                j += 1
                while j < n and text[j].isdigit() and text[j].isascii():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit() and text[k].isascii():
                    is_float = True
                    j = k
                    while j < n and text[j].isdigit() and text[j].isascii():
                        j += 1
            raw = text[i:j]
            if is_float:
                value = float(raw)
                if value in (float("inf"), float("-inf")):
                    err("float literal out of range", ln, cl)
                emit("float", value, ln, cl, j)
            else:
                emit("int", int(raw), ln, cl, j)
            col += j - i
            i = j
            continue
        if (c.isalpha() and c.isascii() and c.islower()) or c == "$":
            j = i + 1
            while j < n and (text[j].isascii() and (text[j].isalnum() or text[j] == "_")):
                j += 1
            name = text[i:j]
            if name == "$":
                err("unexpected character '$'", ln, cl)
            emit("atom", name, ln, cl, j)
            col += j - i
            i = j
            continue
        if c == "_" or (c.isalpha() and c.isascii() and c.isupper()):
            j = i + 1
            while j < n and (text[j].isascii() and (text[j].isalnum() or text[j] == "_")):
                j += 1
            emit("var", text[i:j], ln, cl, j)
            col += j - i
            i = j
            continue
        if c == ".":
            nxt = text[i + 1] if i + 1 < n else None
            if nxt is None or nxt in _LAYOUT or nxt == "%":
                emit("end", ".", ln, cl, i + 1)
                i += 1
                col += 1
                continue
            # fall through: part of a symbolic atom
        if c in _SYMBOL_CHARS:
            j = i
            while j < n and text[j] in _SYMBOL_CHARS:
                j += 1
            emit("atom", text[i:j], ln, cl, j)
            col += j - i
            i = j
            continue
        err(f"unexpected character {c!r}", ln, cl)

    tokens.append(("eof", None, line, col, False))
    return tokens


# ===================================================================
# Reader
# ===================================================================

_ANON_NAME = re.compile(r"_G(\d+)\Z")


class _Reader:
    """Operator-precedence reader over a token list."""

    def __init__(self, tokens: list[tuple]):
        self.tokens = tokens
        self.pos = 0
        # Fresh names for `_` must not collide with variables the
        # source spells out, so start the counter above any literal _Gn.
        top = 0
        for tok in tokens:
            if tok[0] == "var":
                m = _ANON_NAME.match(tok[1])
                if m:
                    top = max(top, int(m.group(1)))
        self._anon = top

    def peek(self) -> tuple:
        return self.tokens[self.pos]

    def next(self) -> tuple:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def err(self, msg: str, tok: tuple):
        raise ParseError(msg, SourceSpan(tok[2], tok[3]))

    def expect(self, kind: str, value=None) -> tuple:
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            self.err(f"expected {want!r}, found {self._show(tok)}", tok)
        return tok

    @staticmethod
    def _show(tok) -> str:
        return "end of input" if tok[0] == "eof" else repr(tok[1])

    def fresh_anonymous(self) -> Variable:
        self._anon += 1
        return Variable(f"_G{self._anon}", anonymous=True)

    # ---- grammar -------------------------------------------------

    def read_term(self, maxp: int) -> Term:
        term, _ = self._expr(maxp)
        return term

    def _expr(self, maxp: int) -> tuple[Term, int]:
        left, leftp = self._primary(maxp)
        while True:
            tok = self.peek()
            if tok[0] == "punct" and tok[1] == ",":
                name = ","
            elif tok[0] == "atom" and tok[1] in INFIX_OPS:
                name = tok[1]
            else:
                break
            prio, typ = INFIX_OPS[name]
            if prio > maxp:
                break
            left_max = prio if typ == "yfx" else prio - 1
            if leftp > left_max:
                break
            self.next()
            right_max = prio if typ == "xfy" else prio - 1
            right = self.read_term(right_max)
            left = Compound(name, (left, right))
            leftp = prio
        return left, leftp

    def _primary(self, maxp: int) -> tuple[Term, int]:
        tok = self.next()
        kind, value = tok[0], tok[1]
        if kind == "int":
            if value > INT_MAX:
                self.err("integer out of 64-bit range", tok)
            return Integer(value), 0
        if kind == "float":
            return Float(value), 0
        if kind == "var":
            if value == "_":
                return self.fresh_anonymous(), 0
            return Variable(value), 0
        if kind == "qatom":
            if self.peek()[0] == "open" and self.peek()[4]:
                return self._compound(value, quoted=True), 0
            return Atom(value, quoted=True), 0
        if kind == "atom":
            nxt = self.peek()
            if nxt[0] == "open" and nxt[4]:
                return self._compound(value, quoted=False), 0
            if value in PREFIX_OPS:
                prio, typ = PREFIX_OPS[value]
                if value == "-" and nxt[0] in ("int", "float"):
                    self.next()
                    if nxt[0] == "int":
                        folded = -nxt[1]
                        if folded < INT_MIN:
                            self.err("integer out of 64-bit range", nxt)
                        return Integer(folded), 0
                    return Float(-nxt[1]), 0
                # A bare infix operator cannot open the operand (e.g. in
                # '- ;X' the minus is an atom, not a prefix op) unless it
                # is itself applied to arguments via an attached '('.
                operand_ok = self._starts_term(nxt) and not (
                    nxt[0] == "atom"
                    and nxt[1] in INFIX_OPS
                    and nxt[1] not in PREFIX_OPS
                    and not (
                        self.tokens[self.pos + 1][0] == "open"
                        and self.tokens[self.pos + 1][4]
                    )
                )
                if prio <= maxp and operand_ok:
                    arg = self.read_term(prio if typ == "fy" else prio - 1)
                    return Compound(value, (arg,)), prio
            return Atom(value), 0
        if kind == "open":
            inner = self.read_term(MAX_PRIORITY)
            self.expect("punct", ")")
            return inner, 0
        if kind == "punct" and value == "[":
            return self._list(), 0
        self.err(f"unexpected {self._show(tok)}", tok)

    @staticmethod
    def _starts_term(tok: tuple) -> bool:
        if tok[0] in ("int", "float", "var", "qatom", "atom", "open"):
            return True
        return tok[0] == "punct" and tok[1] == "["

    def _compound(self, functor: str, quoted: bool) -> Term:
        self.next()  # the attached '('
        args = [self.read_term(ARG_PRIORITY)]
        while True:
            tok = self.next()
            if tok[0] == "punct" and tok[1] == ",":
                args.append(self.read_term(ARG_PRIORITY))
            elif tok[0] == "punct" and tok[1] == ")":
                break
            else:
                self.err(f"expected ',' or ')', found {self._show(tok)}", tok)
        return Compound(functor, tuple(args))

    def _list(self) -> Term:
        tok = self.peek()
        if tok[0] == "punct" and tok[1] == "]":
            self.next()
            return NIL
        items = [self.read_term(ARG_PRIORITY)]
        tail: Term = NIL
        while True:
            tok = self.next()
            if tok[0] == "punct" and tok[1] == ",":
                items.append(self.read_term(ARG_PRIORITY))
            elif tok[0] == "punct" and tok[1] == "|":
                tail = self.read_term(ARG_PRIORITY)
                self.expect("punct", "]")
                break
            elif tok[0] == "punct" and tok[1] == "]":
                break
            else:
                self.err(f"expected ',', '|' or ']', found {self._show(tok)}", tok)
        return make_list(items, tail)


def parse_term(text: str) -> Term:
    """Read exactly one term followed by its end marker ('.' + layout)."""
    reader = _Reader(_tokenize(text))
    term = reader.read_term(MAX_PRIORITY)
    reader.expect("end")
    reader.expect("eof")
    return term


def parse_program(text: str) -> list[Term]:
    """Read a whole source text as a sequence of period-terminated terms."""
    reader = _Reader(_tokenize(text))
    terms = []
    while reader.peek()[0] != "eof":
        terms.append(reader.read_term(MAX_PRIORITY))
        reader.expect("end")
    return terms


# ===================================================================
# Writer
# ===================================================================

_WORD_ATOM = re.compile(r"[a-z][a-zA-Z0-9_]*\Z", re.ASCII)
_DOLLAR_ATOM = re.compile(r"\$[a-zA-Z0-9_]+\Z", re.ASCII)
_WORD_CHARS = frozenset("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_")


def atom_needs_quotes(name: str) -> bool:
    if _WORD_ATOM.match(name) or _DOLLAR_ATOM.match(name):
        return False
    if name in ("!", ";", "[]"):
        return False
    if name != "." and name and all(c in _SYMBOL_CHARS for c in name):
        return False
    return True


def _quote_atom(name: str) -> str:
    out = ["'"]
    for c in name:
        if c == "'":
            out.append("''")
        elif c == "\\":
            out.append("\\\\")
        elif c == "\n":
            out.append("\\n")
        elif c == "\t":
            out.append("\\t")
        else:
            out.append(c)
    out.append("'")
    return "".join(out)


def _emit_atom(name: str, verbatim: bool, quoted_mode: bool, functor: bool = False) -> str:
    if not quoted_mode:
        return name
    if functor and name == "[]":
        return _quote_atom(name)
    if verbatim or atom_needs_quotes(name):
        return _quote_atom(name)
    return name


# Writer tokens are (kind, text): "a" for atoms/numbers/variables and
# operators, "f" for a functor's attached '(', "g" for a grouping '(',
# "p" for other punctuation.

def _join(tokens: list[tuple[str, str]]) -> str:
    """Glue writer tokens, spacing only where lexing would merge them
    or where a grouping paren would pass for a functor application."""
    out: list[str] = []
    last_kind = ""
    last_char = ""
    for kind, text in tokens:
        if out:
            if kind == "a" and last_kind == "a":
                first = text[0]
                if (last_char in _WORD_CHARS and first in _WORD_CHARS) or (
                    last_char in _SYMBOL_CHARS and first in _SYMBOL_CHARS
                ):
                    out.append(" ")
            elif kind == "g" and last_kind == "a":
                out.append(" ")
        out.append(text)
        last_kind = kind
        last_char = text[-1]
    return "".join(out)


def _printed_priority(term: Term) -> int:
    """Priority of the spelling _write will choose for this term."""
    if isinstance(term, Compound):
        if len(term.args) == 2 and term.functor in INFIX_OPS:
            return INFIX_OPS[term.functor][0]
        if len(term.args) == 1 and term.functor in PREFIX_OPS:
            arg = term.args[0]
            if not _prefix_printable(arg):
                return 0  # printed as functor(arg)
            prio, typ = PREFIX_OPS[term.functor]
            if _printed_priority(arg) > (prio if typ == "fy" else prio - 1):
                return 0  # printed as functor(arg)
            return prio
    return 0


def _prefix_printable(arg: Term) -> bool:
    """Whether an operand may follow a prefix operator without readback
    drift: number literals would fold into the sign, and bare operator
    atoms would be taken as operators."""
    if isinstance(arg, (Integer, Float)):
        return False
    if isinstance(arg, Atom) and (arg.name in INFIX_OPS or arg.name in PREFIX_OPS):
        return False
    return True


def _is_operator_atom(term: Term) -> bool:
    return isinstance(term, Atom) and (
        term.name in INFIX_OPS or term.name in PREFIX_OPS
    )


def _write_operand(term: Term, maxp: int, out: list, quoted: bool):
    """Write an infix operand; a bare operator atom gets grouping parens
    so the reader cannot mistake it for an operator."""
    if _is_operator_atom(term):
        out.append(("g", "("))
        out.append(("a", _emit_atom(term.name, term.quoted, quoted)))
        out.append(("p", ")"))
    else:
        _write(term, maxp, out, quoted)


def _write(term: Term, maxp: int, out: list, quoted: bool):
    if isinstance(term, Atom):
        out.append(("a", _emit_atom(term.name, term.quoted, quoted)))
        return
    if isinstance(term, Integer):
        out.append(("a", str(term.value)))
        return
    if isinstance(term, Float):
        out.append(("a", repr(term.value)))
        return
    if isinstance(term, Variable):
        out.append(("a", term.name))
        return
    if not isinstance(term, Compound):
        raise TypeError(f"not a term: {term!r}")

    functor, args = term.functor, term.args
    if functor == "." and len(args) == 2:
        out.append(("p", "["))
        _write(args[0], ARG_PRIORITY, out, quoted)
        tail = args[1]
        while isinstance(tail, Compound) and tail.functor == "." and len(tail.args) == 2:
            out.append(("p", ","))
            _write(tail.args[0], ARG_PRIORITY, out, quoted)
            tail = tail.args[1]
        if tail != NIL:
            out.append(("p", "|"))
            _write(tail, ARG_PRIORITY, out, quoted)
        out.append(("p", "]"))
        return
    if len(args) == 2 and functor in INFIX_OPS:
        prio, typ = INFIX_OPS[functor]
        wrap = prio > maxp
        if wrap:
            out.append(("g", "("))
        _write_operand(args[0], prio if typ == "yfx" else prio - 1, out, quoted)
        if functor == ",":
            out.append(("p", ","))
        else:
            out.append(("a", _emit_atom(functor, False, quoted)))
        _write_operand(args[1], prio if typ == "xfy" else prio - 1, out, quoted)
        if wrap:
            out.append(("p", ")"))
        return
    if len(args) == 1 and functor in PREFIX_OPS and _prefix_printable(args[0]):
        prio, typ = PREFIX_OPS[functor]
        arg_max = prio if typ == "fy" else prio - 1
        if _printed_priority(args[0]) <= arg_max:
            out.append(("a", _emit_atom(functor, False, quoted)))
            _write(args[0], arg_max, out, quoted)
            return
        # else fall through: '- (a,b)' would re-read as a binary term,
        # so spell it as a plain application instead.
    # Plain functor application.  Covers '-'(N) on number literals too,
    # so unary minus round-trips instead of folding into the literal.
    out.append(("a", _emit_atom(functor, False, quoted, functor=True)))
    out.append(("f", "("))
    _write(args[0], ARG_PRIORITY, out, quoted)
    for arg in args[1:]:
        out.append(("p", ","))
        _write(arg, ARG_PRIORITY, out, quoted)
    out.append(("p", ")"))


def write_term(term: Term, quoted: bool = True) -> str:
    """Render a term without its end marker.

    With quoted=True (the wire form) atoms are quoted whenever needed
    and whenever flagged verbatim; quoted=False is the display form
    used by the engine's write/1, which prints atom names bare.
    """
    out: list[str] = []
    _write(term, MAX_PRIORITY, out, quoted)
    return _join(out)


# ===================================================================
# Message framing
# ===================================================================

def write_terminated(term: Term) -> str:
    """Term text plus its end marker.

    A space keeps the period from gluing onto a trailing symbolic atom
    (writing '=' as '=.' would lex back as one symbolic token).
    """
    text = write_term(term)
    if text[-1] in _SYMBOL_CHARS:
        return text + " ."
    return text + "."


def write_message(stream, term: Term):
    """Frame one term onto a binary stream: term text + '.' + newline."""
    stream.write((write_terminated(term) + "\n").encode("utf-8"))
    stream.flush()


def read_message(stream, max_bytes: Optional[int] = None) -> Term:
    """Read one framed term from a binary stream.

    Consumes bytes through the first period that sits outside quoted
    atoms and is followed by nothing but layout up to a newline.
    Raises ConnectionClosed at end of stream, MessageTooLarge past
    max_bytes, and ParseError when the framed text is not one term.
    """
    buf = bytearray()
    in_quote = False
    pending_quote = False  # saw a quote inside a quoted atom; '' stays inside

    def take() -> Optional[int]:
        b = stream.read(1)
        if not b:
            return None
        buf.extend(b)
        if max_bytes is not None and len(buf) > max_bytes:
            raise MessageTooLarge(f"message exceeds {max_bytes} bytes")
        return b[0]

    replay: Optional[int] = None
    while True:
        if replay is not None:
            c, replay = replay, None
        else:
            c = take()
        if c is None:
            raise ConnectionClosed("stream closed mid-message" if buf else "stream closed")
        if pending_quote:
            pending_quote = False
            if c == 0x27:  # doubled quote: still inside the atom
                continue
            in_quote = False
        if in_quote:
            if c == 0x5C:  # backslash escape: skip the escaped byte
                if take() is None:
                    raise ConnectionClosed("stream closed mid-message")
            elif c == 0x27:
                pending_quote = True
            continue
        if c == 0x27:
            in_quote = True
            continue
        if c != 0x2E:  # '.'
            continue
        # Period outside quotes: a terminator only if what follows is
        # layout running into a newline.
        while True:
            c = take()
            if c is None:
                raise ConnectionClosed("stream closed mid-message")
            if c == 0x0A:
                try:
                    text = buf.decode("utf-8")
                except UnicodeDecodeError:
                    raise ParseError("message is not valid UTF-8", SourceSpan(1, 1))
                try:
                    return parse_term(text)
                except ParseError as exc:
                    exc.text = text
                    raise
            if c not in (0x20, 0x09, 0x0D):
                replay = c  # ordinary '.' inside the term; keep scanning
                break
