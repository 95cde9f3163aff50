"""Resolution engine and clause store.

A deliberately small Prolog: depth-first, left-to-right SLD resolution
with chronological backtracking, clause-order search, and a cut that is
local to the clause it appears in.  The builtin set has no file or OS
access at all; what is not implemented cannot be abused remotely.

Queries run against a snapshot of the clause store taken when the query
starts (the logical update view), so concurrent consults and deletes
never disturb an iteration in flight.  Every query carries a step
budget; runaway recursion surfaces as a resource_limit error instead of
a hung session.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from .terms import (
    INT_MAX,
    INT_MIN,
    TRUE,
    Atom,
    Compound,
    Float,
    Integer,
    Term,
    Variable,
    list_items,
    term_variables,
    variant,
    write_term,
)


class EngineError(Exception):
    """A query-level failure with a protocol-visible reason atom.

    Reasons: unknown_predicate, type_error, resource_limit,
    permission_error, domain_error, old_mismatch, unknown_flag.
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class PredicateKey(NamedTuple):
    name: str
    arity: int

    def __str__(self):
        return f"{self.name}/{self.arity}"


@dataclass(frozen=True)
class Clause:
    head: Term
    body: Term = TRUE

    def as_term(self) -> Term:
        if self.body == TRUE:
            return self.head
        return Compound(":-", (self.head, self.body))


def clause_from_term(term: Term) -> Clause:
    """Split a stored-program term into head and body, validating shape."""
    if isinstance(term, Compound) and term.functor == ":-" and len(term.args) == 2:
        head, body = term.args
    else:
        head, body = term, TRUE
    if not isinstance(head, (Atom, Compound)):
        raise EngineError("type_error", "clause head must be callable")
    if not isinstance(body, (Atom, Compound, Variable)):
        raise EngineError("type_error", "clause body must be a goal")
    return Clause(head, body)


def clause_key(clause: Clause) -> PredicateKey:
    head = clause.head
    if isinstance(head, Atom):
        return PredicateKey(head.name, 0)
    return PredicateKey(head.functor, len(head.args))


# ===================================================================
# Runtime representation
# ===================================================================
# Bound variables are mutable cells with an undo trail; pure Variable
# leaves never appear inside a running query.  Clause templates store
# _Slot markers so activation is a structure copy plus n fresh cells.

class _Cell:
    __slots__ = ("ref",)

    def __init__(self):
        self.ref = None


class _Slot:
    __slots__ = ("index",)

    def __init__(self, index: int):
        self.index = index


def _deref(t):
    while type(t) is _Cell:
        r = t.ref
        if r is None:
            return t
        t = r
    return t


def _intake(term: Term, cells: dict):
    """Copy a pure term, replacing each Variable with a shared cell."""
    tt = type(term)
    if tt is Variable:
        cell = cells.get(term.name)
        if cell is None:
            cell = _Cell()
            cells[term.name] = cell
        return cell
    if tt is Compound:
        return Compound(term.functor, tuple(_intake(a, cells) for a in term.args))
    return term


def _compile(term: Term, slots: dict):
    if isinstance(term, Variable):
        slot = slots.get(term.name)
        if slot is None:
            slot = _Slot(len(slots))
            slots[term.name] = slot
        return slot
    if isinstance(term, Compound):
        return Compound(term.functor, tuple(_compile(a, slots) for a in term.args))
    return term


def _instantiate(tmpl, cells):
    tt = type(tmpl)
    if tt is _Slot:
        return cells[tmpl.index]
    if tt is Compound:
        return Compound(tmpl.functor, tuple(_instantiate(a, cells) for a in tmpl.args))
    return tmpl


class _Code(NamedTuple):
    """One clause, ready to activate."""
    head: object
    body: object
    nvars: int


def _compile_clause(clause: Clause) -> _Code:
    slots: dict = {}
    head = _compile(clause.head, slots)
    body = _compile(clause.body, slots)
    return _Code(head, body, len(slots))


def _occurs(cell, term) -> bool:
    stack = [term]
    while stack:
        t = _deref(stack.pop())
        if t is cell:
            return True
        if type(t) is Compound:
            stack.extend(t.args)
    return False


def _unify(a, b, trail, occurs_check: bool) -> bool:
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        x = _deref(x)
        y = _deref(y)
        if x is y:
            continue
        tx = type(x)
        ty = type(y)
        if tx is _Cell:
            if occurs_check and _occurs(x, y):
                return False
            x.ref = y
            trail.append(x)
            continue
        if ty is _Cell:
            if occurs_check and _occurs(y, x):
                return False
            y.ref = x
            trail.append(y)
            continue
        if tx is not ty:
            return False
        if tx is Atom:
            if x.name != y.name:
                return False
        elif tx is Compound:
            if x.functor != y.functor or len(x.args) != len(y.args):
                return False
            stack.extend(zip(x.args, y.args))
        elif x != y:  # Integer / Float by value, same type only
            return False
    return True


def _undo(trail, mark):
    while len(trail) > mark:
        trail.pop().ref = None


def _resolve(t, memo: dict, counter: list):
    """Runtime structure back to a pure term; unbound cells become
    fresh variables, consistently within one call."""
    t = _deref(t)
    tt = type(t)
    if tt is _Cell:
        var = memo.get(id(t))
        if var is None:
            counter[0] += 1
            var = Variable(f"_G{counter[0]}")
            memo[id(t)] = var
        return var
    if tt is Compound:
        return Compound(t.functor, tuple(_resolve(a, memo, counter) for a in t.args))
    return t


def unify(a: Term, b: Term, occurs_check: bool = False) -> Optional[dict[str, Term]]:
    """Most general unifier of two pure terms, or None.

    The result maps variable names to pure terms; variables that stay
    free and unaliased are left out.
    """
    cells: dict = {}
    ra = _intake(a, cells)
    rb = _intake(b, cells)
    trail: list = []
    if not _unify(ra, rb, trail, occurs_check):
        return None
    memo: dict = {}
    counter = [0]
    # Seed free query variables with their own names so X = Y reads back
    # in terms of the query's vocabulary.
    for name, cell in cells.items():
        target = _deref(cell)
        if type(target) is _Cell and id(target) not in memo:
            memo[id(target)] = Variable(name)
    out: dict[str, Term] = {}
    try:
        for name, cell in cells.items():
            value = _resolve(cell, memo, counter)
            if not (isinstance(value, Variable) and value.name == name):
                out[name] = value
    except RecursionError:
        # Rational-tree bindings exist without the occurs check; there
        # is no finite term to hand back.
        raise EngineError("resource_limit", "term depth") from None
    return out


# ===================================================================
# Arithmetic
# ===================================================================

def _check_int(v: int):
    if v < INT_MIN or v > INT_MAX:
        raise EngineError("type_error", "integer overflow")
    return v


def _check_float(v: float):
    if v != v or v in (float("inf"), float("-inf")):
        raise EngineError("type_error", "float overflow")
    return v


def _eval_arith(t):
    t = _deref(t)
    tt = type(t)
    if tt is Integer:
        return t.value
    if tt is Float:
        return t.value
    if tt is _Cell:
        raise EngineError("type_error", "unbound variable in arithmetic")
    if tt is Compound:
        f, args = t.functor, t.args
        if len(args) == 2:
            a = _eval_arith(args[0])
            b = _eval_arith(args[1])
            if f == "+":
                r = a + b
            elif f == "-":
                r = a - b
            elif f == "*":
                r = a * b
            elif f == "/":
                if b == 0:
                    raise EngineError("type_error", "division by zero")
                if isinstance(a, int) and isinstance(b, int):
                    r = a // b if a % b == 0 else a / b
                else:
                    r = a / b
            elif f == "mod":
                if b == 0:
                    raise EngineError("type_error", "division by zero")
                if not (isinstance(a, int) and isinstance(b, int)):
                    raise EngineError("type_error", "mod needs integers")
                r = a % b
            else:
                raise EngineError("type_error", f"unknown function {f}/2")
            return _check_int(r) if isinstance(r, int) else _check_float(r)
        if len(args) == 1 and f == "-":
            a = _eval_arith(args[0])
            return _check_int(-a) if isinstance(a, int) else _check_float(-a)
        raise EngineError("type_error", f"unknown function {f}/{len(args)}")
    raise EngineError("type_error", "not a number")


def _arith_value(v) -> Term:
    return Integer(v) if isinstance(v, int) else Float(v)


# ===================================================================
# Knowledge base
# ===================================================================

BUILTIN_COMMENTS: dict[PredicateKey, str] = {
    PredicateKey("true", 0): "always succeeds",
    PredicateKey("fail", 0): "always fails",
    PredicateKey(",", 2): "conjunction of two goals",
    PredicateKey(";", 2): "disjunction; with -> an if-then-else",
    PredicateKey("->", 2): "if-then, committing to the first proof of the condition",
    PredicateKey("!", 0): "cut: discard choice points of the current clause",
    PredicateKey("=", 2): "unify two terms",
    PredicateKey("\\=", 2): "succeeds when two terms do not unify",
    PredicateKey("is", 2): "evaluate an arithmetic expression and unify the result",
    PredicateKey("=:=", 2): "arithmetic equality",
    PredicateKey("=\\=", 2): "arithmetic inequality",
    PredicateKey("<", 2): "arithmetic less-than",
    PredicateKey(">", 2): "arithmetic greater-than",
    PredicateKey("=<", 2): "arithmetic at-most",
    PredicateKey(">=", 2): "arithmetic at-least",
    PredicateKey("var", 1): "succeeds on an unbound variable",
    PredicateKey("nonvar", 1): "succeeds on anything but an unbound variable",
    PredicateKey("atom", 1): "succeeds on an atom",
    PredicateKey("number", 1): "succeeds on an integer or float",
    PredicateKey("write", 1): "print a term to the query's output sink",
    PredicateKey("nl", 0): "print a newline to the query's output sink",
}

BUILTIN_KEYS = frozenset(BUILTIN_COMMENTS)

FLAG_DEFAULTS: dict[str, Term] = {
    "occurs_check": Atom("false"),
    "depth_limit": Integer(1_000_000),
    "unknown": Atom("error"),
}


@dataclass
class PredicateEntry:
    key: PredicateKey
    clauses: tuple = ()
    code: tuple = ()
    comment: Optional[str] = None
    origin: str = "uploaded"  # or "builtin"


class KnowledgeBase:
    """Shared clause store plus engine flags.

    All mutation and snapshot reads go through one lock; snapshots are
    shallow (immutable clause tuples), so queries hold the lock only
    for the blink it takes to copy the entry map.
    """

    def __init__(self, flag_overrides: Optional[dict[str, Term]] = None):
        self._lock = threading.Lock()
        self._entries: dict[PredicateKey, PredicateEntry] = {}
        for key, note in BUILTIN_COMMENTS.items():
            self._entries[key] = PredicateEntry(key, comment=note, origin="builtin")
        self.flags: dict[str, Term] = dict(FLAG_DEFAULTS)
        if flag_overrides:
            for name, value in flag_overrides.items():
                self._validate_flag(name, value)
                self.flags[name] = value

    # ---- consult / delete ----------------------------------------

    def consult_clauses(self, clauses: list[Clause]) -> int:
        """Append clauses in order; all-or-nothing on error."""
        prepared = []
        try:
            for clause in clauses:
                key = clause_key(clause)
                if key in BUILTIN_KEYS:
                    raise EngineError("permission_error", f"{key} is a builtin")
                prepared.append((key, clause, _compile_clause(clause)))
        except RecursionError:
            raise EngineError("resource_limit", "clause too deep") from None
        with self._lock:
            for key, clause, code in prepared:
                entry = self._entries.get(key)
                if entry is None:
                    entry = PredicateEntry(key)
                    self._entries[key] = entry
                entry.clauses = entry.clauses + (clause,)
                entry.code = entry.code + (code,)
        return len(prepared)

    def delete_clauses(self, spec: Term) -> int:
        """Remove predicates (Name/Arity) or single clauses (by variant).

        spec is a proper list; validation happens before any removal so
        a bad element leaves the store untouched.
        """
        items, tail = list_items(spec)
        if tail != Atom("[]"):
            raise EngineError("type_error", "delete spec must be a proper list")
        plan: list[tuple[str, object]] = []
        for item in items:
            if (
                isinstance(item, Compound)
                and item.functor == "/"
                and len(item.args) == 2
                and isinstance(item.args[0], Atom)
                and isinstance(item.args[1], Integer)
            ):
                key = PredicateKey(item.args[0].name, item.args[1].value)
                if key in BUILTIN_KEYS:
                    raise EngineError("permission_error", f"{key} is a builtin")
                plan.append(("predicate", key))
            else:
                clause = clause_from_term(item)
                key = clause_key(clause)
                if key in BUILTIN_KEYS:
                    raise EngineError("permission_error", f"{key} is a builtin")
                plan.append(("clause", (key, clause)))
        removed = 0
        with self._lock:
            for kind, payload in plan:
                if kind == "predicate":
                    entry = self._entries.pop(payload, None)
                    if entry is not None:
                        removed += len(entry.clauses)
                else:
                    key, wanted = payload
                    entry = self._entries.get(key)
                    if entry is None:
                        continue
                    keep_c, keep_k = [], []
                    for clause, code in zip(entry.clauses, entry.code):
                        if variant(clause.as_term(), wanted.as_term()):
                            removed += 1
                        else:
                            keep_c.append(clause)
                            keep_k.append(code)
                    entry.clauses = tuple(keep_c)
                    entry.code = tuple(keep_k)
        return removed

    def delete_all(self) -> int:
        """Drop every uploaded predicate; builtins and flags survive."""
        with self._lock:
            removed = 0
            for key in [k for k, e in self._entries.items() if e.origin == "uploaded"]:
                removed += len(self._entries[key].clauses)
                del self._entries[key]
            return removed

    def list_predicates(self) -> list[tuple[PredicateKey, str]]:
        with self._lock:
            pairs = [(e.key, e.origin) for e in self._entries.values()]
        return sorted(pairs)

    # ---- comments --------------------------------------------------

    def _entry_or_raise(self, key: PredicateKey) -> PredicateEntry:
        entry = self._entries.get(key)
        if entry is None:
            raise EngineError("unknown_predicate", str(key))
        return entry

    def set_comment(self, key: PredicateKey, text: str):
        with self._lock:
            self._entry_or_raise(key).comment = text

    def clear_comment(self, key: PredicateKey):
        with self._lock:
            self._entry_or_raise(key).comment = None

    def get_comment(self, key: PredicateKey) -> Optional[str]:
        with self._lock:
            return self._entry_or_raise(key).comment

    def origin_of(self, key: PredicateKey) -> Optional[str]:
        with self._lock:
            entry = self._entries.get(key)
            return entry.origin if entry else None

    # ---- flags -----------------------------------------------------

    @staticmethod
    def _validate_flag(name: str, value: Term):
        if name in ("occurs_check",):
            if value not in (Atom("true"), Atom("false")):
                raise EngineError("domain_error", f"{name} must be true or false")
        elif name == "unknown":
            if value not in (Atom("error"), Atom("fail")):
                raise EngineError("domain_error", "unknown must be error or fail")
        elif name == "depth_limit":
            if not (isinstance(value, Integer) and value.value > 0):
                raise EngineError("domain_error", "depth_limit must be a positive integer")
        else:
            raise EngineError("unknown_flag", name)

    def set_flag(self, name: str, old: Term, new: Term):
        """Compare-and-set: old must unify with the current value."""
        with self._lock:
            if name not in self.flags:
                raise EngineError("unknown_flag", name)
            current = self.flags[name]
        if unify(old, current) is None:
            raise EngineError("old_mismatch", f"{name} is {write_term(current)}")
        self._validate_flag(name, new)
        with self._lock:
            self.flags[name] = new

    def get_flag(self, name: str) -> Term:
        with self._lock:
            if name not in self.flags:
                raise EngineError("unknown_flag", name)
            return self.flags[name]

    # ---- snapshot ---------------------------------------------------

    def snapshot(self) -> tuple[dict, dict]:
        with self._lock:
            codes = {key: e.code for key, e in self._entries.items()
                     if e.origin == "uploaded"}
            flags = dict(self.flags)
        return codes, flags


# ===================================================================
# The solver
# ===================================================================

_COMMIT = object()  # marker frame: commit an if-then-else condition


class QueryIterator:
    """Pull-style solutions for one query.

    next_solution() returns a bindings dict, or None when exhausted;
    engine errors close the iterator and re-raise.  Asking again after
    close/exhaustion/error is a caller bug and raises RuntimeError.
    """

    def __init__(self, gen, steps_holder: list):
        self._gen = gen
        self._steps = steps_holder
        self.state = "open"

    @property
    def steps_used(self) -> int:
        return self._steps[0]

    def next_solution(self) -> Optional[dict[str, Term]]:
        if self.state != "open":
            raise RuntimeError(f"query is {self.state}")
        try:
            return next(self._gen)
        except StopIteration:
            self.state = "exhausted"
            return None
        except EngineError:
            self.state = "error"
            self._gen.close()
            raise
        except RecursionError:
            # Cyclic bindings under occurs_check=false can defeat the
            # answer printer; surface it as a budget problem.
            self.state = "error"
            self._gen.close()
            raise EngineError("resource_limit", "term depth")

    def close(self):
        """Release the query.  Safe to call at any point, any number
        of times; only a later next_solution() is an error."""
        if self.state == "open":
            self._gen.close()
            self.state = "closed"

    def __iter__(self):
        return self

    def __next__(self):
        value = self.next_solution()
        if value is None:
            raise StopIteration
        return value


def solve(
    kb: KnowledgeBase,
    goal: Term,
    output: Optional[Callable[[str], None]] = None,
) -> QueryIterator:
    """Start a query.  All failures, including a malformed goal, are
    reported from next_solution, never here."""
    codes, flags = kb.snapshot()
    steps_holder = [0]
    gen = _run(codes, flags, goal, output, steps_holder)
    return QueryIterator(gen, steps_holder)


def _run(codes, flags, goal: Term, output, steps_holder):
    limit = flags["depth_limit"].value
    occurs_check = flags["occurs_check"] == Atom("true")
    unknown_errors = flags["unknown"] == Atom("error")

    cells: dict = {}
    root = _intake(goal, cells)
    query_vars = [
        (v.name, cells[v.name])
        for v in term_variables(goal)
        if not v.anonymous
    ]

    goals = (root, 0, None)  # (goal, cut parent, rest)
    cps: list = []           # choice points
    trail: list = []
    steps = 0

    def extract():
        memo: dict = {}
        counter = [0]
        return {name: _resolve(cell, memo, counter) for name, cell in query_vars}

    def backtrack():
        """Undo to the newest viable choice point; returns the next
        goal stack or None when the search space is spent."""
        while cps:
            cp = cps[-1]
            _undo(trail, cp[5])
            if cp[0] == "c":
                _, called, clause_codes, index, rest, _, base = cp
                while index < len(clause_codes):
                    code = clause_codes[index]
                    index += 1
                    if code.nvars:
                        fresh = [_Cell() for _ in range(code.nvars)]
                        head = _instantiate(code.head, fresh)
                        body = _instantiate(code.body, fresh)
                    else:
                        head, body = code.head, code.body
                    if _unify(called, head, trail, occurs_check):
                        cp[3] = index
                        if index >= len(clause_codes):
                            cps.pop()
                        if body is TRUE or body == TRUE:
                            return (rest,)
                        return ((body, base, rest),)
                    _undo(trail, cp[5])
                cps.pop()
            else:  # "d": a disjunction alternative
                _, alt, cutp, rest, _, _ = cp
                cps.pop()
                return ((alt, cutp, rest),)
        return None

    while True:
        if goals is None:
            steps_holder[0] = steps
            yield extract()
            nxt = backtrack()
            if nxt is None:
                return
            goals = nxt[0]
            continue

        term, cutp, rest = goals
        if term is _COMMIT:
            del cps[cutp:]
            goals = rest
            continue

        steps += 1
        if steps > limit:
            steps_holder[0] = steps
            raise EngineError("resource_limit", "step budget exhausted")

        t = term
        if type(t) is _Cell:
            t = _deref(t)
        tt = type(t)
        if tt is Atom:
            name, arity, args = t.name, 0, ()
        elif tt is Compound:
            args = t.args
            name, arity = t.functor, len(args)
        else:
            raise EngineError("type_error", "goal is not callable")

        # ---- control constructs, inlined for the hot path ----------
        if arity == 2 and name == ",":
            goals = (args[0], cutp, (args[1], cutp, rest))
            continue
        if arity == 0 and name == "true":
            goals = rest
            continue

        handled = True
        failed = False
        if arity == 2 and name == ";":
            left = _deref(args[0])
            if type(left) is Compound and left.functor == "->" and len(left.args) == 2:
                cond, then = left.args
                barrier = len(cps)
                cps.append(["d", args[1], cutp, rest, None, len(trail)])
                goals = (cond, len(cps), (_COMMIT, barrier, (then, cutp, rest)))
            else:
                cps.append(["d", args[1], cutp, rest, None, len(trail)])
                goals = (args[0], cutp, rest)
            continue
        elif arity == 2 and name == "->":
            barrier = len(cps)
            cps.append(["d", Atom("fail"), cutp, rest, None, len(trail)])
            goals = (args[0], len(cps), (_COMMIT, barrier, (args[1], cutp, rest)))
            continue
        elif arity == 0 and name == "!":
            del cps[cutp:]
            goals = rest
            continue
        elif arity == 0 and name == "fail":
            failed = True
        elif arity == 2 and name == "=":
            failed = not _unify(args[0], args[1], trail, occurs_check)
        elif arity == 2 and name == "\\=":
            mark = len(trail)
            unified = _unify(args[0], args[1], trail, occurs_check)
            _undo(trail, mark)
            failed = unified
        elif arity == 2 and name == "is":
            value = _arith_value(_eval_arith(args[1]))
            failed = not _unify(args[0], value, trail, occurs_check)
        elif arity == 2 and name in ("=:=", "=\\=", "<", ">", "=<", ">="):
            a = _eval_arith(args[0])
            b = _eval_arith(args[1])
            if name == "=:=":
                ok = a == b
            elif name == "=\\=":
                ok = a != b
            elif name == "<":
                ok = a < b
            elif name == ">":
                ok = a > b
            elif name == "=<":
                ok = a <= b
            else:
                ok = a >= b
            failed = not ok
        elif arity == 1 and name in ("var", "nonvar", "atom", "number"):
            v = _deref(args[0])
            if name == "var":
                ok = type(v) is _Cell
            elif name == "nonvar":
                ok = type(v) is not _Cell
            elif name == "atom":
                ok = type(v) is Atom
            else:
                ok = type(v) in (Integer, Float)
            failed = not ok
        elif arity == 1 and name == "write":
            if output is not None:
                output(write_term(_resolve(args[0], {}, [0]), quoted=False))
        elif arity == 0 and name == "nl":
            if output is not None:
                output("\n")
        else:
            handled = False

        if handled:
            if failed:
                nxt = backtrack()
                if nxt is None:
                    steps_holder[0] = steps
                    return
                goals = nxt[0]
            else:
                goals = rest
            continue

        # ---- a stored predicate ------------------------------------
        key = (name, arity)
        clause_codes = codes.get(key)
        if clause_codes is None:
            if key in BUILTIN_KEYS:
                raise EngineError("type_error", f"{name}/{arity} arity mismatch")
            if unknown_errors:
                raise EngineError("unknown_predicate", f"{name}/{arity}")
            clause_codes = ()
        cps.append(["c", t, clause_codes, 0, rest, len(trail), len(cps)])
        nxt = backtrack()
        if nxt is None:
            steps_holder[0] = steps
            return
        goals = nxt[0]
