"""Typed request/response vocabulary and the session state machine.

Everything here is pure: terms in, values out.  The server owns the
sockets and the knowledge base; this module only says what a message
means and whether it is allowed right now.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .engine import PredicateKey
from .terms import Atom, Compound, Integer, Term


# ===================================================================
# Requests
# ===================================================================

@dataclass(frozen=True)
class Ver:
    pass


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Status:
    pass


@dataclass(frozen=True)
class Login:
    session_id: Term
    user: str
    password: str


@dataclass(frozen=True)
class Logout:
    pass


@dataclass(frozen=True)
class List:
    pass


@dataclass(frozen=True)
class CaptureOutput:
    pass


@dataclass(frozen=True)
class ReleaseOutput:
    pass


@dataclass(frozen=True)
class Execute:
    query: Term


@dataclass(frozen=True)
class Next:
    pass


@dataclass(frozen=True)
class Eop:
    pass


@dataclass(frozen=True)
class AddFile:
    pass


@dataclass(frozen=True)
class Comment:
    pred: PredicateKey
    text: str


@dataclass(frozen=True)
class Uncomment:
    pred: PredicateKey


@dataclass(frozen=True)
class Detail:
    pred: PredicateKey


@dataclass(frozen=True)
class SetFlag:
    flag: str
    old: Term
    new: Term


@dataclass(frozen=True)
class Delete:
    spec: Term


@dataclass(frozen=True)
class DeleteAll:
    pass


@dataclass(frozen=True)
class UnknownRequest:
    term: Term


Request = Union[
    Ver, Ping, Status, Login, Logout, List, CaptureOutput, ReleaseOutput,
    Execute, Next, Eop, AddFile, Comment, Uncomment, Detail, SetFlag,
    Delete, DeleteAll, UnknownRequest,
]

_COMMAND_NAMES = {
    Ver: "ver",
    Ping: "ping",
    Status: "status",
    Login: "login",
    Logout: "logout",
    List: "list",
    CaptureOutput: "capture_output",
    ReleaseOutput: "release_output",
    Execute: "execute",
    Next: "next",
    Eop: "eop",
    AddFile: "add_file",
    Comment: "comment",
    Uncomment: "uncomment",
    Detail: "detail",
    SetFlag: "set_flag",
    Delete: "delete",
    DeleteAll: "delete_all",
}

# Commands a user record may grant.  delete_all is the canonical
# permission name for both wire spellings.
POST_LOGIN_COMMANDS = frozenset(
    name for name in _COMMAND_NAMES.values() if name != "login"
) - {"ver", "ping", "status", "logout"}

# Always available once the connection exists.
PRE_LOGIN_COMMANDS = frozenset({"ver", "ping", "status", "login"})

# Granted to every logged-in user regardless of policy.
IMPLICIT_COMMANDS = frozenset({"ver", "ping", "status", "logout"})


def command_name(req: Request) -> str:
    if isinstance(req, UnknownRequest):
        return "unknown"
    return _COMMAND_NAMES[type(req)]


_ATOM_REQUESTS = {
    "ver": Ver(),
    "ping": Ping(),
    "status": Status(),
    "logout": Logout(),
    "list": List(),
    "capture_output": CaptureOutput(),
    "release_output": ReleaseOutput(),
    "next": Next(),
    "eop": Eop(),
    "add_file": AddFile(),
    "deleteall": DeleteAll(),
    "delete_all": DeleteAll(),
}


def _pred_key(term: Term) -> Optional[PredicateKey]:
    if (
        isinstance(term, Compound)
        and term.functor == "/"
        and len(term.args) == 2
        and isinstance(term.args[0], Atom)
        and isinstance(term.args[1], Integer)
        and term.args[1].value >= 0
    ):
        return PredicateKey(term.args[0].name, term.args[1].value)
    return None


def decode_request(term: Term) -> Request:
    """Total: anything that is not a known command shape becomes
    UnknownRequest carrying the raw term."""
    if isinstance(term, Atom):
        found = _ATOM_REQUESTS.get(term.name)
        if found is not None:
            return found
        return UnknownRequest(term)
    if not isinstance(term, Compound):
        return UnknownRequest(term)

    f, args = term.functor, term.args
    n = len(args)
    if f == "login" and n == 3:
        sid, user, password = args
        if isinstance(user, Atom) and isinstance(password, Atom):
            return Login(sid, user.name, password.name)
    elif f == "execute" and n == 1:
        return Execute(args[0])
    elif f in ("comment", "$comment") and n == 2:
        key = _pred_key(args[0])
        if key is not None and isinstance(args[1], Atom):
            return Comment(key, args[1].name)
    elif f in ("uncomment", "$uncomment") and n == 1:
        key = _pred_key(args[0])
        if key is not None:
            return Uncomment(key)
    elif f == "detail" and n == 1:
        key = _pred_key(args[0])
        if key is not None:
            return Detail(key)
    elif f == "set_flag" and n == 3:
        if isinstance(args[0], Atom):
            return SetFlag(args[0].name, args[1], args[2])
    elif f == "delete" and n == 1:
        return Delete(args[0])
    return UnknownRequest(term)


def _indicator(key: PredicateKey) -> Term:
    return Compound("/", (Atom(key.name), Integer(key.arity)))


def encode_request(req: Request) -> Term:
    """The wire term a well-behaved client sends for this request."""
    if isinstance(req, UnknownRequest):
        return req.term
    name = command_name(req)
    if isinstance(req, Login):
        return Compound("login", (req.session_id, Atom(req.user), Atom(req.password)))
    if isinstance(req, Execute):
        return Compound("execute", (req.query,))
    if isinstance(req, Comment):
        return Compound("comment", (_indicator(req.pred), Atom(req.text)))
    if isinstance(req, Uncomment):
        return Compound("uncomment", (_indicator(req.pred),))
    if isinstance(req, Detail):
        return Compound("detail", (_indicator(req.pred),))
    if isinstance(req, SetFlag):
        return Compound("set_flag", (Atom(req.flag), req.old, req.new))
    if isinstance(req, Delete):
        return Compound("delete", (req.spec,))
    if isinstance(req, DeleteAll):
        return Atom("deleteall")
    return Atom(name)


# ===================================================================
# Responses
# ===================================================================

@dataclass(frozen=True)
class Yes:
    pass


@dataclass(frozen=True)
class YesPayload:
    payload: Term


@dataclass(frozen=True)
class No:
    pass


@dataclass(frozen=True)
class Error:
    message: Term


@dataclass(frozen=True)
class Output:
    text: str


Response = Union[Yes, YesPayload, No, Error, Output]


def encode_response(r: Response) -> Term:
    if isinstance(r, Yes):
        return Atom("yes")
    if isinstance(r, YesPayload):
        return Compound("yes", (r.payload,))
    if isinstance(r, No):
        return Atom("no")
    if isinstance(r, Error):
        return Compound("error", (r.message,))
    return Compound("output", (Atom(r.text),))


def decode_response(term: Term) -> Optional[Response]:
    """None means the term is outside the response grammar."""
    if isinstance(term, Atom):
        if term.name == "yes":
            return Yes()
        if term.name == "no":
            return No()
        return None
    if isinstance(term, Compound) and len(term.args) == 1:
        if term.functor == "yes":
            return YesPayload(term.args[0])
        if term.functor == "error":
            return Error(term.args[0])
        if term.functor == "output" and isinstance(term.args[0], Atom):
            return Output(term.args[0].name)
    return None


# ===================================================================
# Session modes
# ===================================================================

@dataclass(frozen=True)
class PreLogin:
    pass


@dataclass(frozen=True)
class LoggedIn:
    session_id: Term
    user: str
    permissions: frozenset
    capturing: bool = False
    query: object = field(default=None, compare=False)
    uploading: bool = False


SessionMode = Union[PreLogin, LoggedIn]


def legal(mode: SessionMode, req: Request) -> bool:
    """Is this request acceptable in this mode?  Permission checks are
    separate; this is pure sequencing."""
    if isinstance(req, UnknownRequest):
        return False
    name = command_name(req)
    if isinstance(mode, PreLogin):
        return name in PRE_LOGIN_COMMANDS
    if mode.uploading:
        return False  # mid-upload bytes are clauses, not commands
    if name == "login":
        return False
    if name in ("next", "eop"):
        return mode.query is not None
    if name == "execute":
        return mode.query is None
    return True


def step(mode: SessionMode, req: Request):
    """(intent, next mode).  next mode is None when the outcome depends
    on the handler (login, execute, next); otherwise the transition is
    unconditional given that the request was legal."""
    name = command_name(req)
    if name in ("login", "execute", "next"):
        return name, None
    if name == "logout":
        return name, PreLogin()
    if isinstance(mode, LoggedIn):
        if name == "capture_output":
            return name, replace(mode, capturing=True)
        if name == "release_output":
            return name, replace(mode, capturing=False)
        if name == "eop":
            return name, replace(mode, query=None)
        if name == "add_file":
            return name, replace(mode, uploading=True)
    return name, mode
