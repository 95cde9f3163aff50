"""Client library: a blocking connection, typed command wrappers, and a
remote solution iterator.

The connection mirrors the server's session state machine and refuses
to send a request the server would reject as out of sequence, so a
misused client fails locally with UsageError instead of burning a round
trip.  Replies outside the response grammar raise ProtocolViolation
with the offending text attached; permission and engine failures raise
RemoteError carrying the error term.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Union

from .engine import PredicateKey
from .protocol import (
    AddFile,
    CaptureOutput,
    Comment,
    Delete,
    DeleteAll,
    Detail,
    Eop,
    Error,
    Execute,
    List,
    LoggedIn,
    Login,
    Logout,
    Next,
    No,
    Output,
    Ping,
    POST_LOGIN_COMMANDS,
    PreLogin,
    ReleaseOutput,
    Request,
    SetFlag,
    Status,
    Uncomment,
    Ver,
    Yes,
    YesPayload,
    command_name,
    decode_response,
    encode_request,
    legal,
)
from .terms import (
    Atom,
    Compound,
    ParseError,
    Term,
    list_items,
    parse_program,
    parse_term,
    read_message,
    write_terminated,
)

END_OF_FILE = Atom("end_of_file")


class UsageError(Exception):
    """The caller tried something illegal in the current session mode."""


class ProtocolViolation(Exception):
    """The server answered outside the response grammar."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class RemoteError(Exception):
    """The server answered error(Message)."""

    def __init__(self, message: Term):
        super().__init__(write_terminated(message))
        self.message = message

    @property
    def reason(self) -> str:
        return self.message.name if isinstance(self.message, Atom) else ""


@dataclass(frozen=True)
class StatusInfo:
    session_id: Term
    user: str
    commands: tuple


def _as_term(value: Union[Term, str]) -> Term:
    if isinstance(value, str):
        return parse_term(value if value.rstrip().endswith(".") else value + " .")
    return value


def _as_key(pred) -> PredicateKey:
    if isinstance(pred, PredicateKey):
        return pred
    if isinstance(pred, tuple) and len(pred) == 2:
        return PredicateKey(pred[0], pred[1])
    raise UsageError(f"predicate must be (name, arity), got {pred!r}")


def _parse_bindings(payload: Term) -> dict:
    items, tail = list_items(payload)
    if tail != Atom("[]"):
        raise ProtocolViolation("bindings payload is not a proper list",
                                write_terminated(payload))
    out = {}
    for item in items:
        if (
            isinstance(item, Compound)
            and item.functor == "="
            and len(item.args) == 2
            and isinstance(item.args[0], Atom)
        ):
            out[item.args[0].name] = item.args[1]
        else:
            raise ProtocolViolation("malformed binding element",
                                    write_terminated(item))
    return out


class Connection:
    """One protocol session over one TCP connection.

    Strictly request/response; not thread-safe by design.  Captured
    output frames go to output_callback when set, otherwise pile up in
    pending_output.
    """

    def __init__(
        self,
        host: str,
        port: int,
        timeout: float = 30.0,
        output_callback: Optional[Callable[[str], None]] = None,
    ):
        self.output_callback = output_callback
        self.pending_output: list[str] = []
        self.sent_log: Optional[list[bytes]] = None
        self._mode = PreLogin()
        self._raw: list[Term] = []
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(timeout)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")

    # ---- plumbing --------------------------------------------------

    def record_requests(self, into: list):
        """Collect the exact bytes of every request sent from now on."""
        self.sent_log = into

    def take_raw(self) -> list[str]:
        """Terminated text of every frame in the last exchange."""
        lines = [write_terminated(t) for t in self._raw]
        self._raw.clear()
        return lines

    def close(self):
        # close the makefile handles too, they hold a reference to the
        # socket and would keep the connection open server-side
        for f in (self._rfile, self._wfile, self._sock):
            try:
                f.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def logged_in(self) -> bool:
        return isinstance(self._mode, LoggedIn)

    @property
    def query_open(self) -> bool:
        return isinstance(self._mode, LoggedIn) and self._mode.query is not None

    def _send_term(self, term: Term):
        data = (write_terminated(term) + "\n").encode("utf-8")
        if self.sent_log is not None:
            self.sent_log.append(data)
        self._wfile.write(data)
        self._wfile.flush()

    def _read_frame(self):
        try:
            term = read_message(self._rfile)
        except ParseError as exc:
            raise ProtocolViolation(
                f"unparseable response: {exc}", exc.text
            ) from exc
        self._raw.append(term)
        resp = decode_response(term)
        if resp is None:
            raise ProtocolViolation("response outside grammar",
                                    write_terminated(term))
        if isinstance(resp, Output):
            if self.output_callback is not None:
                self.output_callback(resp.text)
            else:
                self.pending_output.append(resp.text)
            return None
        return resp

    def _read_terminal(self):
        while True:
            resp = self._read_frame()
            if resp is not None:
                return resp

    def _transition(self, req: Request, resp):
        name = command_name(req)
        ok = not isinstance(resp, Error)
        mode = self._mode
        if name == "login" and isinstance(resp, Yes):
            self._mode = LoggedIn(
                req.session_id, req.user, frozenset(POST_LOGIN_COMMANDS)
            )
        elif name == "logout" and ok:
            self._mode = PreLogin()
        elif name == "execute":
            self._mode = replace(
                mode, query=True if isinstance(resp, YesPayload) else None
            )
        elif name == "next" and not isinstance(resp, YesPayload):
            self._mode = replace(mode, query=None)
        elif name == "eop" and ok:
            self._mode = replace(mode, query=None)
        elif name == "capture_output" and ok:
            self._mode = replace(mode, capturing=True)
        elif name == "release_output" and ok:
            self._mode = replace(mode, capturing=False)

    def _exchange(self, req: Request):
        if not legal(self._mode, req):
            raise UsageError(
                f"{command_name(req)} is not legal "
                f"{'before login' if not self.logged_in else 'right now'}"
            )
        self._raw.clear()
        self._send_term(encode_request(req))
        resp = self._read_terminal()
        self._transition(req, resp)
        return resp

    def _simple(self, req: Request):
        """Exchange expecting yes; error becomes RemoteError."""
        resp = self._exchange(req)
        if isinstance(resp, Yes):
            return
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        raise ProtocolViolation(f"unexpected reply to {command_name(req)}",
                                "; ".join(self.take_raw()))

    # ---- commands --------------------------------------------------

    def ver(self) -> str:
        resp = self._exchange(Ver())
        if isinstance(resp, YesPayload) and isinstance(resp.payload, Atom):
            return resp.payload.name
        raise ProtocolViolation("unexpected reply to ver")

    def ping(self) -> str:
        resp = self._exchange(Ping())
        if isinstance(resp, YesPayload) and isinstance(resp.payload, Atom):
            return resp.payload.name
        raise ProtocolViolation("unexpected reply to ping")

    def status(self) -> Optional[StatusInfo]:
        resp = self._exchange(Status())
        if isinstance(resp, No):
            return None
        if isinstance(resp, YesPayload):
            items, tail = list_items(resp.payload)
            if tail == Atom("[]") and len(items) == 2:
                who, commands_term = items
                names, cmd_tail = list_items(commands_term)
                if (
                    isinstance(who, Compound)
                    and who.functor == "/"
                    and len(who.args) == 2
                    and isinstance(who.args[1], Atom)
                    and cmd_tail == Atom("[]")
                    and all(isinstance(n, Atom) for n in names)
                ):
                    return StatusInfo(
                        who.args[0],
                        who.args[1].name,
                        tuple(n.name for n in names),
                    )
        raise ProtocolViolation("unexpected reply to status")

    def login(self, session_id: Union[Term, str], user: str, password: str) -> bool:
        sid = Atom(session_id) if isinstance(session_id, str) else session_id
        resp = self._exchange(Login(sid, user, password))
        if isinstance(resp, Yes):
            return True
        if isinstance(resp, Error) and resp.message == Atom("access denied"):
            return False
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        raise ProtocolViolation("unexpected reply to login")

    def logout(self):
        self._simple(Logout())

    def list_predicates(self) -> list:
        resp = self._exchange(List())
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        if isinstance(resp, YesPayload):
            items, tail = list_items(resp.payload)
            if tail == Atom("[]"):
                out = []
                for item in items:
                    if (
                        isinstance(item, Compound)
                        and item.functor == "/"
                        and len(item.args) == 2
                        and isinstance(item.args[0], Atom)
                    ):
                        out.append((item.args[0].name, item.args[1].value))
                    else:
                        raise ProtocolViolation("malformed list element",
                                                write_terminated(item))
                return out
        raise ProtocolViolation("unexpected reply to list")

    def capture_output(self):
        self._simple(CaptureOutput())

    def release_output(self):
        self._simple(ReleaseOutput())

    def execute(self, query: Union[Term, str]) -> "RemoteQuery":
        resp = self._exchange(Execute(_as_term(query)))
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        if isinstance(resp, No):
            return RemoteQuery(self, None, spent=True)
        if isinstance(resp, YesPayload):
            return RemoteQuery(self, _parse_bindings(resp.payload))
        raise ProtocolViolation("unexpected reply to execute")

    def execute_all(self, query: Union[Term, str]) -> list:
        """Collect every solution, always leaving the query closed."""
        q = self.execute(query)
        try:
            return list(q)
        finally:
            q.close()

    def add_file(self, clauses: Iterable[Term]):
        req = AddFile()
        if not legal(self._mode, req):
            raise UsageError("add_file is not legal right now")
        self._raw.clear()
        self._send_term(encode_request(req))
        for clause in clauses:
            self._send_term(clause)
        self._send_term(END_OF_FILE)
        resp = self._read_terminal()
        if isinstance(resp, Yes):
            return
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        raise ProtocolViolation("unexpected reply to add_file")

    def upload_text(self, source: str):
        """Parse program text locally; nothing is sent on a parse error."""
        self.add_file(parse_program(source))

    def comment(self, pred, text: str):
        self._simple(Comment(_as_key(pred), text))

    def uncomment(self, pred):
        self._simple(Uncomment(_as_key(pred)))

    def detail(self, pred) -> Optional[str]:
        resp = self._exchange(Detail(_as_key(pred)))
        if isinstance(resp, No):
            return None
        if isinstance(resp, YesPayload) and isinstance(resp.payload, Atom):
            return resp.payload.name
        if isinstance(resp, Error):
            raise RemoteError(resp.message)
        raise ProtocolViolation("unexpected reply to detail")

    def set_flag(self, flag: str, old: Union[Term, str], new: Union[Term, str]):
        self._simple(SetFlag(flag, _as_term(old), _as_term(new)))

    def delete(self, spec: Union[Term, str]):
        self._simple(Delete(_as_term(spec)))

    def delete_all(self):
        self._simple(DeleteAll())


class RemoteQuery:
    """Iterator over one remote query's solutions.

    next() returns a bindings dict or None once exhausted; close() sends
    eop exactly once unless the query already ended by itself.
    """

    def __init__(self, conn: Connection, first: Optional[dict], spent: bool = False):
        self._conn = conn
        self._buffered = first
        self._state = "done" if spent else "open"

    def next(self) -> Optional[dict]:
        if self._buffered is not None:
            sol, self._buffered = self._buffered, None
            return sol
        if self._state != "open":
            return None
        resp = self._conn._exchange(Next())
        if isinstance(resp, YesPayload):
            return _parse_bindings(resp.payload)
        if isinstance(resp, No):
            self._state = "done"
            return None
        if isinstance(resp, Error):
            self._state = "done"
            raise RemoteError(resp.message)
        raise ProtocolViolation("unexpected reply to next")

    def close(self):
        if self._state == "open":
            self._state = "closed"
            resp = self._conn._exchange(Eop())
            if isinstance(resp, Error):
                raise RemoteError(resp.message)

    def __iter__(self):
        return self

    def __next__(self):
        sol = self.next()
        if sol is None:
            raise StopIteration
        return sol
