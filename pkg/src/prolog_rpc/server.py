"""TCP server: authentication, permissions, dispatch, logging.

One thread per connection; every connection owns its session mode and
talks to the shared KnowledgeBase.  The session loop is strictly
read one term -> decode -> legality -> permission -> handle -> respond,
and nothing a client sends can take the process down: parse errors,
engine errors, and oversized messages all turn into error terms (the
last one also closes the offending connection).
"""

from __future__ import annotations

import argparse
import hashlib
import hmac
import os
import signal
import socketserver
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional, TextIO

from .engine import (
    EngineError,
    KnowledgeBase,
    clause_from_term,
    solve,
)
from .protocol import (
    Error,
    IMPLICIT_COMMANDS,
    LoggedIn,
    No,
    Output,
    POST_LOGIN_COMMANDS,
    PreLogin,
    Yes,
    YesPayload,
    command_name,
    decode_request,
    encode_response,
    legal,
    step,
)
from .terms import (
    Atom,
    Compound,
    ConnectionClosed,
    Integer,
    MessageTooLarge,
    ParseError,
    Term,
    make_list,
    parse_term,
    read_message,
    write_message,
    write_terminated,
)

VERSION_STRING = "2.0"
END_OF_FILE = Atom("end_of_file")

_LOG_TEXT_CAP = 300


class ConfigError(ValueError):
    pass


# ===================================================================
# Users and passwords
# ===================================================================

def hash_password(password: str, salt: Optional[bytes] = None) -> str:
    """salt-hex:sha256-hex of salt+password, for config files."""
    if salt is None:
        salt = os.urandom(8)
    digest = hashlib.sha256(salt + password.encode("utf-8")).hexdigest()
    return f"{salt.hex()}:{digest}"


def _check_password(stored: str, password: str) -> bool:
    salt_hex, _, want = stored.partition(":")
    try:
        salt = bytes.fromhex(salt_hex)
    except ValueError:
        return False
    got = hashlib.sha256(salt + password.encode("utf-8")).hexdigest()
    return hmac.compare_digest(got, want)


# Burned when the username is unknown so both failure paths hash.
_DUMMY_HASH = hash_password("?", b"\x00" * 8)


@dataclass(frozen=True)
class UserRecord:
    username: str
    password_hash: str
    allowed_commands: frozenset
    may_set_flags: bool = False

    def effective_commands(self) -> frozenset:
        """What this user may actually invoke once logged in; set_flag
        needs the extra marker on top of being listed."""
        commands = self.allowed_commands
        if not self.may_set_flags:
            commands = commands - {"set_flag"}
        return commands


def authenticate(users: dict, user: str, password: str) -> Optional[UserRecord]:
    record = users.get(user)
    if record is None:
        _check_password(_DUMMY_HASH, password)
        return None
    if not _check_password(record.password_hash, password):
        return None
    return record


# ===================================================================
# Configuration
# ===================================================================

@dataclass(frozen=True)
class Limits:
    max_connections: int = 32
    max_message_bytes: int = 1_048_576
    idle_timeout: float = 300.0


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 7070
    users: dict = field(default_factory=dict)
    flag_overrides: dict = field(default_factory=dict)
    limits: Limits = Limits()


def parse_config(text: str) -> ServerConfig:
    """Line-oriented config.

    listen <host> <port>
    user <name> <salt:hash> <command,command,...|all|none> [flags]
    flag <name> <value>
    limit <max_connections|max_message_bytes|idle_timeout> <number>

    Blank lines and lines starting with '#' are ignored.
    """
    host, port = "127.0.0.1", 7070
    users: dict = {}
    flags: dict = {}
    limits = {"max_connections": 32, "max_message_bytes": 1_048_576,
              "idle_timeout": 300.0}

    def fail(lineno, why):
        raise ConfigError(f"config line {lineno}: {why}")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        words = line.split()
        kind = words[0]
        if kind == "listen":
            if len(words) != 3:
                fail(lineno, "listen needs <host> <port>")
            host = words[1]
            try:
                port = int(words[2])
            except ValueError:
                fail(lineno, f"bad port {words[2]!r}")
            if not (0 <= port <= 65535):
                fail(lineno, f"port {port} out of range")
        elif kind == "user":
            if len(words) not in (4, 5):
                fail(lineno, "user needs <name> <salt:hash> <commands> [flags]")
            name, stored, csv = words[1], words[2], words[3]
            if ":" not in stored:
                fail(lineno, "password hash must be salt:hash")
            if len(words) == 5 and words[4] != "flags":
                fail(lineno, f"unknown user option {words[4]!r}")
            may_flags = len(words) == 5
            if csv == "all":
                commands = frozenset(POST_LOGIN_COMMANDS)
            elif csv == "none":
                commands = frozenset()
            else:
                commands = frozenset(csv.split(","))
                bad = commands - POST_LOGIN_COMMANDS
                if bad:
                    fail(lineno, f"unknown command(s): {', '.join(sorted(bad))}")
            if name in users:
                fail(lineno, f"duplicate user {name!r}")
            users[name] = UserRecord(name, stored, commands, may_flags)
        elif kind == "flag":
            if len(words) != 3:
                fail(lineno, "flag needs <name> <value>")
            try:
                flags[words[1]] = parse_term(words[2] + " .")
            except ParseError as e:
                fail(lineno, f"bad flag value: {e}")
        elif kind == "limit":
            if len(words) != 3 or words[1] not in limits:
                fail(lineno, "limit needs <max_connections|max_message_bytes"
                             "|idle_timeout> <number>")
            try:
                value = float(words[2]) if words[1] == "idle_timeout" else int(words[2])
            except ValueError:
                fail(lineno, f"bad number {words[2]!r}")
            if value <= 0:
                fail(lineno, "limits must be positive")
            limits[words[1]] = value
        else:
            fail(lineno, f"unknown directive {kind!r}")

    if not users:
        raise ConfigError("config declares no users")
    try:
        KnowledgeBase(flags)  # validates flag names and domains
    except EngineError as e:
        raise ConfigError(f"bad flag default: {e}") from None
    return ServerConfig(host, port, users, flags, Limits(**limits))


# ===================================================================
# Logging
# ===================================================================

@dataclass(frozen=True)
class SessionLogEntry:
    timestamp: str
    peer: str
    session: int
    direction: str  # in | out | info
    text: str

    def format(self) -> str:
        return (f"{self.timestamp} session={self.session} peer={self.peer} "
                f"{self.direction} {self.text}")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ===================================================================
# Server
# ===================================================================

class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    rpc: "RpcServer"


class RpcServer:
    """Owns the listener, the shared knowledge base, and the log."""

    def __init__(self, config: ServerConfig, log_stream: Optional[TextIO] = None):
        self.config = config
        self.kb = KnowledgeBase(config.flag_overrides)
        self._log_stream = log_stream if log_stream is not None else sys.stderr
        self._log_lock = threading.Lock()
        self._conn_lock = threading.Lock()
        self._active = 0
        self._serial = 0
        self._tcp = _TcpServer((config.host, config.port), _SessionHandler)
        self._tcp.rpc = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple:
        return self._tcp.server_address[:2]

    def log(self, peer: str, session: int, direction: str, text: str):
        if len(text) > _LOG_TEXT_CAP:
            text = text[:_LOG_TEXT_CAP] + "...(truncated)"
        entry = SessionLogEntry(_now(), peer, session, direction, text)
        with self._log_lock:
            self._log_stream.write(entry.format() + "\n")
            self._log_stream.flush()

    def log_line(self, text: str):
        with self._log_lock:
            self._log_stream.write(text + "\n")
            self._log_stream.flush()

    def _admit(self) -> tuple:
        """(serial, admitted): admitted is False beyond the cap."""
        with self._conn_lock:
            self._serial += 1
            if self._active >= self.config.limits.max_connections:
                return self._serial, False
            self._active += 1
            return self._serial, True

    def _release(self):
        with self._conn_lock:
            self._active -= 1

    def start(self):
        """Serve on a background thread (for embedding and tests)."""
        self._thread = threading.Thread(
            target=self._tcp.serve_forever, name="prolog-rpc-accept", daemon=True
        )
        self._thread.start()

    def serve_forever(self):
        self._tcp.serve_forever()

    def shutdown(self):
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


def _bindings_term(solution: dict) -> Term:
    pairs = [
        Compound("=", (Atom(name), value)) for name, value in solution.items()
    ]
    return make_list(pairs)


def _status_term(mode: LoggedIn) -> Term:
    who = Compound("/", (mode.session_id, Atom(mode.user)))
    commands = make_list(
        [Atom(c) for c in sorted(mode.permissions | IMPLICIT_COMMANDS)]
    )
    return make_list([who, commands])


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        rpc: RpcServer = self.server.rpc
        peer = "%s:%s" % self.client_address[:2]
        serial, admitted = rpc._admit()
        try:
            session = _Session(rpc, self.request, peer, serial)
            if not admitted:
                session.reject_over_capacity()
                return
            try:
                session.run()
            finally:
                rpc._release()
        except Exception as e:  # never take down the acceptor
            rpc.log(peer, serial, "info", f"session crashed: {e!r}")


class _Session:
    """One connection's loop and state."""

    def __init__(self, rpc: RpcServer, sock, peer: str, serial: int):
        self.rpc = rpc
        self.kb = rpc.kb
        self.peer = peer
        self.serial = serial
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wfile = sock.makefile("wb")
        self.mode = PreLogin()
        self.upload: Optional[list] = None
        self.chunks: list = []  # write/1 output since the last response

    def log(self, direction: str, text: str):
        self.rpc.log(self.peer, self.serial, direction, text)

    def send(self, responses):
        """Flush captured output, then the cycle's responses."""
        if self.chunks:
            text = "".join(self.chunks)
            self.chunks.clear()
            if isinstance(self.mode, LoggedIn) and self.mode.capturing:
                responses = [Output(text)] + list(responses)
            else:
                self.log("info", f"uncaptured output: {text!r}")
        for r in responses:
            term = encode_response(r)
            write_message(self.wfile, term)
            self.log("out", write_terminated(term))

    def reject_over_capacity(self):
        self.log("info", "connection refused: too many connections")
        try:
            self.send([Error(Atom("too_many_connections"))])
        except OSError:
            pass

    def run(self):
        limits = self.rpc.config.limits
        self.sock.settimeout(limits.idle_timeout)
        self.log("info", "connected")
        try:
            self._loop(limits)
        finally:
            self._close_query()
            self.log("info", "disconnected")

    def _loop(self, limits):
        while True:
            try:
                term = read_message(self.rfile, limits.max_message_bytes)
            except ConnectionClosed:
                return
            except MessageTooLarge:
                self.log("info", "message over size limit; closing")
                self.send([Error(Atom("message_too_large"))])
                return
            except ParseError as e:
                self.log("info", f"unparseable message: {e}")
                self.send([Error(Atom("parse_error"))])
                continue  # still in the same mode, upload included
            except TimeoutError:
                self.log("info", "idle timeout")
                return
            except OSError as e:
                self.log("info", f"read failed: {e!r}")
                return

            self.log("in", write_terminated(term))
            try:
                self._cycle(term)
            except OSError as e:
                self.log("info", f"write failed: {e!r}")
                return

    def _cycle(self, term: Term):
        if isinstance(self.mode, LoggedIn) and self.mode.uploading:
            self._upload_term(term)
            return
        req = decode_request(term)
        if not legal(self.mode, req):
            self.send([Error(Atom("unknown_or_illegal_command"))])
            return
        if not self._authorized(req):
            self.send([Error(Atom("permission denied"))])
            return
        try:
            self._dispatch(req)
        except EngineError as e:
            self.send([Error(Atom(e.reason))])
        except RecursionError:
            self.send([Error(Atom("resource_limit"))])

    def _authorized(self, req) -> bool:
        if isinstance(self.mode, PreLogin):
            return True  # the four pre-login commands have no gate
        name = command_name(req)
        if name in IMPLICIT_COMMANDS:
            return True
        return name in self.mode.permissions

    def _dispatch(self, req):
        intent, next_mode = step(self.mode, req)

        if intent == "ver":
            self.send([YesPayload(Atom(VERSION_STRING, quoted=True))])
        elif intent == "ping":
            self.send([YesPayload(Atom("pong", quoted=True))])
        elif intent == "status":
            if isinstance(self.mode, PreLogin):
                self.send([No()])
            else:
                self.send([YesPayload(_status_term(self.mode))])
        elif intent == "login":
            record = authenticate(self.rpc.config.users, req.user, req.password)
            if record is None:
                self.log("info", f"login denied for {req.user!r}")
                self.send([Error(Atom("access denied"))])
            else:
                self.mode = LoggedIn(
                    req.session_id, record.username, record.effective_commands()
                )
                self.log("info", f"login ok for {record.username!r}")
                self.send([Yes()])
        elif intent == "logout":
            self._close_query()
            self.mode = next_mode
            self.send([Yes()])
        elif intent == "list":
            listed = make_list([
                Compound("/", (Atom(key.name), Integer(key.arity)))
                for key, _ in self.kb.list_predicates()
            ])
            self.mode = next_mode
            self.send([YesPayload(listed)])
        elif intent in ("capture_output", "release_output"):
            self.mode = next_mode
            self.send([Yes()])
        elif intent == "execute":
            iterator = solve(self.kb, req.query, self.chunks.append)
            self._advance(iterator)
        elif intent == "next":
            self._advance(self.mode.query)
        elif intent == "eop":
            self._close_query()
            self.mode = next_mode
            self.send([Yes()])
        elif intent == "add_file":
            self.mode = next_mode
            self.upload = []
            # no response until the end_of_file sentinel
        elif intent in ("comment", "uncomment", "detail"):
            self._metadata(intent, req)
        elif intent == "set_flag":
            self.kb.set_flag(req.flag, req.old, req.new)
            self.mode = next_mode
            self.send([Yes()])
        elif intent == "delete":
            self.kb.delete_clauses(req.spec)
            self.mode = next_mode
            self.send([Yes()])
        elif intent == "delete_all":
            self.kb.delete_all()
            self.mode = next_mode
            self.send([Yes()])
        else:  # unreachable given legality, kept for safety
            self.send([Error(Atom("unknown_or_illegal_command"))])

    def _advance(self, iterator):
        """One solution step for execute/next, updating the open query."""
        try:
            solution = iterator.next_solution()
        except EngineError as e:
            self.mode = replace(self.mode, query=None)
            self.send([Error(Atom(e.reason))])
            return
        except RecursionError:
            self.mode = replace(self.mode, query=None)
            self.send([Error(Atom("resource_limit"))])
            return
        if solution is None:
            self.mode = replace(self.mode, query=None)
            self.send([No()])
        else:
            self.mode = replace(self.mode, query=iterator)
            self.send([YesPayload(_bindings_term(solution))])

    def _metadata(self, intent, req):
        origin = self.kb.origin_of(req.pred)
        if origin is None:
            self.send([Error(Atom("unknown_predicate"))])
            return
        if intent == "detail":
            text = self.kb.get_comment(req.pred)
            self.send([YesPayload(Atom(text))] if text is not None else [No()])
            return
        if origin == "builtin":
            # metadata on builtins is read-only over the wire
            self.send([Error(Atom("permission_error"))])
            return
        if intent == "comment":
            self.kb.set_comment(req.pred, req.text)
        else:
            self.kb.clear_comment(req.pred)
        self.send([Yes()])

    def _upload_term(self, term: Term):
        if term == END_OF_FILE:
            buffered, self.upload = self.upload, None
            self.mode = replace(self.mode, uploading=False)
            try:
                clauses = [clause_from_term(t) for t in buffered]
                self.kb.consult_clauses(clauses)
            except EngineError as e:
                self.send([Error(Atom(e.reason))])
                return
            except RecursionError:
                self.send([Error(Atom("resource_limit"))])
                return
            self.send([Yes()])
        else:
            self.upload.append(term)

    def _close_query(self):
        if isinstance(self.mode, LoggedIn) and self.mode.query is not None:
            self.mode.query.close()
            self.mode = replace(self.mode, query=None)


# ===================================================================
# CLI
# ===================================================================

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prolog-rpc-server",
        description="Serve Prolog predicates to remote clients over TCP.",
    )
    parser.add_argument("--config", required=True, help="policy file path")
    parser.add_argument("--listen", help="ADDR:PORT, overriding the config")
    parser.add_argument("--log", default="-", help="log file path, or - for stdout")
    parser.add_argument("--max-conns", type=int, help="override connection cap")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = parse_config(fh.read())
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 1

    if args.listen:
        host, _, port_text = args.listen.rpartition(":")
        try:
            config = replace(config, host=host, port=int(port_text))
        except ValueError:
            print(f"bad --listen value {args.listen!r}", file=sys.stderr)
            return 1
    if args.max_conns is not None:
        if args.max_conns <= 0:
            print("--max-conns must be positive", file=sys.stderr)
            return 1
        config = replace(
            config, limits=replace(config.limits, max_connections=args.max_conns)
        )

    if args.log == "-":
        log_stream = sys.stdout
    else:
        try:
            log_stream = open(args.log, "a", encoding="utf-8")
        except OSError as e:
            print(f"cannot open log: {e}", file=sys.stderr)
            return 1

    try:
        server = RpcServer(config, log_stream)
    except OSError as e:
        print(f"cannot bind {config.host}:{config.port}: {e}", file=sys.stderr)
        return 2

    host, port = server.address
    server.log_line(f"listening on {host}:{port}")

    def _interrupt(signum, frame):
        raise KeyboardInterrupt

    try:
        signal.signal(signal.SIGTERM, _interrupt)
    except ValueError:
        pass  # not the main thread; ctrl-c still works
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
