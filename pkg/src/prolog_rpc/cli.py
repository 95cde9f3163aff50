"""Interactive REPL for the remote predicate call server.

The loop mimics a conventional Prolog top level: a line ending in a
period is sent as a query, `;` asks for the next solution, a blank line
gives up on the current query.  Everything else is a `:name` meta
command mapped onto one protocol request.  Replies are echoed exactly
as they arrived on the wire, so a scripted run is byte-deterministic.
"""

from __future__ import annotations

import argparse
import getpass
import sys

from .client import Connection, ProtocolViolation, RemoteError, RemoteQuery, UsageError
from .terms import Atom, Compound, ConnectionClosed, Integer, ParseError, parse_term

USAGE = """\
queries      append(X, Y, [1,2]).      send a query
             ;                         ask for another solution
             (blank line)              stop the current query
meta         :ver :ping :status :list :capture :release :deleteall
             :login USER PASSWORD      :logout
             :detail NAME/ARITY        :uncomment NAME/ARITY
             :comment NAME/ARITY TEXT  :setflag FLAG OLD NEW
             :delete TERM              :upload FILE
             :help                     :quit
"""


def _indicator(text: str):
    """Turn 'name/arity' into a (name, arity) pair."""
    term = parse_term(text + " .")
    if (
        isinstance(term, Compound)
        and term.functor == "/"
        and len(term.args) == 2
        and isinstance(term.args[0], Atom)
        and isinstance(term.args[1], Integer)
    ):
        return term.args[0].name, term.args[1].value
    raise ParseError(f"expected NAME/ARITY, got {text!r}")


class Repl:
    def __init__(self, conn: Connection, echo: bool):
        self.conn = conn
        self.echo = echo  # script mode: inputs are echoed by the caller
        self.query: RemoteQuery | None = None

    def say(self, text: str):
        print(text)

    def show_raw(self):
        for frame in self.conn.take_raw():
            print(frame)

    # ---- query lifecycle -------------------------------------------

    def close_query(self):
        if self.query is None:
            return
        q, self.query = self.query, None
        if self.conn.query_open:
            try:
                q.close()
            except RemoteError:
                pass
            self.show_raw()

    def start_query(self, text: str):
        self.close_query()
        try:
            q = self.conn.execute(text)
        except ParseError as exc:
            self.say(f"! {exc}")
            return
        except RemoteError:
            self.show_raw()
            return
        self.show_raw()
        if self.conn.query_open:
            q.next()  # first solution arrived with the execute reply
            self.query = q

    def step(self):
        if self.query is None:
            self.say("! no query in progress")
            return
        try:
            self.query.next()
        except RemoteError:
            pass
        self.show_raw()
        if not self.conn.query_open:
            self.query = None

    # ---- meta commands ---------------------------------------------

    def meta(self, line: str) -> bool:
        self.close_query()
        parts = line.split(None, 2)
        cmd = parts[0][1:]
        try:
            if cmd in ("quit", "exit"):
                return False
            elif cmd == "help":
                self.say(USAGE.rstrip())
            elif cmd == "ver":
                self.conn.ver()
                self.show_raw()
            elif cmd == "ping":
                self.conn.ping()
                self.show_raw()
            elif cmd == "status":
                self.conn.status()
                self.show_raw()
            elif cmd == "list":
                self.conn.list_predicates()
                self.show_raw()
            elif cmd == "capture":
                self.conn.capture_output()
                self.show_raw()
            elif cmd == "release":
                self.conn.release_output()
                self.show_raw()
            elif cmd == "deleteall":
                self.conn.delete_all()
                self.show_raw()
            elif cmd == "logout":
                self.conn.logout()
                self.show_raw()
            elif cmd == "login":
                user, password = line.split()[1:3]
                self.conn.login("cli", user, password)
                self.show_raw()
            elif cmd == "detail":
                self.conn.detail(_indicator(parts[1]))
                self.show_raw()
            elif cmd == "uncomment":
                self.conn.uncomment(_indicator(parts[1]))
                self.show_raw()
            elif cmd == "comment":
                self.conn.comment(_indicator(parts[1]), parts[2])
                self.show_raw()
            elif cmd == "setflag":
                flag, old, new = line.split()[1:4]
                self.conn.set_flag(flag, old, new)
                self.show_raw()
            elif cmd == "delete":
                self.conn.delete(line.split(None, 1)[1])
                self.show_raw()
            elif cmd == "upload":
                with open(parts[1], encoding="utf-8") as fh:
                    self.conn.upload_text(fh.read())
                self.show_raw()
            else:
                self.say(f"! unknown command :{cmd} (:help lists them)")
        except RemoteError:
            self.show_raw()
        except (IndexError, ValueError):
            self.say(f"! bad arguments for :{cmd} (:help lists the forms)")
        except ParseError as exc:
            self.say(f"! {exc}")
        except UsageError as exc:
            self.say(f"! {exc}")
        except OSError as exc:
            self.say(f"! {exc}")
        return True

    # ---- one input line --------------------------------------------

    def handle(self, line: str) -> bool:
        line = line.strip()
        if line == "":
            self.close_query()
            return True
        if line == ";":
            self.step()
            return True
        if line.startswith(":"):
            return self.meta(line)
        if line.endswith("."):
            try:
                self.start_query(line)
            except UsageError as exc:
                self.say(f"! {exc}")
            return True
        self.say("! expected a query ending in '.' or a :command (:help)")
        return True

    def finish(self):
        self.close_query()
        if self.conn.logged_in:
            try:
                self.conn.logout()
                self.show_raw()
            except RemoteError:
                self.show_raw()


def _stdin_lines():
    while True:
        try:
            yield input("?- ")
        except EOFError:
            return


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prolog-rpc-cli",
        description="interactive client for the remote predicate call server",
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--user", help="log in as this user on startup")
    parser.add_argument("--pass", dest="password_file", metavar="FILE",
                        help="file whose first line is the password")
    parser.add_argument("--session", default="cli",
                        help="session id sent at login (default: cli)")
    parser.add_argument("--timeout", type=float, default=30.0,
                        help="seconds to wait for each response")
    parser.add_argument("--script", metavar="FILE",
                        help="read input lines from FILE, echoing each one")
    args = parser.parse_args(argv)

    try:
        conn = Connection(args.host, args.port, timeout=args.timeout)
    except OSError as exc:
        print(f"cannot connect to {args.host}:{args.port}: {exc}",
              file=sys.stderr)
        return 1

    try:
        if args.user:
            if args.password_file:
                with open(args.password_file, encoding="utf-8") as fh:
                    password = fh.readline().rstrip("\n")
            else:
                password = getpass.getpass("password: ")
            if not conn.login(args.session, args.user, password):
                print("access denied", file=sys.stderr)
                return 1

        repl = Repl(conn, echo=args.script is not None)
        if args.script:
            with open(args.script, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
            source = iter(lines)
        else:
            source = _stdin_lines()
        for line in source:
            if repl.echo:
                print("?- " + line)
            if not repl.handle(line):
                break
        repl.finish()
    except (ProtocolViolation, ConnectionClosed) as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"connection lost: {exc}", file=sys.stderr)
        return 3
    finally:
        conn.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
