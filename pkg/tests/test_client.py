"""Client library and CLI tests against a live in-process server.

Fake single-purpose servers cover the failure paths a real server
never produces: garbage responses, silence, abrupt closes.
"""

import io
import socket
import subprocess
import sys
import threading

import pytest

from prolog_rpc.client import (
    Connection,
    ProtocolViolation,
    RemoteError,
    StatusInfo,
    UsageError,
)
from prolog_rpc.protocol import POST_LOGIN_COMMANDS
from prolog_rpc.server import Limits, RpcServer, ServerConfig, UserRecord, hash_password
from prolog_rpc.terms import Atom, Integer, ParseError, make_list

APPEND_SOURCE = """\
append([], L, L).
append([H|T], L, [H|R]) :- append(T, L, R).
"""


def make_server():
    config = ServerConfig(
        host="127.0.0.1",
        port=0,
        users={
            "alice": UserRecord(
                "alice", hash_password("secret"),
                frozenset(POST_LOGIN_COMMANDS), True,
            ),
            "bob": UserRecord(
                "bob", hash_password("bobpw"), frozenset({"list"}), False,
            ),
        },
        limits=Limits(idle_timeout=30.0),
    )
    server = RpcServer(config, log_stream=io.StringIO())
    server.start()
    return server


@pytest.fixture(scope="module")
def server():
    srv = make_server()
    yield srv
    srv.shutdown()


@pytest.fixture
def conn(server):
    host, port = server.address
    c = Connection(host, port, timeout=10.0)
    yield c
    c.close()


@pytest.fixture
def alice(conn):
    assert conn.login("c1", "alice", "secret")
    conn.delete_all()  # the KB is shared across tests; start clean
    return conn


class FakeServer:
    """Accepts one connection and plays a fixed part."""

    def __init__(self, reply: bytes = b"", read_first: bool = True,
                 close_after: bool = True):
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.address = self.listener.getsockname()
        self.thread = threading.Thread(
            target=self._run, args=(reply, read_first, close_after), daemon=True
        )
        self.thread.start()

    def _run(self, reply, read_first, close_after):
        conn, _ = self.listener.accept()
        try:
            if read_first:
                conn.recv(4096)
            if reply:
                conn.sendall(reply)
            if not close_after:
                conn.recv(4096)  # hold the line open until the client quits
        finally:
            conn.close()

    def close(self):
        self.listener.close()


# ===================================================================
# Command wrappers
# ===================================================================

class TestWrappers:
    def test_ver_and_ping(self, conn):
        assert conn.ver() == "2.0"
        assert conn.ping() == "pong"

    def test_status_before_login_is_none(self, conn):
        assert conn.status() is None

    def test_status_after_login(self, alice):
        info = alice.status()
        assert isinstance(info, StatusInfo)
        assert info.session_id == Atom("c1")
        assert info.user == "alice"
        assert "execute" in info.commands
        assert "ver" in info.commands

    def test_bad_password_returns_false(self, conn):
        assert conn.login("c1", "alice", "wrong") is False
        assert not conn.logged_in
        assert conn.login("c1", "alice", "secret") is True

    def test_logout_returns_to_pre_login(self, alice):
        alice.logout()
        assert not alice.logged_in
        assert alice.status() is None

    def test_list_includes_builtins_and_uploads(self, alice):
        alice.upload_text(APPEND_SOURCE)
        preds = alice.list_predicates()
        assert ("append", 3) in preds
        assert ("true", 0) in preds
        assert ("is", 2) in preds

    def test_comment_detail_uncomment(self, alice):
        alice.upload_text(APPEND_SOURCE)
        alice.comment(("append", 3), "joins two lists")
        assert alice.detail(("append", 3)) == "joins two lists"
        alice.uncomment(("append", 3))
        assert alice.detail(("append", 3)) is None

    def test_set_flag_and_mismatch(self, alice):
        alice.set_flag("occurs_check", "false", "true")
        with pytest.raises(RemoteError) as exc:
            alice.set_flag("occurs_check", "false", "true")
        assert exc.value.reason == "old_mismatch"
        alice.set_flag("occurs_check", "true", "false")

    def test_delete_and_delete_all(self, alice):
        alice.upload_text(APPEND_SOURCE)
        alice.delete("[append/3]")
        assert ("append", 3) not in alice.list_predicates()
        alice.upload_text(APPEND_SOURCE)
        alice.delete_all()
        assert ("append", 3) not in alice.list_predicates()

    def test_permission_denied_raises(self, conn):
        assert conn.login("c2", "bob", "bobpw")
        with pytest.raises(RemoteError) as exc:
            conn.execute_all("true.")
        assert exc.value.reason == "permission denied"

    def test_remote_error_reason(self, alice):
        with pytest.raises(RemoteError) as exc:
            alice.execute_all("no_such_predicate.")
        assert exc.value.reason == "unknown_predicate"

    def test_add_file_terms(self, alice):
        from prolog_rpc.terms import parse_program
        alice.add_file(parse_program("color(red). color(green)."))
        sols = alice.execute_all("color(X).")
        assert [s["X"] for s in sols] == [Atom("red"), Atom("green")]

    def test_add_file_empty_is_ok(self, alice):
        sent = []
        alice.record_requests(sent)
        alice.add_file([])
        assert sent == [b"add_file.\n", b"end_of_file.\n"]


# ===================================================================
# RemoteQuery
# ===================================================================

class TestRemoteQuery:
    def test_iteration_collects_all_solutions(self, alice):
        alice.upload_text(APPEND_SOURCE)
        sols = alice.execute_all("append(X, Y, [1, 2]).")
        assert len(sols) == 3
        assert sols[0] == {"X": make_list([]), "Y": make_list([Integer(1), Integer(2)])}
        assert sols[2] == {"X": make_list([Integer(1), Integer(2)]), "Y": make_list([])}

    def test_next_after_exhaustion_returns_none(self, alice):
        q = alice.execute("true.")
        assert q.next() == {}
        assert q.next() is None
        assert q.next() is None

    def test_fail_query_is_exhausted_immediately(self, alice):
        q = alice.execute("fail.")
        assert q.next() is None
        assert not alice.query_open

    def test_close_after_first_solution_frees_the_session(self, alice):
        alice.upload_text(APPEND_SOURCE)
        q = alice.execute("append(X, Y, [1, 2, 3]).")
        assert q.next() is not None
        q.close()
        assert not alice.query_open
        assert len(alice.execute_all("append(X, Y, [1]).")) == 2

    def test_close_sends_eop_exactly_once(self, alice):
        alice.upload_text(APPEND_SOURCE)
        sent = []
        alice.record_requests(sent)
        q = alice.execute("append(X, Y, [1]).")
        q.close()
        q.close()
        assert sent.count(b"eop.\n") == 1

    def test_close_on_spent_query_sends_nothing(self, alice):
        sent = []
        alice.record_requests(sent)
        q = alice.execute("fail.")
        q.close()
        assert b"eop.\n" not in sent


# ===================================================================
# Pre-flight mode checks
# ===================================================================

class TestUsageErrors:
    def test_execute_before_login(self, conn):
        sent = []
        conn.record_requests(sent)
        with pytest.raises(UsageError):
            conn.execute("true.")
        assert sent == []

    def test_relogin_is_rejected_locally(self, alice):
        with pytest.raises(UsageError):
            alice.login("c9", "alice", "secret")

    def test_capture_before_login(self, conn):
        with pytest.raises(UsageError):
            conn.capture_output()

    def test_logout_before_login(self, conn):
        with pytest.raises(UsageError):
            conn.logout()


# ===================================================================
# Output frames
# ===================================================================

class TestOutput:
    def test_callback_receives_captured_text(self, server):
        host, port = server.address
        got = []
        c = Connection(host, port, timeout=10.0, output_callback=got.append)
        try:
            c.login("c1", "alice", "secret")
            c.capture_output()
            c.execute_all("write(hello).")
            assert got == ["hello"]
            assert c.pending_output == []
            c.release_output()
        finally:
            c.close()

    def test_pending_output_without_callback(self, alice):
        alice.capture_output()
        alice.execute_all("write(hello), nl.")
        assert alice.pending_output == ["hello\n"]
        alice.pending_output.clear()
        alice.release_output()

    def test_no_capture_no_output(self, alice):
        alice.execute_all("write(hello).")
        assert alice.pending_output == []


# ===================================================================
# Uploads
# ===================================================================

class TestUpload:
    def test_upload_text_parse_error_sends_nothing(self, alice):
        sent = []
        alice.record_requests(sent)
        with pytest.raises(ParseError):
            alice.upload_text("append([], L, L")
        assert sent == []

    def test_upload_then_execute(self, alice):
        alice.upload_text(APPEND_SOURCE)
        assert len(alice.execute_all("append(X, Y, [a, b, c]).")) == 4

    def test_record_requests_captures_exact_bytes(self, alice):
        sent = []
        alice.record_requests(sent)
        alice.upload_text("p(1).\np(2).\n")
        assert sent == [
            b"add_file.\n",
            b"p(1).\n",
            b"p(2).\n",
            b"end_of_file.\n",
        ]


# ===================================================================
# Failure paths via fake servers
# ===================================================================

class TestTransportFailures:
    def test_out_of_grammar_response(self):
        fake = FakeServer(reply=b"banana.\n")
        try:
            c = Connection(*fake.address, timeout=5.0)
            with pytest.raises(ProtocolViolation) as exc:
                c.ping()
            assert exc.value.raw == "banana."
            c.close()
        finally:
            fake.close()

    def test_unparseable_response(self):
        fake = FakeServer(reply=b"((( .\n")
        try:
            c = Connection(*fake.address, timeout=5.0)
            with pytest.raises(ProtocolViolation) as exc:
                c.ping()
            assert "unparseable" in str(exc.value)
            c.close()
        finally:
            fake.close()

    def test_silent_server_times_out(self):
        fake = FakeServer(reply=b"", read_first=True, close_after=False)
        try:
            c = Connection(*fake.address, timeout=0.5)
            with pytest.raises(OSError):
                c.ping()
            c.close()
        finally:
            fake.close()

    def test_abrupt_close_raises(self):
        fake = FakeServer(reply=b"", read_first=False, close_after=True)
        try:
            c = Connection(*fake.address, timeout=5.0)
            with pytest.raises(Exception) as exc:
                c.ping()
            from prolog_rpc.terms import ConnectionClosed
            assert isinstance(exc.value, (ConnectionClosed, OSError))
            c.close()
        finally:
            fake.close()

    def test_output_frame_mid_query_reaches_callback(self):
        # scripted exchange: login ok, then an output frame arrives
        # before the terminal reply to execute
        reply = b"yes.\noutput('mid').\nyes([]).\n"
        fake = FakeServer(reply=reply, read_first=True, close_after=False)
        got = []
        try:
            c = Connection(*fake.address, timeout=5.0, output_callback=got.append)
            assert c.login("c1", "alice", "x")
            q = c.execute("true.")
            assert q.next() == {}
            assert got == ["mid"]
            c.close()
        finally:
            fake.close()


# ===================================================================
# CLI subprocesses
# ===================================================================

def run_cli(args, timeout=30):
    return subprocess.run(
        [sys.executable, "-m", "prolog_rpc.cli", *args],
        capture_output=True, text=True, timeout=timeout,
    )


class TestCli:
    def test_script_session(self, server, tmp_path):
        host, port = server.address
        pw = tmp_path / "pw"
        pw.write_text("secret\n")
        program = tmp_path / "program.pl"
        program.write_text(APPEND_SOURCE)
        script = tmp_path / "session"
        script.write_text(
            ":ping\n"
            ":deleteall\n"
            f":upload {program}\n"
            "append(X, Y, [1, 2]).\n"
            ";\n"
            ";\n"
            ";\n"
            ":logout\n"
            ":quit\n"
        )
        proc = run_cli([
            "--host", host, "--port", str(port),
            "--user", "alice", "--pass", str(pw),
            "--script", str(script),
        ])
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout == (
            "?- :ping\n"
            "yes('pong').\n"
            "?- :deleteall\n"
            "yes.\n"
            f"?- :upload {program}\n"
            "yes.\n"
            "?- append(X, Y, [1, 2]).\n"
            "yes(['X'=[],'Y'=[1,2]]).\n"
            "?- ;\n"
            "yes(['X'=[1],'Y'=[2]]).\n"
            "?- ;\n"
            "yes(['X'=[1,2],'Y'=[]]).\n"
            "?- ;\n"
            "no.\n"
            "?- :logout\n"
            "yes.\n"
            "?- :quit\n"
        )

    def test_bad_password_exits_1(self, server, tmp_path):
        host, port = server.address
        pw = tmp_path / "pw"
        pw.write_text("wrong\n")
        script = tmp_path / "s"
        script.write_text(":quit\n")
        proc = run_cli([
            "--host", host, "--port", str(port),
            "--user", "alice", "--pass", str(pw),
            "--script", str(script),
        ])
        assert proc.returncode == 1
        assert "access denied" in proc.stderr

    def test_unreachable_server_exits_1(self, tmp_path):
        script = tmp_path / "s"
        script.write_text(":quit\n")
        with socket.create_server(("127.0.0.1", 0)) as probe:
            free_port = probe.getsockname()[1]
        proc = run_cli([
            "--port", str(free_port), "--script", str(script),
        ])
        assert proc.returncode == 1
        assert "cannot connect" in proc.stderr

    def test_protocol_violation_exits_3(self, tmp_path):
        fake = FakeServer(reply=b"banana.\n")
        try:
            script = tmp_path / "s"
            script.write_text(":ping\n:quit\n")
            host, port = fake.address
            proc = run_cli([
                "--host", host, "--port", str(port), "--script", str(script),
            ])
            assert proc.returncode == 3
            assert "protocol violation" in proc.stderr
        finally:
            fake.close()


class TestServerCli:
    def test_missing_config_exits_1(self):
        proc = subprocess.run(
            [sys.executable, "-m", "prolog_rpc.server",
             "--config", "/nonexistent/config"],
            capture_output=True, text=True, timeout=30,
        )
        assert proc.returncode == 1
        assert "cannot read config" in proc.stderr

    def test_bad_config_exits_1(self, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text("listen 127.0.0.1 notaport\n")
        proc = subprocess.run(
            [sys.executable, "-m", "prolog_rpc.server", "--config", str(cfg)],
            capture_output=True, text=True, timeout=30,
        )
        assert proc.returncode == 1
        assert "config line 1" in proc.stderr

    def test_bind_failure_exits_2(self, server, tmp_path):
        host, port = server.address
        cfg = tmp_path / "cfg"
        cfg.write_text(
            f"listen {host} {port}\n"
            f"user alice {hash_password('secret')} all flags\n"
        )
        proc = subprocess.run(
            [sys.executable, "-m", "prolog_rpc.server", "--config", str(cfg)],
            capture_output=True, text=True, timeout=30,
        )
        assert proc.returncode == 2
        assert "cannot bind" in proc.stderr

    def test_listening_line_and_sigterm(self, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text(
            "listen 127.0.0.1 0\n"
            f"user alice {hash_password('secret')} all flags\n"
        )
        log = tmp_path / "log"
        proc = subprocess.Popen(
            [sys.executable, "-m", "prolog_rpc.server",
             "--config", str(cfg), "--log", str(log)],
            stderr=subprocess.PIPE, text=True,
        )
        try:
            import time
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                if log.exists() and "listening on" in log.read_text():
                    break
                time.sleep(0.05)
            else:
                pytest.fail(f"no listening line; log={log.read_text() if log.exists() else '?'}")
            proc.terminate()
            assert proc.wait(timeout=10) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
