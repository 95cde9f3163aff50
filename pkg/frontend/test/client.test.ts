/**
 * Interop tests: this client must complete the reference session
 * against the real server, and the bytes it sends must be identical
 * to the reference request log recorded from the primary client
 * (../tests/golden/interop_requests.txt).
 */

import { execFileSync, spawn, ChildProcess } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { PrologClient, RemoteError } from "../src/client";
import {
  FrameScanner,
  Term,
  atom,
  compound,
  int,
  list,
  parseTerm,
  termEquals,
  writeMessage,
} from "../src/terms";

const GOLDEN_REQUESTS = path.resolve(
  __dirname,
  "../../tests/golden/interop_requests.txt"
);

let server: ChildProcess;
let port: number;
let workDir: string;

beforeAll(async () => {
  workDir = fs.mkdtempSync(path.join(os.tmpdir(), "prolog-rpc-"));
  const hash = execFileSync(
    "python3",
    ["-c", "from prolog_rpc.server import hash_password; print(hash_password('secret'))"],
    { encoding: "utf-8" }
  ).trim();
  const config = path.join(workDir, "server.cfg");
  fs.writeFileSync(config, `listen 127.0.0.1 0\nuser alice ${hash} all flags\n`);
  const logPath = path.join(workDir, "server.log");
  server = spawn("python3", ["-m", "prolog_rpc.server", "--config", config, "--log", logPath], {
    stdio: ["ignore", "ignore", "pipe"],
  });
  let stderr = "";
  server.stderr!.on("data", (d) => (stderr += d));

  const deadline = Date.now() + 15000;
  while (Date.now() < deadline) {
    if (fs.existsSync(logPath)) {
      const match = fs.readFileSync(logPath, "utf-8").match(/listening on [\d.]+:(\d+)/);
      if (match) {
        port = Number(match[1]);
        return;
      }
    }
    if (server.exitCode !== null) break;
    await new Promise((r) => setTimeout(r, 50));
  }
  throw new Error(`server did not come up: ${stderr}`);
}, 20000);

afterAll(() => {
  if (server && server.exitCode === null) server.kill("SIGTERM");
  fs.rmSync(workDir, { recursive: true, force: true });
});

describe("reference session", () => {
  it("completes against the live server with byte-identical requests", async () => {
    const sent: Buffer[] = [];
    const client = await PrologClient.connect("127.0.0.1", port);
    client.sentFrames = sent;
    try {
      expect(await client.ver()).toBe("2.0");
      expect(await client.ping()).toBe("pong");
      expect(await client.login("c1", "alice", "secret")).toBe(true);

      const status = await client.status();
      expect(status).not.toBeNull();
      expect(status!.user).toBe("alice");
      expect(termEquals(status!.sessionId, atom("c1"))).toBe(true);
      expect(status!.commands).toContain("execute");

      await client.upload([
        "append([],L,L).",
        "append([H|T],L,[H|R]):-append(T,L,R).",
      ]);
      await client.captureOutput();

      const solutions = await client.executeAll("append(X,Y,[1,2])");
      expect(solutions.length).toBe(3);
      const want: Array<[Term, Term]> = [
        [list([]), list([int(1), int(2)])],
        [list([int(1)]), list([int(2)])],
        [list([int(1), int(2)]), list([])],
      ];
      solutions.forEach((sol, i) => {
        expect(termEquals(sol.get("X")!, want[i][0])).toBe(true);
        expect(termEquals(sol.get("Y")!, want[i][1])).toBe(true);
      });

      const writes = await client.executeAll("write(hello)");
      expect(writes.length).toBe(1);
      expect(writes[0].size).toBe(0);
      expect(client.outputs).toEqual(["hello"]);

      expect(await client.executeAll("fail")).toEqual([]);

      await client.logout();
    } finally {
      client.close();
    }

    const golden = fs.readFileSync(GOLDEN_REQUESTS);
    expect(Buffer.concat(sent).toString("utf-8")).toBe(golden.toString("utf-8"));
  }, 20000);

  it("sees uploads made by another connection", async () => {
    const a = await PrologClient.connect("127.0.0.1", port);
    const b = await PrologClient.connect("127.0.0.1", port);
    try {
      expect(await a.login("c1", "alice", "secret")).toBe(true);
      await a.upload(["shared(feature(42))."]);
      expect(await b.login("c2", "alice", "secret")).toBe(true);
      const sols = await b.executeAll("shared(V)");
      expect(sols.length).toBe(1);
      expect(termEquals(sols[0].get("V")!, compound("feature", [int(42)]))).toBe(true);
    } finally {
      a.close();
      b.close();
    }
  }, 20000);

  it("reports denied logins and remote errors distinctly", async () => {
    const client = await PrologClient.connect("127.0.0.1", port);
    try {
      expect(await client.login("c1", "alice", "nope")).toBe(false);
      expect(await client.login("c1", "alice", "secret")).toBe(true);
      await expect(client.executeAll("no_such_predicate")).rejects.toThrowError(
        RemoteError
      );
      await client.executeAll("no_such_predicate").catch((err: RemoteError) => {
        expect(err.reason).toBe("unknown_predicate");
      });
      expect(await client.ping()).toBe("pong"); // session survives the error
    } finally {
      client.close();
    }
  }, 20000);
});

describe("term codec", () => {
  it("writes requests in the canonical compact form", () => {
    expect(writeMessage(atom("ping"))).toBe("ping.\n");
    expect(
      writeMessage(compound("login", [atom("c1"), atom("alice"), atom("secret")]))
    ).toBe("login(c1,alice,secret).\n");
    expect(writeMessage(atom("="))).toBe("= .\n");
    expect(writeMessage(compound("f", [list([int(1), int(2)])]))).toBe("f([1,2]).\n");
    expect(writeMessage(atom("hello world"))).toBe("'hello world'.\n");
    expect(writeMessage(atom("it's"))).toBe("'it''s'.\n");
  });

  it("parses the response shapes the server produces", () => {
    const bindings = parseTerm("yes(['X'=[],'Y'=[1,2]])");
    expect(
      termEquals(
        bindings,
        compound("yes", [
          list([
            compound("=", [atom("X"), list([])]),
            compound("=", [atom("Y"), list([int(1), int(2)])]),
          ]),
        ])
      )
    ).toBe(true);

    const status = parseTerm("yes([c1/alice,[ver,ping]])");
    expect(
      termEquals(
        status,
        compound("yes", [
          list([
            compound("/", [atom("c1"), atom("alice")]),
            list([atom("ver"), atom("ping")]),
          ]),
        ])
      )
    ).toBe(true);

    const indicator = parseTerm("yes([(',')/2,fail/0])");
    expect(
      termEquals(
        indicator,
        compound("yes", [
          list([
            compound("/", [atom(","), int(2)]),
            compound("/", [atom("fail"), int(0)]),
          ]),
        ])
      )
    ).toBe(true);

    const output = parseTerm("output('two\\nlines')");
    expect(termEquals(output, compound("output", [atom("two\nlines")]))).toBe(true);

    const spaced = parseTerm("yes(['X'= -5])");
    expect(
      termEquals(spaced, compound("yes", [list([compound("=", [atom("X"), int(-5)])])]))
    ).toBe(true);

    expect(termEquals(parseTerm("yes('it''s')"), compound("yes", [atom("it's")]))).toBe(
      true
    );
  });
});

describe("frame scanner", () => {
  it("splits frames no matter how the bytes arrive", () => {
    const scanner = new FrameScanner();
    const stream = "yes.\nyes(['X'=1]).\noutput('dot . inside').\nno.\n";
    for (const byte of Buffer.from(stream)) {
      scanner.push(Buffer.from([byte]));
    }
    expect(scanner.shift()).toBe("yes");
    expect(scanner.shift()).toBe("yes(['X'=1])");
    expect(scanner.shift()).toBe("output('dot . inside')");
    expect(scanner.shift()).toBe("no");
    expect(scanner.shift()).toBeUndefined();
  });

  it("does not split on periods inside numbers or quotes", () => {
    const scanner = new FrameScanner();
    scanner.push(Buffer.from("yes([pi/3.14,'a.b']).\n"));
    expect(scanner.shift()).toBe("yes([pi/3.14,'a.b'])");
    expect(scanner.shift()).toBeUndefined();
  });

  it("handles doubled quotes and escapes", () => {
    const scanner = new FrameScanner();
    scanner.push(Buffer.from("output('it''s a \\'test\\'.').\nyes.\n"));
    expect(scanner.shift()).toBe("output('it''s a \\'test\\'.')");
    expect(scanner.shift()).toBe("yes");
  });
});
