/**
 * Minimal TCP client for the prolog-rpc server.
 *
 * Strictly request/response: each command writes one framed term and
 * reads frames until a terminal reply arrives, collecting `output`
 * frames into a side list along the way. Clause and query text is
 * passed through pre-formed (only the terminator is checked), so the
 * bytes on the wire are exactly what the caller wrote.
 */

import * as net from "net";

import {
  FrameScanner,
  Term,
  TermParseError,
  atom,
  compound,
  listItems,
  parseTerm,
  writeMessage,
} from "./terms";

export class ProtocolViolation extends Error {
  constructor(message: string, public raw: string = "") {
    super(message);
  }
}

export class RemoteError extends Error {
  constructor(public term: Term) {
    super(termText(term));
  }
  get reason(): string {
    return this.term.tag === "atom" ? this.term.name : "";
  }
}

function termText(t: Term): string {
  return t.tag === "atom" ? t.name : JSON.stringify(t);
}

type Response =
  | { kind: "yes" }
  | { kind: "yesPayload"; payload: Term }
  | { kind: "no" }
  | { kind: "error"; message: Term }
  | { kind: "output"; text: string };

function classify(term: Term): Response | null {
  if (term.tag === "atom") {
    if (term.name === "yes") return { kind: "yes" };
    if (term.name === "no") return { kind: "no" };
    return null;
  }
  if (term.tag === "compound" && term.args.length === 1) {
    if (term.functor === "yes") return { kind: "yesPayload", payload: term.args[0] };
    if (term.functor === "error") return { kind: "error", message: term.args[0] };
    if (term.functor === "output" && term.args[0].tag === "atom")
      return { kind: "output", text: term.args[0].name };
  }
  return null;
}

export interface StatusInfo {
  sessionId: Term;
  user: string;
  commands: string[];
}

export type Bindings = Map<string, Term>;

export class PrologClient {
  private scanner = new FrameScanner();
  private pendingFrames: string[] = [];
  private waiters: Array<{
    resolve: (text: string) => void;
    reject: (err: Error) => void;
  }> = [];
  private closed: Error | null = null;

  /** Captured output text, in arrival order. */
  outputs: string[] = [];
  /** When set, every request's exact bytes are appended here. */
  sentFrames: Buffer[] | null = null;

  private constructor(private socket: net.Socket) {
    socket.on("data", (chunk) => {
      this.scanner.push(chunk);
      let frame;
      while ((frame = this.scanner.shift()) !== undefined) {
        const waiter = this.waiters.shift();
        if (waiter) waiter.resolve(frame);
        else this.pendingFrames.push(frame);
      }
    });
    const fail = (err: Error) => {
      this.closed = err;
      for (const w of this.waiters.splice(0)) w.reject(err);
    };
    socket.on("error", fail);
    socket.on("close", () => fail(new Error("connection closed")));
  }

  static connect(host: string, port: number, timeoutMs = 30000): Promise<PrologClient> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port }, () => {
        socket.setTimeout(timeoutMs, () => {
          socket.destroy(new Error("response timeout"));
        });
        resolve(new PrologClient(socket));
      });
      socket.once("error", reject);
    });
  }

  close() {
    this.socket.destroy();
  }

  private readFrame(): Promise<string> {
    const queued = this.pendingFrames.shift();
    if (queued !== undefined) return Promise.resolve(queued);
    if (this.closed) return Promise.reject(this.closed);
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
  }

  private writeRaw(text: string) {
    const data = Buffer.from(text, "utf-8");
    if (this.sentFrames) this.sentFrames.push(data);
    this.socket.write(data);
  }

  private send(term: Term) {
    this.writeRaw(writeMessage(term));
  }

  /** Read frames until a terminal reply; output frames go to `outputs`. */
  private async readTerminal(): Promise<Response> {
    while (true) {
      const text = await this.readFrame();
      let term: Term;
      try {
        term = parseTerm(text);
      } catch (err) {
        if (err instanceof TermParseError)
          throw new ProtocolViolation(`unparseable response: ${err.message}`, text);
        throw err;
      }
      const resp = classify(term);
      if (resp === null) throw new ProtocolViolation("response outside grammar", text);
      if (resp.kind === "output") {
        this.outputs.push(resp.text);
        continue;
      }
      return resp;
    }
  }

  private async exchange(term: Term): Promise<Response> {
    this.send(term);
    return this.readTerminal();
  }

  private async simple(term: Term): Promise<void> {
    const resp = await this.exchange(term);
    if (resp.kind === "yes") return;
    if (resp.kind === "error") throw new RemoteError(resp.message);
    throw new ProtocolViolation(`unexpected ${resp.kind} reply`);
  }

  private async payloadAtom(name: string): Promise<string> {
    const resp = await this.exchange(atom(name));
    if (resp.kind === "yesPayload" && resp.payload.tag === "atom")
      return resp.payload.name;
    if (resp.kind === "error") throw new RemoteError(resp.message);
    throw new ProtocolViolation(`unexpected reply to ${name}`);
  }

  // ---- commands ---------------------------------------------------

  ver(): Promise<string> {
    return this.payloadAtom("ver");
  }

  ping(): Promise<string> {
    return this.payloadAtom("ping");
  }

  async login(sessionId: string, user: string, password: string): Promise<boolean> {
    const resp = await this.exchange(
      compound("login", [atom(sessionId), atom(user), atom(password)])
    );
    if (resp.kind === "yes") return true;
    if (resp.kind === "error") {
      if (resp.message.tag === "atom" && resp.message.name === "access denied")
        return false;
      throw new RemoteError(resp.message);
    }
    throw new ProtocolViolation("unexpected reply to login");
  }

  async logout(): Promise<void> {
    return this.simple(atom("logout"));
  }

  async status(): Promise<StatusInfo | null> {
    const resp = await this.exchange(atom("status"));
    if (resp.kind === "no") return null;
    if (resp.kind === "yesPayload") {
      const pair = listItems(resp.payload);
      if (pair !== null && pair.length === 2) {
        const who = pair[0];
        const cmds = listItems(pair[1]);
        if (
          who.tag === "compound" &&
          who.functor === "/" &&
          who.args.length === 2 &&
          who.args[1].tag === "atom" &&
          cmds !== null &&
          cmds.every((c) => c.tag === "atom")
        ) {
          return {
            sessionId: who.args[0],
            user: who.args[1].name,
            commands: cmds.map((c) => (c as any).name),
          };
        }
      }
    }
    throw new ProtocolViolation("unexpected reply to status");
  }

  captureOutput(): Promise<void> {
    return this.simple(atom("capture_output"));
  }

  releaseOutput(): Promise<void> {
    return this.simple(atom("release_output"));
  }

  /**
   * Run a query to exhaustion: execute, then next until `no`. The
   * query text is embedded verbatim, so write it compactly.
   */
  async executeAll(queryText: string): Promise<Bindings[]> {
    const q = queryText.trim().replace(/\.$/, "");
    if (!q) throw new Error("empty query");
    this.writeRaw(`execute(${q}).\n`);
    const solutions: Bindings[] = [];
    let resp = await this.readTerminal();
    while (true) {
      if (resp.kind === "no") return solutions;
      if (resp.kind === "error") throw new RemoteError(resp.message);
      if (resp.kind !== "yesPayload")
        throw new ProtocolViolation("unexpected reply to execute/next");
      solutions.push(parseBindings(resp.payload));
      resp = await this.exchange(atom("next"));
    }
  }

  /** Upload pre-formed clause texts, each ending with its period. */
  async upload(clauseTexts: string[]): Promise<void> {
    this.send(atom("add_file"));
    for (const clause of clauseTexts) {
      const text = clause.trim();
      if (!text.endsWith("."))
        throw new Error(`clause missing terminator: ${text}`);
      this.writeRaw(text + "\n");
    }
    this.send(atom("end_of_file"));
    const resp = await this.readTerminal();
    if (resp.kind === "yes") return;
    if (resp.kind === "error") throw new RemoteError(resp.message);
    throw new ProtocolViolation("unexpected reply to add_file");
  }
}

function parseBindings(payload: Term): Bindings {
  const items = listItems(payload);
  if (items === null)
    throw new ProtocolViolation("bindings payload is not a proper list");
  const out: Bindings = new Map();
  for (const item of items) {
    if (
      item.tag === "compound" &&
      item.functor === "=" &&
      item.args.length === 2 &&
      item.args[0].tag === "atom"
    ) {
      out.set(item.args[0].name, item.args[1]);
    } else {
      throw new ProtocolViolation("malformed binding element");
    }
  }
  return out;
}
