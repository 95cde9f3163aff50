/**
 * A small Prolog term representation with just enough reading and
 * writing to speak the RPC wire format: atoms, integers, floats,
 * variables, compounds, and list sugar. The reader knows the two
 * infix operators that appear in responses (`=` in binding lists,
 * `/` in predicate indicators); full operator parsing is out of scope.
 */

export type Term =
  | { tag: "atom"; name: string }
  | { tag: "int"; value: number }
  | { tag: "float"; value: number }
  | { tag: "var"; name: string }
  | { tag: "compound"; functor: string; args: Term[] };

export const atom = (name: string): Term => ({ tag: "atom", name });
export const int = (value: number): Term => ({ tag: "int", value });
export const variable = (name: string): Term => ({ tag: "var", name });
export const compound = (functor: string, args: Term[]): Term => ({
  tag: "compound",
  functor,
  args,
});

export const NIL = atom("[]");

export function list(items: Term[], tail: Term = NIL): Term {
  let out = tail;
  for (let i = items.length - 1; i >= 0; i--) {
    out = compound(".", [items[i], out]);
  }
  return out;
}

/** Unpack list sugar; returns null when the term is not a proper list. */
export function listItems(term: Term): Term[] | null {
  const items: Term[] = [];
  let cur = term;
  while (true) {
    if (cur.tag === "atom" && cur.name === "[]") return items;
    if (cur.tag === "compound" && cur.functor === "." && cur.args.length === 2) {
      items.push(cur.args[0]);
      cur = cur.args[1];
    } else {
      return null;
    }
  }
}

export function termEquals(a: Term, b: Term): boolean {
  if (a.tag !== b.tag) return false;
  switch (a.tag) {
    case "atom":
      return a.name === (b as any).name;
    case "var":
      return a.name === (b as any).name;
    case "int":
    case "float":
      return a.value === (b as any).value;
    case "compound": {
      const bb = b as Extract<Term, { tag: "compound" }>;
      return (
        a.functor === bb.functor &&
        a.args.length === bb.args.length &&
        a.args.every((x, i) => termEquals(x, bb.args[i]))
      );
    }
  }
}

// ------------------------------------------------------------------
// Writer
// ------------------------------------------------------------------

const WORD_ATOM = /^[a-z][a-zA-Z0-9_]*$/;
const DOLLAR_ATOM = /^\$[a-zA-Z0-9_]+$/;
const SYMBOL_CHARS = new Set("#&*+-./:<=>?@^~\\");

function atomNeedsQuotes(name: string): boolean {
  if (WORD_ATOM.test(name) || DOLLAR_ATOM.test(name)) return false;
  if (name === "!" || name === ";" || name === "[]") return false;
  if (name !== "." && name.length > 0 && [...name].every((c) => SYMBOL_CHARS.has(c)))
    return false;
  return true;
}

function quoteAtom(name: string): string {
  let out = "'";
  for (const c of name) {
    if (c === "'") out += "''";
    else if (c === "\\") out += "\\\\";
    else if (c === "\n") out += "\\n";
    else if (c === "\t") out += "\\t";
    else out += c;
  }
  return out + "'";
}

export function writeAtom(name: string): string {
  return atomNeedsQuotes(name) ? quoteAtom(name) : name;
}

function writeFloat(value: number): string {
  const text = String(value);
  // keep a decimal marker so the reader sees a float, not an integer
  return /[.e]/.test(text) ? text : text + ".0";
}

/** Compact term text, matching the server side byte for byte for the
 * request subset (no operators other than list sugar). */
export function writeTerm(term: Term): string {
  switch (term.tag) {
    case "atom":
      return writeAtom(term.name);
    case "int":
      return String(term.value);
    case "float":
      return writeFloat(term.value);
    case "var":
      return term.name;
    case "compound": {
      const items = listItems(term);
      if (items !== null) {
        return "[" + items.map(writeTerm).join(",") + "]";
      }
      if (term.functor === "." && term.args.length === 2) {
        // improper list: walk the spine by hand
        const parts: string[] = [];
        let cur: Term = term;
        while (
          cur.tag === "compound" &&
          cur.functor === "." &&
          cur.args.length === 2
        ) {
          parts.push(writeTerm(cur.args[0]));
          cur = cur.args[1];
        }
        return "[" + parts.join(",") + "|" + writeTerm(cur) + "]";
      }
      return (
        writeAtom(term.functor) + "(" + term.args.map(writeTerm).join(",") + ")"
      );
    }
  }
}

/** One framed wire message: term text, terminator, newline. */
export function writeMessage(term: Term): string {
  const text = writeTerm(term);
  const last = text[text.length - 1];
  return text + (SYMBOL_CHARS.has(last) ? " .\n" : ".\n");
}

// ------------------------------------------------------------------
// Reader
// ------------------------------------------------------------------

export class TermParseError extends Error {}

type Token =
  | { kind: "atom"; name: string }
  | { kind: "int"; value: number }
  | { kind: "float"; value: number }
  | { kind: "var"; name: string }
  | { kind: "punct"; text: string }
  | { kind: "end" };

const ESCAPES: Record<string, string> = {
  n: "\n",
  t: "\t",
  r: "\r",
  a: "\x07",
  b: "\b",
  f: "\f",
  v: "\v",
  "\\": "\\",
  "'": "'",
  '"': '"',
};

function tokenize(text: string): Token[] {
  const tokens: Token[] = [];
  let i = 0;
  const n = text.length;
  const isDigit = (c: string) => c >= "0" && c <= "9";
  const isWord = (c: string) => /[a-zA-Z0-9_]/.test(c);

  while (i < n) {
    const c = text[i];
    if (c === " " || c === "\t" || c === "\r" || c === "\n") {
      i++;
      continue;
    }
    if (c === "%") {
      while (i < n && text[i] !== "\n") i++;
      continue;
    }
    if ("()[],|".includes(c)) {
      tokens.push({ kind: "punct", text: c });
      i++;
      continue;
    }
    if (c === "'") {
      let name = "";
      i++;
      while (true) {
        if (i >= n) throw new TermParseError("unterminated quoted atom");
        const q = text[i];
        if (q === "'") {
          if (text[i + 1] === "'") {
            name += "'";
            i += 2;
          } else {
            i++;
            break;
          }
        } else if (q === "\\") {
          const e = text[i + 1];
          if (e === undefined) throw new TermParseError("dangling escape");
          const mapped = ESCAPES[e];
          if (mapped === undefined)
            throw new TermParseError(`unknown escape \\${e}`);
          name += mapped;
          i += 2;
        } else {
          name += q;
          i++;
        }
      }
      tokens.push({ kind: "atom", name });
      continue;
    }
    if (isDigit(c)) {
      let j = i;
      while (j < n && isDigit(text[j])) j++;
      let isFloat = false;
      if (text[j] === "." && isDigit(text[j + 1] ?? "")) {
        isFloat = true;
        j++;
        while (j < n && isDigit(text[j])) j++;
      }
      if (text[j] === "e" || text[j] === "E") {
        let k = j + 1;
        if (text[k] === "+" || text[k] === "-") k++;
        if (isDigit(text[k] ?? "")) {
          isFloat = true;
          j = k;
          while (j < n && isDigit(text[j])) j++;
        }
      }
      const slice = text.slice(i, j);
      tokens.push(
        isFloat
          ? { kind: "float", value: Number(slice) }
          : { kind: "int", value: Number(slice) }
      );
      i = j;
      continue;
    }
    if (/[a-z]/.test(c)) {
      let j = i;
      while (j < n && isWord(text[j])) j++;
      tokens.push({ kind: "atom", name: text.slice(i, j) });
      i = j;
      continue;
    }
    if (/[A-Z_]/.test(c)) {
      let j = i;
      while (j < n && isWord(text[j])) j++;
      tokens.push({ kind: "var", name: text.slice(i, j) });
      i = j;
      continue;
    }
    if (SYMBOL_CHARS.has(c)) {
      let j = i;
      while (j < n && SYMBOL_CHARS.has(text[j])) j++;
      const name = text.slice(i, j);
      if (name === "." && (j >= n || " \t\r\n".includes(text[j]) || j === n)) {
        tokens.push({ kind: "end" });
        i = j;
        continue;
      }
      tokens.push({ kind: "atom", name });
      i = j;
      continue;
    }
    if (c === "!" || c === ";") {
      tokens.push({ kind: "atom", name: c });
      i++;
      continue;
    }
    throw new TermParseError(`unexpected character ${JSON.stringify(c)}`);
  }
  tokens.push({ kind: "end" });
  return tokens;
}

class Reader {
  private pos = 0;
  constructor(private tokens: Token[]) {}

  private peek(): Token {
    return this.tokens[this.pos];
  }

  private next(): Token {
    return this.tokens[this.pos++];
  }

  private expect(text: string) {
    const t = this.next();
    if (t.kind !== "punct" || t.text !== text)
      throw new TermParseError(`expected ${text}`);
  }

  /** primary followed by an optional left-associative `=` / `/` chain */
  term(): Term {
    let left = this.primary();
    while (true) {
      const t = this.peek();
      if (t.kind === "atom" && (t.name === "=" || t.name === "/")) {
        this.next();
        const right = this.primary();
        left = compound(t.name, [left, right]);
      } else {
        return left;
      }
    }
  }

  private primary(): Term {
    const t = this.next();
    switch (t.kind) {
      case "int":
        return int(t.value);
      case "float":
        return { tag: "float", value: t.value };
      case "var":
        return variable(t.name);
      case "punct":
        if (t.text === "(") {
          const inner = this.term();
          this.expect(")");
          return inner;
        }
        if (t.text === "[") return this.listTail();
        throw new TermParseError(`unexpected ${t.text}`);
      case "atom": {
        if (t.name === "-") {
          const after = this.peek();
          if (after.kind === "int") {
            this.next();
            return int(-after.value);
          }
          if (after.kind === "float") {
            this.next();
            return { tag: "float", value: -after.value };
          }
        }
        const after = this.peek();
        if (after.kind === "punct" && after.text === "(") {
          this.next();
          const args = [this.term()];
          while (this.peek().kind === "punct" && (this.peek() as any).text === ",") {
            this.next();
            args.push(this.term());
          }
          this.expect(")");
          return compound(t.name, args);
        }
        return atom(t.name);
      }
      default:
        throw new TermParseError("unexpected end of term");
    }
  }

  private listTail(): Term {
    if (this.peek().kind === "punct" && (this.peek() as any).text === "]") {
      this.next();
      return NIL;
    }
    const items = [this.term()];
    while (true) {
      const t = this.next();
      if (t.kind === "punct" && t.text === ",") {
        items.push(this.term());
      } else if (t.kind === "punct" && t.text === "|") {
        const tail = this.term();
        this.expect("]");
        return list(items, tail);
      } else if (t.kind === "punct" && t.text === "]") {
        return list(items);
      } else {
        throw new TermParseError("bad list");
      }
    }
  }

  finish(term: Term): Term {
    if (this.next().kind !== "end") throw new TermParseError("trailing tokens");
    if (this.peek() !== undefined && this.peek().kind !== "end")
      throw new TermParseError("text after terminator");
    return term;
  }
}

/** Parse one terminated term, e.g. `yes(['X'=[1,2]]).` */
export function parseTerm(text: string): Term {
  const reader = new Reader(tokenize(text));
  return reader.finish(reader.term());
}

// ------------------------------------------------------------------
// Framing
// ------------------------------------------------------------------

/**
 * Incremental frame scanner. Feed raw socket bytes; complete messages
 * come out as text (terminator and newline stripped). Tracks quoted
 * atoms so a period inside `'...'` never ends a message.
 */
export class FrameScanner {
  private buf = Buffer.alloc(0);
  private scanned = 0;
  private state: "normal" | "quote" | "escape" | "qpending" | "dot" = "normal";
  private frames: string[] = [];

  push(chunk: Buffer) {
    this.buf = Buffer.concat([this.buf, chunk]);
    this.scan();
  }

  shift(): string | undefined {
    return this.frames.shift();
  }

  private scan() {
    while (this.scanned < this.buf.length) {
      const c = this.buf[this.scanned];
      this.scanned++;
      switch (this.state) {
        case "normal":
          if (c === 0x27) this.state = "quote";
          else if (c === 0x2e) this.state = "dot";
          break;
        case "quote":
          if (c === 0x5c) this.state = "escape";
          else if (c === 0x27) this.state = "qpending";
          break;
        case "escape":
          this.state = "quote";
          break;
        case "qpending":
          if (c === 0x27) {
            this.state = "quote"; // doubled quote, still inside
          } else {
            this.state = "normal";
            this.scanned--; // reprocess this byte outside the atom
          }
          break;
        case "dot":
          if (c === 0x0a) {
            const whole = this.buf.subarray(0, this.scanned).toString("utf-8");
            this.frames.push(whole.replace(/\s*\.\s*\n$/, ""));
            this.buf = this.buf.subarray(this.scanned);
            this.scanned = 0;
            this.state = "normal";
          } else if (c !== 0x20 && c !== 0x09 && c !== 0x0d) {
            this.state = "normal";
            this.scanned--; // ordinary period inside the term
          }
          break;
      }
    }
  }
}
