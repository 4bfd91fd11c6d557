"""Mini three-address IR: lexer, parser, printer, validator and corpus loader.

Grammar::

    program  := method+
    method   := "method" NAME "(" names? ")" "{" line+ "}"
    line     := (LABEL ":")? stmt ";"
    stmt     := NAME "=" rhs | "if" atom RELOP atom "goto" LABEL
              | "goto" LABEL | "return" atom? | callstmt
    rhs      := atom | atom BINOP atom | "call" NAME "(" atoms? ")"
    callstmt := "call" NAME "(" atoms? ")"
    atom     := NAME | INT

``#`` starts a comment that runs to the end of the line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator


class Kind(IntEnum):
    ASSIGN = 0
    ARITH = 1
    COMPARE = 2
    BRANCH = 3
    JUMP = 4
    CALL = 5
    RETURN = 6


BINOPS = ("+", "-", "*", "/", "%")
RELOPS = ("<", "<=", "==", "!=", ">", ">=")
KEYWORDS = {"method", "if", "goto", "return", "call"}


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    index: int
    kind: Kind
    text: str
    defs: tuple[str, ...] = ()
    uses: tuple[str, ...] = ()
    callee: str | None = None
    jump_target: str | None = None


@dataclass(frozen=True)
class Method:
    name: str
    params: tuple[str, ...]
    instructions: tuple[Instruction, ...]
    labels: dict[str, int] = field(default_factory=dict, hash=False)

    def __len__(self) -> int:
        return len(self.instructions)


@dataclass(frozen=True)
class Program:
    name: str
    methods: dict[str, Method]
    label: str | None = None
    group: str | None = None

    def method_list(self) -> list[Method]:
        return list(self.methods.values())

    def instructions(self) -> Iterator[Instruction]:
        for m in self.methods.values():
            yield from m.instructions

    def is_external(self, callee: str) -> bool:
        return callee not in self.methods


# ---------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>#[^\n]*)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>\d+)"
    r"|(?P<op><=|>=|==|!=|[+\-*/%<>=(){},;:])"
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # name | int | op | eof
    value: str
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


# ---------------------------------------------------------------- parser


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0

    def peek(self, offset: int = 0) -> _Tok:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.peek()
        self.i += 1
        return tok

    def error(self, message: str, tok: _Tok | None = None) -> ParseError:
        tok = tok or self.peek()
        found = tok.value or "end of input"
        return ParseError(f"{message}, found {found!r}", tok.line, tok.col)

    def expect(self, value: str) -> _Tok:
        tok = self.peek()
        if tok.kind == "eof" or tok.value != value or (tok.kind == "name" and value not in KEYWORDS):
            raise self.error(f"expected {value!r}")
        return self.next()

    def name(self, what: str = "name") -> str:
        tok = self.peek()
        if tok.kind != "name" or tok.value in KEYWORDS:
            raise self.error(f"expected {what}")
        return self.next().value

    def atom(self) -> str:
        tok = self.peek()
        if tok.kind == "int" or (tok.kind == "name" and tok.value not in KEYWORDS):
            return self.next().value
        raise self.error("expected a name or integer")

    def program(self, name: str) -> Program:
        methods: dict[str, Method] = {}
        while self.peek().kind != "eof":
            start = self.peek()
            m = self.method()
            if m.name in methods:
                raise ParseError(f"duplicate method {m.name!r}", start.line, start.col)
            methods[m.name] = m
        if not methods:
            raise self.error("expected at least one method")
        return Program(name=name, methods=methods)

    def method(self) -> Method:
        self.expect("method")
        mname = self.name("method name")
        self.expect("(")
        params: list[str] = []
        if self.peek().value != ")":
            params.append(self.name("parameter name"))
            while self.peek().value == ",":
                self.next()
                params.append(self.name("parameter name"))
        self.expect(")")
        self.expect("{")
        raw: list[tuple[dict, _Tok]] = []
        labels: dict[str, int] = {}
        while self.peek().value != "}":
            if self.peek().kind == "eof":
                raise self.error("expected '}'")
            if self.peek().kind == "name" and self.peek().value not in KEYWORDS and self.peek(1).value == ":":
                ltok = self.next()
                self.next()
                if ltok.value in labels:
                    raise ParseError(f"duplicate label {ltok.value!r}", ltok.line, ltok.col)
                labels[ltok.value] = len(raw)
            start = self.peek()
            raw.append((self.stmt(), start))
            self.expect(";")
        close = self.expect("}")
        if not raw:
            raise ParseError(f"method {mname!r} has no instructions", close.line, close.col)
        instrs = []
        for index, (spec, tok) in enumerate(raw):
            target = spec.get("jump_target")
            if target is not None and target not in labels:
                raise ParseError(f"unresolved jump target {target!r}", tok.line, tok.col)
            instrs.append(Instruction(index=index, **spec))
        return Method(name=mname, params=tuple(params), instructions=tuple(instrs), labels=labels)

    def call_args(self) -> list[str]:
        self.expect("(")
        args: list[str] = []
        if self.peek().value != ")":
            args.append(self.atom())
            while self.peek().value == ",":
                self.next()
                args.append(self.atom())
        self.expect(")")
        return args

    def stmt(self) -> dict:
        tok = self.peek()
        if tok.value == "if" and tok.kind == "name":
            self.next()
            a = self.atom()
            op = self.next()
            if op.value not in RELOPS:
                raise self.error("expected a relational operator", op)
            b = self.atom()
            self.expect("goto")
            label = self.name("label")
            return dict(kind=Kind.BRANCH, text=f"if {a} {op.value} {b} goto {label}",
                        uses=_vars(a, b), jump_target=label)
        if tok.value == "goto" and tok.kind == "name":
            self.next()
            label = self.name("label")
            return dict(kind=Kind.JUMP, text=f"goto {label}", jump_target=label)
        if tok.value == "return" and tok.kind == "name":
            self.next()
            if self.peek().value == ";":
                return dict(kind=Kind.RETURN, text="return")
            a = self.atom()
            return dict(kind=Kind.RETURN, text=f"return {a}", uses=_vars(a))
        if tok.value == "call" and tok.kind == "name":
            self.next()
            callee = self.name("callee")
            args = self.call_args()
            return dict(kind=Kind.CALL, text=f"call {callee}({', '.join(args)})",
                        uses=_vars(*args), callee=callee)
        target = self.name("statement")
        self.expect("=")
        if self.peek().value == "call" and self.peek().kind == "name":
            self.next()
            callee = self.name("callee")
            args = self.call_args()
            return dict(kind=Kind.CALL, text=f"{target} = call {callee}({', '.join(args)})",
                        defs=(target,), uses=_vars(*args), callee=callee)
        a = self.atom()
        op = self.peek()
        if op.kind == "op" and (op.value in BINOPS or op.value in RELOPS):
            self.next()
            b = self.atom()
            kind = Kind.ARITH if op.value in BINOPS else Kind.COMPARE
            return dict(kind=kind, text=f"{target} = {a} {op.value} {b}", defs=(target,), uses=_vars(a, b))
        return dict(kind=Kind.ASSIGN, text=f"{target} = {a}", defs=(target,), uses=_vars(a))


def _vars(*atoms: str) -> tuple[str, ...]:
    seen: list[str] = []
    for a in atoms:
        if not a[0].isdigit() and a not in seen:
            seen.append(a)
    return tuple(seen)


def parse_program(text: str, name: str = "program") -> Program:
    return _Parser(text).program(name)


def print_program(p: Program) -> str:
    """Canonical text form; ``parse_program(print_program(p))`` equals ``p``."""
    out = []
    for m in p.methods.values():
        out.append(f"method {m.name}({', '.join(m.params)}) {{")
        at = {i: lab for lab, i in m.labels.items()}
        for ins in m.instructions:
            prefix = f"{at[ins.index]}: " if ins.index in at else ""
            out.append(f"  {prefix}{ins.text};")
        out.append("}")
    return "\n".join(out) + "\n"


def structurally_equal(a: Program, b: Program) -> bool:
    if list(a.methods) != list(b.methods):
        return False
    return all(
        ma.params == mb.params and ma.instructions == mb.instructions and ma.labels == mb.labels
        for ma, mb in zip(a.methods.values(), b.methods.values())
    )


# ---------------------------------------------------------------- validation


def successors(m: Method) -> dict[int, list[int]]:
    """Intra-method successor lists; falling off the end yields no successor."""
    n = len(m.instructions)
    succ: dict[int, list[int]] = {}
    for ins in m.instructions:
        i = ins.index
        nxt: list[int] = []
        if ins.kind == Kind.JUMP:
            nxt.append(m.labels[ins.jump_target])
        elif ins.kind != Kind.RETURN:
            if i + 1 < n:
                nxt.append(i + 1)
            if ins.kind == Kind.BRANCH:
                t = m.labels[ins.jump_target]
                if t not in nxt:
                    nxt.append(t)
        succ[i] = nxt
    return succ


def _falls_off(m: Method, ins: Instruction) -> bool:
    return ins.index == len(m.instructions) - 1 and ins.kind not in (Kind.RETURN, Kind.JUMP)


def _reachable(m: Method, succ: dict[int, list[int]]) -> set[int]:
    seen, stack = set(), [0]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(succ[i])
    return seen


def validate(p: Program) -> list[str]:
    """Diagnostics for use-before-def and missing returns; empty when clean."""
    diags: list[str] = []
    for m in p.methods.values():
        succ = successors(m)
        reach = _reachable(m, succ)
        # variables that may be defined on entry to each instruction
        n = len(m.instructions)
        defined_in: list[set[str] | None] = [None] * n
        defined_in[0] = set(m.params)
        work = [0]
        while work:
            i = work.pop()
            out = defined_in[i] | set(m.instructions[i].defs)
            for s in succ[i]:
                if defined_in[s] is None or not out <= defined_in[s]:
                    defined_in[s] = out | (defined_in[s] or set())
                    work.append(s)
        for ins in m.instructions:
            if ins.index not in reach:
                continue
            for v in ins.uses:
                if v not in defined_in[ins.index]:
                    diags.append(f"{m.name}:{ins.index}: use of {v!r} before definition")
        for i in sorted(reach):
            if _falls_off(m, m.instructions[i]):
                diags.append(f"{m.name}:{i}: control falls off the end without return")
    return diags


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class Record:
    id: str
    program: Program
    label: str | None = None
    group: str | None = None
    code: str = ""


def load_corpus(path: str | Path) -> list[Record]:
    records: list[Record] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: malformed JSON on line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict) or "id" not in obj or "code" not in obj:
                raise CorpusError(f"{path}: record on line {lineno} needs 'id' and 'code'")
            try:
                prog = parse_program(obj["code"], name=str(obj["id"]))
            except ParseError as exc:
                raise CorpusError(f"{path}: record {lineno} ({obj['id']!r}) failed to parse: {exc}") from None
            label, group = obj.get("label"), obj.get("group")
            records.append(Record(id=str(obj["id"]), program=Program(prog.name, prog.methods, label, group),
                                  label=label, group=group, code=obj["code"]))
    return records


def write_corpus(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
