"""The core contract language: state lives behind ``load``/``store``,
expressions are state-free, and functions may call each other.

::

    contract Token {
      state totalSupply: int;
      state balances: map^1;

      entry fn transfer(to, value) {
        b = load balances[sender];
        assert b >= value;
        store balances[sender], b - value;
        c = load balances[to];
        store balances[to], c + value;
      }
    }

``memory`` declarations name transaction-scoped maps; they are never persisted.
Operators suffixed with ``$`` (``+$ -$ *$ /$``) are exact: they never wrap,
even when the VM runs in 256-bit mode.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterator, Union

from .errors import (
    ArityMismatch,
    DuplicateFunction,
    DuplicateState,
    ForInUnusedIterator,
    ParseError,
    ReservedName,
    UndeclaredTemp,
    UnknownCallee,
    UnknownVariable,
)
from .lexer import TokenStream

RESERVED_PREFIX = "__"
BUILTINS = ("sender", "calldepth")
KEYWORDS = frozenset({
    "contract", "state", "memory", "entry", "fn", "store", "load", "if", "for", "in",
    "assert", "call", "int", "map", *BUILTINS,
})

PRECEDENCE = {
    "||": 1, "&&": 2,
    "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
    "+": 4, "-": 4, "+$": 4, "-$": 4,
    "*": 5, "/": 5, "%": 5, "*$": 5, "/$": 5,
}
COMPARISONS = frozenset(op for op, p in PRECEDENCE.items() if p == 3)


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Temp:
    name: str


@dataclass(frozen=True)
class Builtin:
    kind: str  # "sender" | "calldepth"


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "CExpr"
    rhs: "CExpr"


CExpr = Union[Const, Temp, Builtin, BinOp]


@dataclass(frozen=True)
class Address:
    var: str
    indices: tuple = ()


@dataclass(frozen=True)
class Assign:
    temp: str
    expr: CExpr


@dataclass(frozen=True)
class Load:
    temp: str
    address: Address


@dataclass(frozen=True)
class Store:
    address: Address
    expr: CExpr


@dataclass(frozen=True)
class If:
    cond: CExpr
    body: tuple


@dataclass(frozen=True)
class ForIn:
    temps: tuple[str, ...]
    var: str
    body: tuple


@dataclass(frozen=True)
class Assert:
    expr: CExpr


@dataclass(frozen=True)
class Call:
    function: str
    args: tuple = ()


Statement = Union[Assign, Load, Store, If, ForIn, Assert, Call]
STATEMENT_TYPES = (Assign, Load, Store, If, ForIn, Assert, Call)


@dataclass(frozen=True)
class Decl:
    name: str
    arity: int
    kind: str = "state"  # "state" | "memory"


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    body: tuple
    entry: bool = False


@dataclass(frozen=True)
class Program:
    name: str
    decls: tuple[Decl, ...] = ()
    functions: tuple[Function, ...] = ()

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise UnknownCallee(f"no function named {name!r}")

    def decl(self, name: str) -> Decl:
        for d in self.decls:
            if d.name == name:
                return d
        raise UnknownVariable(f"no declaration named {name!r}")

    @property
    def entry_functions(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.functions if f.entry)

    @property
    def state_vars(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.decls if d.kind == "state")


# --- traversal -----------------------------------------------------------------

def iter_statements(body) -> Iterator[Statement]:
    """Pre-order over a statement list, descending into If/ForIn bodies."""
    for s in body:
        yield s
        if isinstance(s, (If, ForIn)):
            yield from iter_statements(s.body)


def expr_temps(e) -> Iterator[str]:
    if isinstance(e, Temp):
        yield e.name
    elif isinstance(e, BinOp):
        yield from expr_temps(e.lhs)
        yield from expr_temps(e.rhs)


def statement_addresses(s) -> list[Address]:
    if isinstance(s, Load):
        return [s.address]
    if isinstance(s, Store):
        return [s.address]
    return []


def assigned_temps(s) -> list[str]:
    if isinstance(s, (Assign, Load)):
        return [s.temp]
    if isinstance(s, ForIn):
        return list(s.temps)
    return []


def read_temps(s) -> list[str]:
    exprs = []
    if isinstance(s, (Assign, Store)):
        exprs.append(s.expr)
    if isinstance(s, (If,)):
        exprs.append(s.cond)
    if isinstance(s, Assert):
        exprs.append(s.expr)
    if isinstance(s, Call):
        exprs.extend(s.args)
    for a in statement_addresses(s):
        exprs.extend(a.indices)
    return [t for e in exprs for t in expr_temps(e)]


def forin_positions(loop: ForIn) -> tuple[int, ...] | None:
    """Key position each loop temp ranges over, taken from the first address of
    ``loop.var`` in the body that uses the temp directly as an index."""
    positions = []
    for t in loop.temps:
        pos = None
        for s in iter_statements(loop.body):
            for a in statement_addresses(s):
                if a.var == loop.var and Temp(t) in a.indices:
                    pos = a.indices.index(Temp(t))
                    break
            if pos is not None:
                break
        if pos is None:
            return None
        positions.append(pos)
    return tuple(positions)


def stored_vars(body) -> set[str]:
    return {s.address.var for s in iter_statements(body) if isinstance(s, Store)}


# --- parser -----------------------------------------------------------------

class _ContractParser:
    def __init__(self, text: str, reserved_ok: bool):
        self.ts = TokenStream(text)
        self.reserved_ok = reserved_ok

    def name(self) -> str:
        tok = self.ts.expect_ident()
        if tok.text in KEYWORDS:
            raise ParseError(f"keyword {tok.text!r} used as a name", tok.line, tok.col)
        if tok.text.startswith(RESERVED_PREFIX) and not self.reserved_ok:
            raise ReservedName(f"identifier {tok.text!r} uses the reserved prefix {RESERVED_PREFIX!r}",
                               tok.line, tok.col)
        return tok.text

    def program(self) -> Program:
        self.ts.expect("contract")
        name = self.name()
        self.ts.expect("{")
        decls, functions = [], []
        decl_names, fn_names = set(), set()
        while not self.ts.accept("}"):
            tok = self.ts.peek()
            if self.ts.at("state") or self.ts.at("memory"):
                kind = self.ts.next().text
                dname = self.name()
                self.ts.expect(":")
                if self.ts.accept("int"):
                    arity = 0
                else:
                    self.ts.expect("map")
                    self.ts.expect("^")
                    arity = int(self.ts.expect_int().text)
                    if arity < 1:
                        raise ParseError("map arity must be at least 1", tok.line, tok.col)
                self.ts.expect(";")
                if dname in decl_names:
                    raise DuplicateState(f"state variable {dname!r} declared twice", tok.line, tok.col)
                decl_names.add(dname)
                decls.append(Decl(dname, arity, kind))
            else:
                entry = self.ts.accept("entry")
                self.ts.expect("fn")
                fname = self.name()
                self.ts.expect("(")
                params = []
                if not self.ts.at(")"):
                    params.append(self.name())
                    while self.ts.accept(","):
                        params.append(self.name())
                self.ts.expect(")")
                if len(set(params)) != len(params):
                    raise ParseError(f"duplicate parameter in {fname!r}", tok.line, tok.col)
                body = self.block()
                if fname in fn_names:
                    raise DuplicateFunction(f"function {fname!r} defined twice", tok.line, tok.col)
                fn_names.add(fname)
                functions.append(Function(fname, tuple(params), body, entry))
        if self.ts.peek().kind != "eof":
            raise self.ts.error("trailing input after contract")
        return Program(name, tuple(decls), tuple(functions))

    def block(self) -> tuple:
        self.ts.expect("{")
        stmts = []
        while not self.ts.accept("}"):
            stmts.append(self.statement())
        return tuple(stmts)

    def statement(self) -> Statement:
        if self.ts.accept("store"):
            addr = self.address()
            self.ts.expect(",")
            e = self.expr()
            self.ts.expect(";")
            return Store(addr, e)
        if self.ts.accept("if"):
            cond = self.expr()
            return If(cond, self.block())
        if self.ts.accept("for"):
            temps = [self.name()]
            while self.ts.accept(","):
                temps.append(self.name())
            self.ts.expect("in")
            var = self.name()
            return ForIn(tuple(temps), var, self.block())
        if self.ts.accept("assert"):
            e = self.expr()
            self.ts.expect(";")
            return Assert(e)
        if self.ts.accept("call"):
            fname = self.name()
            self.ts.expect("(")
            args = []
            if not self.ts.at(")"):
                args.append(self.expr())
                while self.ts.accept(","):
                    args.append(self.expr())
            self.ts.expect(")")
            self.ts.expect(";")
            return Call(fname, tuple(args))
        temp = self.name()
        self.ts.expect("=")
        if self.ts.accept("load"):
            addr = self.address()
            self.ts.expect(";")
            return Load(temp, addr)
        e = self.expr()
        self.ts.expect(";")
        return Assign(temp, e)

    def address(self) -> Address:
        var = self.name()
        indices = []
        while self.ts.accept("["):
            indices.append(self.expr())
            self.ts.expect("]")
        return Address(var, tuple(indices))

    def expr(self, min_prec: int = 1) -> CExpr:
        lhs = self.primary()
        while True:
            tok = self.ts.peek()
            prec = PRECEDENCE.get(tok.text) if tok.kind == "op" else None
            if prec is None or prec < min_prec:
                return lhs
            self.ts.next()
            rhs = self.expr(prec + 1)
            lhs = BinOp(tok.text, lhs, rhs)
            if prec == 3 and self.ts.peek().kind == "op" and self.ts.peek().text in COMPARISONS:
                raise self.ts.error("comparisons do not chain; add parentheses")

    def primary(self) -> CExpr:
        tok = self.ts.peek()
        if tok.kind == "int":
            return Const(int(self.ts.next().text))
        if self.ts.accept("("):
            e = self.expr()
            self.ts.expect(")")
            return e
        if tok.kind == "ident" and tok.text in BUILTINS:
            return Builtin(self.ts.next().text)
        if tok.kind == "ident":
            return Temp(self.name())
        raise self.ts.error(f"unexpected {tok.text or 'end of input'!r} in expression")


def validate(program: Program) -> Program:
    """Static well-formedness checks beyond the grammar; returns the program."""
    decls = {d.name: d for d in program.decls}
    fns = {f.name: f for f in program.functions}
    for f in program.functions:
        known = set(f.params)
        for s in iter_statements(f.body):
            known.update(assigned_temps(s))
        for s in iter_statements(f.body):
            for t in read_temps(s):
                if t not in known:
                    raise UndeclaredTemp(f"temp {t!r} is read in {f.name!r} but never assigned")
            for a in statement_addresses(s):
                if a.var not in decls:
                    raise UnknownVariable(f"undeclared state variable {a.var!r} in {f.name!r}")
                if decls[a.var].arity != len(a.indices):
                    raise ArityMismatch(
                        f"{a.var!r} has arity {decls[a.var].arity} but is indexed {len(a.indices)} times")
            if isinstance(s, ForIn):
                if s.var not in decls or decls[s.var].arity == 0:
                    raise UnknownVariable(f"for-in over {s.var!r}, which is not a declared map")
                if len(set(s.temps)) != len(s.temps):
                    raise ParseError(f"repeated loop variable in {f.name!r}")
                positions = forin_positions(s)
                if positions is None:
                    raise ForInUnusedIterator(
                        f"loop over {s.var!r} in {f.name!r} does not index it by every loop variable")
                if len(set(positions)) != len(positions):
                    raise ForInUnusedIterator(f"two loop variables share one key position of {s.var!r}")
            if isinstance(s, Call):
                if s.function not in fns:
                    raise UnknownCallee(f"{f.name!r} calls unknown function {s.function!r}")
                if len(fns[s.function].params) != len(s.args):
                    raise ArityMismatch(f"call to {s.function!r} passes {len(s.args)} arguments")
    return program


def parse_contract(text: str, *, reserved_ok: bool = False) -> Program:
    """Parse and validate a contract. ``reserved_ok`` admits ``__``-prefixed
    names, which only the instrumenter may introduce."""
    return validate(_ContractParser(text, reserved_ok).program())


# --- printer ----------------------------------------------------------------

def format_expr(e: CExpr, parent: int = 0, right: bool = False) -> str:
    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, Temp):
        return e.name
    if isinstance(e, Builtin):
        return e.kind
    prec = PRECEDENCE[e.op]
    text = f"{format_expr(e.lhs, prec)} {e.op} {format_expr(e.rhs, prec, True)}"
    if prec < parent or (prec == parent and (right or prec == 3)):
        return f"({text})"
    return text


def format_address(a: Address) -> str:
    return a.var + "".join(f"[{format_expr(ix)}]" for ix in a.indices)


def _format_block(body, indent: int, out: list[str]) -> None:
    pad = "  " * indent
    for s in body:
        if isinstance(s, Assign):
            out.append(f"{pad}{s.temp} = {format_expr(s.expr)};")
        elif isinstance(s, Load):
            out.append(f"{pad}{s.temp} = load {format_address(s.address)};")
        elif isinstance(s, Store):
            out.append(f"{pad}store {format_address(s.address)}, {format_expr(s.expr)};")
        elif isinstance(s, Assert):
            out.append(f"{pad}assert {format_expr(s.expr)};")
        elif isinstance(s, Call):
            out.append(f"{pad}call {s.function}({', '.join(format_expr(a) for a in s.args)});")
        elif isinstance(s, If):
            out.append(f"{pad}if {format_expr(s.cond)} {{")
            _format_block(s.body, indent + 1, out)
            out.append(f"{pad}}}")
        elif isinstance(s, ForIn):
            out.append(f"{pad}for {', '.join(s.temps)} in {s.var} {{")
            _format_block(s.body, indent + 1, out)
            out.append(f"{pad}}}")
        else:
            raise TypeError(f"not a statement: {s!r}")


def pretty_print(program: Program) -> str:
    out = [f"contract {program.name} {{"]
    for d in program.decls:
        kind = "int" if d.arity == 0 else f"map^{d.arity}"
        out.append(f"  {d.kind} {d.name}: {kind};")
    for f in program.functions:
        if len(out) > 1:
            out.append("")
        prefix = "entry fn" if f.entry else "fn"
        out.append(f"  {prefix} {f.name}({', '.join(f.params)}) {{")
        _format_block(f.body, 2, out)
        out.append("  }")
    out.append("}")
    return "\n".join(out) + "\n"


# --- call graph -------------------------------------------------------------

def call_graph(program: Program) -> dict[str, list[str]]:
    names = {f.name for f in program.functions}
    graph = {}
    for f in program.functions:
        callees = set()
        for s in iter_statements(f.body):
            if isinstance(s, Call):
                if s.function not in names:
                    raise UnknownCallee(f"{f.name!r} calls unknown function {s.function!r}")
                callees.add(s.function)
        graph[f.name] = sorted(callees)
    return graph


def reachable(program: Program, entry: str, graph: dict[str, list[str]] | None = None) -> set[str]:
    graph = graph if graph is not None else call_graph(program)
    seen, todo = {entry}, deque([entry])
    while todo:
        for g in graph[todo.popleft()]:
            if g not in seen:
                seen.add(g)
                todo.append(g)
    return seen
