"""Invariant specification language.

Two kinds of rules::

    s = Map a, b Sum weights[a][c] Over c Where ballots[a][c] == b && b != 0;
    ForAll x, y Assert s[x][y] == weightedVoteCount[x][y];

The first declares an intermediate value (a conditional sum over defined map
keys), the second a quantified assertion. ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

from .errors import (
    ArityMismatch,
    DuplicateIntermediate,
    FreeVarScopeError,
    ParseError,
    ReservedName,
    UnknownOperator,
    UnknownVariable,
)
from .lexer import TokenStream

ARITH_OPS = ("+", "-", "*", "/")
CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
KEYWORDS = frozenset({"Map", "Sum", "Over", "Where", "ForAll", "Assert"})
RESERVED_PREFIX = "__"


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class IntConst:
    value: int


@dataclass(frozen=True)
class StateRef:
    var: str


@dataclass(frozen=True)
class MapAccess:
    var: str
    indices: tuple[str, ...]


@dataclass(frozen=True)
class FreeRef:
    """A bare free variable used as a value, e.g. ``b`` in ``b != 0``."""

    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "IExpr"
    rhs: "IExpr"


IExpr = Union[IntConst, StateRef, MapAccess, FreeRef, BinOp]


@dataclass(frozen=True)
class Cmp:
    op: str
    lhs: IExpr
    rhs: IExpr


@dataclass(frozen=True)
class EqFree:
    """``expr == var`` where ``var`` is a free variable of the rule."""

    expr: IExpr
    var: str


@dataclass(frozen=True)
class And:
    lhs: "ICond"
    rhs: "ICond"


ICond = Union[Cmp, EqFree, And]


@dataclass(frozen=True)
class MapSumDecl:
    target: str
    index_vars: tuple[str, ...]
    body: IExpr
    over_vars: tuple[str, ...]
    where: ICond | None = None

    @property
    def free_vars(self) -> tuple[str, ...]:
        return self.index_vars + self.over_vars


@dataclass(frozen=True)
class ForAllAssert:
    quant_vars: tuple[str, ...]
    body: ICond

    @property
    def free_vars(self) -> tuple[str, ...]:
        return self.quant_vars


Rule = Union[MapSumDecl, ForAllAssert]


@dataclass(frozen=True)
class InvariantSpec:
    rules: tuple[Rule, ...] = ()

    @property
    def intermediates(self) -> dict[str, int]:
        return {r.target: len(r.index_vars) for r in self.rules if isinstance(r, MapSumDecl)}


# --- traversal helpers -------------------------------------------------------

def walk(node) -> Iterator:
    """Pre-order walk over expression and condition nodes, left to right."""
    yield node
    if isinstance(node, (BinOp, Cmp, And)):
        yield from walk(node.lhs)
        yield from walk(node.rhs)
    elif isinstance(node, EqFree):
        yield from walk(node.expr)


def free_vars_in(node) -> set[str]:
    out = set()
    for n in walk(node):
        if isinstance(n, MapAccess):
            out.update(n.indices)
        elif isinstance(n, FreeRef):
            out.add(n.name)
        elif isinstance(n, EqFree):
            out.add(n.var)
    return out


def map_occurrences(*nodes) -> list[MapAccess]:
    return [n for node in nodes if node is not None for n in walk(node) if isinstance(n, MapAccess)]


def referenced_names(rule: Rule) -> set[str]:
    nodes = (rule.body, rule.where) if isinstance(rule, MapSumDecl) else (rule.body,)
    return {n.var for node in nodes if node is not None for n in walk(node)
            if isinstance(n, (StateRef, MapAccess))}


def conjuncts(cond: ICond | None) -> list:
    if cond is None:
        return []
    if isinstance(cond, And):
        return conjuncts(cond.lhs) + conjuncts(cond.rhs)
    return [cond]


def derived_var(rule: MapSumDecl) -> tuple[str, IExpr] | None:
    """The leftmost ``e == x`` conjunct whose ``e`` does not mention ``x``.

    Such a variable is not enumerated: its value is forced to ``e``.
    """
    for c in conjuncts(rule.where):
        if isinstance(c, EqFree) and c.var not in free_vars_in(c.expr):
            return c.var, c.expr
    return None


def first_occurrence(rule: MapSumDecl, var: str) -> tuple[str, int] | None:
    """(map, position) of the first map indexed by ``var``: Where first, then the body."""
    for acc in map_occurrences(rule.where, rule.body):
        if var in acc.indices:
            return acc.var, acc.indices.index(var)
    return None


def all_occurrences(node, var: str) -> list[tuple[str, int]]:
    """Every distinct (map, position) at which ``var`` is an index, in traversal order."""
    out = []
    for acc in map_occurrences(node):
        for pos, ix in enumerate(acc.indices):
            if ix == var and (acc.var, pos) not in out:
                out.append((acc.var, pos))
    return out


# --- parser -----------------------------------------------------------------

class _Name:
    """Unresolved bare identifier; becomes StateRef or FreeRef once the rule's
    free variables are known."""

    def __init__(self, name, tok):
        self.name, self.tok = name, tok


class _SpecParser:
    def __init__(self, text: str):
        self.ts = TokenStream(text)

    def spec(self) -> InvariantSpec:
        rules = []
        seen = {}
        while self.ts.peek().kind != "eof":
            tok = self.ts.peek()
            rule = self.rule()
            if isinstance(rule, MapSumDecl):
                if rule.target in seen:
                    raise DuplicateIntermediate(f"intermediate {rule.target!r} declared twice",
                                                tok.line, tok.col)
                seen[rule.target] = True
            rules.append(rule)
        return InvariantSpec(tuple(rules))

    def rule(self) -> Rule:
        if self.ts.accept("ForAll"):
            qvars = self.var_list(stop=("Assert",))
            self.ts.expect("Assert")
            body = self.cond()
            self.ts.expect(";")
            return ForAllAssert(qvars, self.resolve(body, set(qvars)))
        target = self.ident()
        self.ts.expect("=")
        self.ts.expect("Map")
        index_vars = self.var_list(stop=("Sum",))
        self.ts.expect("Sum")
        body = self.expr()
        over_vars = ()
        if self.ts.accept("Over"):
            over_vars = self.var_list(stop=("Where", ";"))
        where = None
        if self.ts.accept("Where"):
            where = self.cond()
        self.ts.expect(";")
        scope = set(index_vars) | set(over_vars)
        return MapSumDecl(target, index_vars, self.resolve(body, scope), over_vars,
                          self.resolve(where, scope) if where is not None else None)

    def ident(self) -> str:
        tok = self.ts.expect_ident()
        if tok.text in KEYWORDS:
            raise ParseError(f"keyword {tok.text!r} used as a name", tok.line, tok.col)
        return tok.text

    def var_list(self, stop) -> tuple[str, ...]:
        names = []
        if self.ts.peek().kind == "ident" and self.ts.peek().text not in stop:
            names.append(self.ident())
            while self.ts.accept(","):
                names.append(self.ident())
        return tuple(names)

    def cond(self):
        c = self.cmp()
        while self.ts.accept("&&"):
            c = And(c, self.cmp())
        tok = self.ts.peek()
        if tok.kind == "op" and tok.text in ("||", "!", "&", "|", "~", "@"):
            raise UnknownOperator(f"operator {tok.text!r} is not allowed in conditions",
                                  tok.line, tok.col)
        return c

    def cmp(self):
        lhs = self.expr()
        tok = self.ts.peek()
        if tok.kind == "op" and tok.text in CMP_OPS:
            self.ts.next()
            return Cmp(tok.text, lhs, self.expr())
        if tok.kind == "op" and tok.text not in (";", "&&", ")", "(", "[", "]", ",", "="):
            raise UnknownOperator(f"unknown comparison operator {tok.text!r}", tok.line, tok.col)
        raise self.ts.error("expected a comparison operator")

    def expr(self):
        e = self.term()
        while self.ts.peek().kind == "op" and self.ts.peek().text in ("+", "-"):
            op = self.ts.next().text
            e = BinOp(op, e, self.term())
        self.check_unknown_arith()
        return e

    def term(self):
        e = self.factor()
        while self.ts.peek().kind == "op" and self.ts.peek().text in ("*", "/"):
            op = self.ts.next().text
            e = BinOp(op, e, self.factor())
        self.check_unknown_arith()
        return e

    def check_unknown_arith(self):
        tok = self.ts.peek()
        if tok.kind == "op" and tok.text in ("%", "+$", "-$", "*$", "/$", "^", "&", "|", "~", "@", "!"):
            raise UnknownOperator(f"unknown arithmetic operator {tok.text!r}", tok.line, tok.col)

    def factor(self):
        tok = self.ts.peek()
        if tok.kind == "int":
            return IntConst(int(self.ts.next().text))
        if self.ts.accept("("):
            e = self.expr()
            self.ts.expect(")")
            return e
        if tok.kind == "ident":
            name = self.ident()
            if self.ts.at("["):
                indices = []
                while self.ts.accept("["):
                    indices.append(self.ident())
                    self.ts.expect("]")
                return MapAccess(name, tuple(indices))
            return _Name(name, tok)
        raise self.ts.error(f"unexpected {tok.text or 'end of input'!r} in expression")

    def resolve(self, node, scope: set[str]):
        if isinstance(node, _Name):
            return FreeRef(node.name) if node.name in scope else StateRef(node.name)
        if isinstance(node, BinOp):
            return BinOp(node.op, self.resolve(node.lhs, scope), self.resolve(node.rhs, scope))
        if isinstance(node, Cmp):
            lhs, rhs = self.resolve(node.lhs, scope), self.resolve(node.rhs, scope)
            if node.op == "==" and isinstance(rhs, FreeRef):
                return EqFree(lhs, rhs.name)
            return Cmp(node.op, lhs, rhs)
        if isinstance(node, And):
            return And(self.resolve(node.lhs, scope), self.resolve(node.rhs, scope))
        return node


def parse_spec(text: str) -> InvariantSpec:
    return _SpecParser(text).spec()


# --- printer ----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def format_expr(e: IExpr, parent: int = 0, right: bool = False) -> str:
    if isinstance(e, IntConst):
        return str(e.value)
    if isinstance(e, StateRef):
        return e.var
    if isinstance(e, FreeRef):
        return e.name
    if isinstance(e, MapAccess):
        return e.var + "".join(f"[{ix}]" for ix in e.indices)
    prec = _PREC[e.op]
    text = f"{format_expr(e.lhs, prec)} {e.op} {format_expr(e.rhs, prec, True)}"
    if prec < parent or (right and prec == parent):
        return f"({text})"
    return text


def format_cond(c: ICond) -> str:
    if isinstance(c, Cmp):
        return f"{format_expr(c.lhs)} {c.op} {format_expr(c.rhs)}"
    if isinstance(c, EqFree):
        return f"{format_expr(c.expr)} == {c.var}"
    return " && ".join(format_cond(x) for x in conjuncts(c))


def format_rule(rule: Rule) -> str:
    if isinstance(rule, ForAllAssert):
        head = "ForAll " + ", ".join(rule.quant_vars) + (" " if rule.quant_vars else "")
        return f"{head}Assert {format_cond(rule.body)};"
    text = f"{rule.target} = Map " + ", ".join(rule.index_vars) + (" " if rule.index_vars else "")
    text += f"Sum {format_expr(rule.body)}"
    if rule.over_vars:
        text += " Over " + ", ".join(rule.over_vars)
    if rule.where is not None:
        text += f" Where {format_cond(rule.where)}"
    return text + ";"


def pretty_print_spec(spec: InvariantSpec) -> str:
    return "".join(format_rule(r) + "\n" for r in spec.rules)


# --- checking ---------------------------------------------------------------

@dataclass(frozen=True)
class TypedSpec:
    """A spec resolved against a contract's state declarations."""

    spec: InvariantSpec
    state_arities: dict[str, int] = field(default_factory=dict)
    intermediate_arities: dict[str, int] = field(default_factory=dict)

    @property
    def rules(self) -> tuple[Rule, ...]:
        return self.spec.rules

    def arity(self, name: str) -> int:
        if name in self.intermediate_arities:
            return self.intermediate_arities[name]
        return self.state_arities[name]

    def rule_for(self, intermediate: str) -> MapSumDecl:
        for r in self.spec.rules:
            if isinstance(r, MapSumDecl) and r.target == intermediate:
                return r
        raise KeyError(intermediate)

    def state_deps(self, rule: Rule) -> set[str]:
        """Contract state variables a rule reads, looking through intermediates."""
        out = set()
        for name in referenced_names(rule):
            if name in self.intermediate_arities:
                out |= self.state_deps(self.rule_for(name))
            else:
                out.add(name)
        return out


def _check_names(node, known: dict[str, int], scope: set[str]) -> None:
    for n in walk(node):
        if isinstance(n, StateRef):
            if n.var not in known:
                raise UnknownVariable(f"unknown variable {n.var!r}")
            if known[n.var] != 0:
                raise ArityMismatch(f"{n.var!r} has arity {known[n.var]} but is used as a scalar")
        elif isinstance(n, MapAccess):
            if n.var not in known:
                raise UnknownVariable(f"unknown variable {n.var!r}")
            if known[n.var] != len(n.indices):
                raise ArityMismatch(
                    f"{n.var!r} has arity {known[n.var]} but is indexed {len(n.indices)} times")
            for ix in n.indices:
                if ix not in scope:
                    raise FreeVarScopeError(f"free variable {ix!r} is not declared by its rule")
        elif isinstance(n, FreeRef) and n.name not in scope:
            raise FreeVarScopeError(f"free variable {n.name!r} is not declared by its rule")
        elif isinstance(n, EqFree) and n.var not in scope:
            raise FreeVarScopeError(f"free variable {n.var!r} is not declared by its rule")


def check_spec(spec: InvariantSpec, program) -> TypedSpec:
    state = {d.name: d.arity for d in program.decls if d.kind == "state"}
    known = dict(state)
    intermediates: dict[str, int] = {}
    for rule in spec.rules:
        names = list(rule.free_vars)
        if isinstance(rule, MapSumDecl):
            names.append(rule.target)
        for name in names:
            if name.startswith(RESERVED_PREFIX):
                raise ReservedName(f"identifier {name!r} uses the reserved prefix {RESERVED_PREFIX!r}")
        if len(set(rule.free_vars)) != len(rule.free_vars):
            raise FreeVarScopeError("a free variable is listed twice in one rule")
        for v in rule.free_vars:
            if v in known:
                raise FreeVarScopeError(f"free variable {v!r} shadows a state or intermediate variable")
        scope = set(rule.free_vars)
        if isinstance(rule, MapSumDecl):
            if rule.target in known:
                raise DuplicateIntermediate(f"intermediate {rule.target!r} collides with an existing name")
            _check_names(rule.body, known, scope)
            if rule.where is not None:
                _check_names(rule.where, known, scope)
            forced = derived_var(rule)
            for v in rule.free_vars:
                if forced is not None and v == forced[0]:
                    continue
                if first_occurrence(rule, v) is None:
                    raise FreeVarScopeError(
                        f"free variable {v!r} indexes no map and is not fixed by an equality")
            known[rule.target] = intermediates[rule.target] = len(rule.index_vars)
        else:
            _check_names(rule.body, known, scope)
            for v in rule.quant_vars:
                if not all_occurrences(rule.body, v):
                    raise FreeVarScopeError(f"quantified variable {v!r} indexes no map")
    return TypedSpec(spec, state, intermediates)
