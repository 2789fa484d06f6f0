"""Free-variable binding between store addresses and invariant expressions,
and the rewrite that instantiates statement templates from those bindings.

Templates are contract statements whose expressions may additionally hold
``Free`` (an invariant free variable) and ``Read`` (a state or memory read,
lowered to a ``load`` by the instrumenter).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

from . import contract_lang as cl
from . import spec_lang as sl
from .errors import UnboundFreeVarNoMap

BindingMap = tuple  # tuple[tuple[str, CExpr], ...]
BindingSet = tuple  # tuple[BindingMap, ...]


@dataclass(frozen=True)
class Free:
    name: str


@dataclass(frozen=True)
class Read:
    var: str
    indices: tuple = ()


@dataclass(frozen=True)
class CondBinding:
    var: str
    expr: object  # spec IExpr, or an already converted template expression


EXACT = {"+": "+$", "-": "-$", "*": "*$", "/": "/$"}


# --- binding -------------------------------------------------------------------

def _union(*sets: BindingSet) -> BindingSet:
    out, seen = [], set()
    for bs in sets:
        for bmap in bs:
            key = frozenset(bmap)
            if key not in seen:
                seen.add(key)
                out.append(bmap)
    return tuple(out)


def _dedupe_pairs(pairs) -> BindingMap:
    out = []
    for p in pairs:
        if p not in out:
            out.append(p)
    return tuple(out)


def bind_expr(address: cl.Address, expr) -> BindingSet:
    """Binding maps under which a write to ``address`` can change ``expr``.

    ``()`` means the write cannot affect the expression; ``((),)`` means it
    affects every instantiation (a scalar match binds nothing).
    """
    if isinstance(expr, (sl.IntConst, sl.FreeRef)):
        return ()
    if isinstance(expr, sl.StateRef):
        return ((),) if address.var == expr.var else ()
    if isinstance(expr, sl.MapAccess):
        if address.var != expr.var:
            return ()
        return (_dedupe_pairs(zip(expr.indices, address.indices)),)
    if isinstance(expr, (sl.BinOp, sl.Cmp, sl.And)):
        return _union(bind_expr(address, expr.lhs), bind_expr(address, expr.rhs))
    if isinstance(expr, sl.EqFree):
        return bind_expr(address, expr.expr)
    if expr is None:
        return ()
    raise TypeError(f"not an invariant expression: {expr!r}")


def bind_cond(address: cl.Address, cond) -> CondBinding | None:
    """First ``e == x`` conjunct (left to right) whose ``e`` does not mention ``x``."""
    if isinstance(cond, sl.EqFree):
        if cond.var in sl.free_vars_in(cond.expr):
            return None
        return CondBinding(cond.var, cond.expr)
    if isinstance(cond, sl.And):
        return bind_cond(address, cond.lhs) or bind_cond(address, cond.rhs)
    return None


# --- template helpers ---------------------------------------------------------

def to_template(node):
    """Convert an invariant expression or condition into a template expression.
    Arithmetic becomes exact (non-wrapping)."""
    if isinstance(node, sl.IntConst):
        return cl.Const(node.value)
    if isinstance(node, sl.StateRef):
        return Read(node.var)
    if isinstance(node, sl.MapAccess):
        return Read(node.var, tuple(Free(x) for x in node.indices))
    if isinstance(node, sl.FreeRef):
        return Free(node.name)
    if isinstance(node, sl.BinOp):
        return cl.BinOp(EXACT[node.op], to_template(node.lhs), to_template(node.rhs))
    if isinstance(node, sl.Cmp):
        return cl.BinOp(node.op, to_template(node.lhs), to_template(node.rhs))
    if isinstance(node, sl.EqFree):
        return cl.BinOp("==", to_template(node.expr), Free(node.var))
    if isinstance(node, sl.And):
        return cl.BinOp("&&", to_template(node.lhs), to_template(node.rhs))
    return node


def _expr_nodes(e) -> Iterator:
    yield e
    if isinstance(e, cl.BinOp):
        yield from _expr_nodes(e.lhs)
        yield from _expr_nodes(e.rhs)
    elif isinstance(e, Read):
        for ix in e.indices:
            yield from _expr_nodes(ix)


def _stmt_exprs(s) -> list:
    if isinstance(s, (cl.Assign, cl.Assert)):
        return [s.expr]
    if isinstance(s, cl.Store):
        return [Read(s.address.var, s.address.indices), s.expr]
    if isinstance(s, cl.Load):
        return [Read(s.address.var, s.address.indices)]
    if isinstance(s, cl.If):
        return [s.cond]
    if isinstance(s, cl.Call):
        return list(s.args)
    return []


def template_nodes(body) -> Iterator:
    """Every expression node of a template, in statement then left-to-right order."""
    for s in body:
        for e in _stmt_exprs(s):
            yield from _expr_nodes(e)
        if isinstance(s, (cl.If, cl.ForIn)):
            yield from template_nodes(s.body)


def template_free_vars(body) -> list[str]:
    out = []
    for n in template_nodes(body):
        if isinstance(n, Free) and n.name not in out:
            out.append(n.name)
    return out


def substitute(node, mapping: dict):
    """Replace ``Free`` nodes by the mapped expressions, everywhere in ``node``."""
    if isinstance(node, Free):
        return mapping.get(node.name, node)
    if isinstance(node, cl.BinOp):
        return cl.BinOp(node.op, substitute(node.lhs, mapping), substitute(node.rhs, mapping))
    if isinstance(node, Read):
        return Read(node.var, tuple(substitute(i, mapping) for i in node.indices))
    if isinstance(node, cl.Address):
        return cl.Address(node.var, tuple(substitute(i, mapping) for i in node.indices))
    if isinstance(node, cl.Assign):
        return cl.Assign(node.temp, substitute(node.expr, mapping))
    if isinstance(node, cl.Load):
        return cl.Load(node.temp, substitute(node.address, mapping))
    if isinstance(node, cl.Store):
        return cl.Store(substitute(node.address, mapping), substitute(node.expr, mapping))
    if isinstance(node, cl.If):
        return cl.If(substitute(node.cond, mapping), substitute(node.body, mapping))
    if isinstance(node, cl.ForIn):
        return cl.ForIn(node.temps, node.var, substitute(node.body, mapping))
    if isinstance(node, cl.Assert):
        return cl.Assert(substitute(node.expr, mapping))
    if isinstance(node, cl.Call):
        return cl.Call(node.function, tuple(substitute(a, mapping) for a in node.args))
    if isinstance(node, (tuple, list)):
        return tuple(substitute(s, mapping) for s in node)
    return node


def first_source(body, var: str, exclude=frozenset()):
    """(map, position) of the first read in ``body`` indexed directly by ``var``."""
    for n in template_nodes(body):
        if isinstance(n, Read) and n.var not in exclude and Free(var) in n.indices:
            return n.var, n.indices.index(Free(var))
    return None


# --- rewrite ------------------------------------------------------------------

LoopSource = tuple  # (map name, witness Read or None)


def rewrite(template, bindings: BindingSet, cond_binding: CondBinding | None, *,
            fresh: Callable[[str], str],
            exclude=frozenset(),
            loop_sources: Callable[[str], list[LoopSource]] | None = None) -> tuple:
    """Instantiate ``template`` once per binding map and concatenate.

    Per instantiation: a free variable bound to several expressions is guarded
    by their equality; an unbound one is iterated with a synthesized for-in
    over a map it indexes; the condition binding and then the remaining pairs
    are substituted. ``loop_sources`` overrides where loops come from: each
    alternative is a map plus an optional witness read placed first in the
    loop body, and several alternatives yield several instantiations.
    """
    template = tuple(template)
    cb_expr = to_template(cond_binding.expr) if cond_binding is not None else None
    free_vars = template_free_vars(template)

    def sources(x: str) -> list[LoopSource]:
        if loop_sources is not None:
            return loop_sources(x)
        found = first_source(template, x, exclude)
        return [] if found is None else [(found[0], None)]

    out = []
    for bmap in bindings:
        pairs = list(bmap)
        if cond_binding is not None:
            pairs.append((cond_binding.var, cb_expr))
        variants = [(template, pairs)]
        for x in free_vars:
            expanded = []
            for body, pairs in variants:
                bound = [e for v, e in pairs if v == x]
                if len(bound) > 1:
                    guard = cl.BinOp("==", bound[0], bound[1])
                    for e in bound[2:]:
                        guard = cl.BinOp("&&", guard, cl.BinOp("==", bound[0], e))
                    kept, seen = [], False
                    for v, e in pairs:
                        if v == x:
                            if seen:
                                continue
                            seen = True
                        kept.append((v, e))
                    expanded.append(((cl.If(guard, body),), kept))
                elif not bound:
                    alts = sources(x)
                    if not alts:
                        raise UnboundFreeVarNoMap(
                            f"free variable {x!r} has no binding and indexes no map in the template")
                    for var, witness in alts:
                        t = fresh("i")
                        inner = body
                        if witness is not None:
                            inner = (cl.Assign(fresh("w"), witness),) + body
                        expanded.append(((cl.ForIn((t,), var, inner),), pairs + [(x, cl.Temp(t))]))
                else:
                    expanded.append((body, pairs))
            variants = expanded
        for body, pairs in variants:
            if cond_binding is not None:
                body = substitute(body, {cond_binding.var: cb_expr})
                pairs = [p for p in pairs if p != (cond_binding.var, cb_expr)]
            body = substitute(body, dict(pairs))
            out.extend(body)
    out = tuple(out)
    residual = [n.name for n in template_nodes(out) if isinstance(n, Free)]
    if residual:
        raise UnboundFreeVarNoMap(f"free variables left after rewrite: {sorted(set(residual))}")
    return out
