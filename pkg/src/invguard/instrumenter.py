"""Source-to-source instrumentation that makes a contract revert any
transaction leaving an invariant violated.

``delta`` mode keeps each intermediate as a fresh state variable, updated
around every store that can change it (subtract the old contribution before,
add the new one after), and records the assertion instances a store may
affect in a transaction-scoped marker map that is checked when the outermost
entry function returns. ``naive`` mode recomputes everything from scratch
at that point instead.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, asdict

from . import contract_lang as cl
from . import spec_lang as sl
from .binder import (
    Read, Free, _union, bind_cond, bind_expr, rewrite, substitute, to_template,
)
from .errors import InstrumentationCollision

MODES = ("delta", "naive", "none")

DEPTH_VAR = "__cd"
DEPTH_TEMP = "__cdt"
INTERMEDIATE_PREFIX = "__iv_"
NAIVE_PREFIX = "__nv_"
MARKER_PREFIX = "__mk_"
RESERVED = "__"


@dataclass
class InstrumentStats:
    mode: str
    stores_instrumented: int = 0
    checks_emitted: int = 0
    checks_pruned: int = 0
    addresses_cached: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class NameGen:
    """Fresh ``__``-prefixed names that avoid everything already in a program."""

    def __init__(self, taken=()):
        self.taken = set(taken)
        self.counter = itertools.count()

    def __call__(self, kind: str) -> str:
        while True:
            name = f"{RESERVED}{kind}{next(self.counter)}"
            if name not in self.taken:
                self.taken.add(name)
                return name


def program_names(program: cl.Program) -> set[str]:
    names = {d.name for d in program.decls}
    for f in program.functions:
        names.add(f.name)
        names.update(f.params)
        for s in cl.iter_statements(f.body):
            names.update(cl.assigned_temps(s))
    return names


# --- lowering ---------------------------------------------------------------

def _lower_expr(e, pre: list, memo: dict, fresh):
    if isinstance(e, Read):
        indices = tuple(_lower_expr(i, pre, memo, fresh) for i in e.indices)
        key = (e.var, indices)
        if key not in memo:
            memo[key] = fresh("t")
            pre.append(cl.Load(memo[key], cl.Address(e.var, indices)))
        return cl.Temp(memo[key])
    if isinstance(e, cl.BinOp):
        return cl.BinOp(e.op, _lower_expr(e.lhs, pre, memo, fresh), _lower_expr(e.rhs, pre, memo, fresh))
    if isinstance(e, Free):
        raise InstrumentationCollision(f"free variable {e.name!r} reached lowering")
    return e


def lower(body, fresh) -> tuple:
    """Turn template reads into explicit loads hoisted before their statement."""
    out = []
    for s in body:
        pre, memo = [], {}
        if isinstance(s, cl.Assign) and isinstance(s.expr, Read):
            indices = tuple(_lower_expr(i, pre, memo, fresh) for i in s.expr.indices)
            out.extend(pre)
            out.append(cl.Load(s.temp, cl.Address(s.expr.var, indices)))
        elif isinstance(s, cl.Assign):
            e = _lower_expr(s.expr, pre, memo, fresh)
            out.extend(pre)
            out.append(cl.Assign(s.temp, e))
        elif isinstance(s, cl.Store):
            indices = tuple(_lower_expr(i, pre, memo, fresh) for i in s.address.indices)
            e = _lower_expr(s.expr, pre, memo, fresh)
            out.extend(pre)
            out.append(cl.Store(cl.Address(s.address.var, indices), e))
        elif isinstance(s, cl.If):
            cond = _lower_expr(s.cond, pre, memo, fresh)
            out.extend(pre)
            out.append(cl.If(cond, lower(s.body, fresh)))
        elif isinstance(s, cl.Assert):
            e = _lower_expr(s.expr, pre, memo, fresh)
            out.extend(pre)
            out.append(cl.Assert(e))
        elif isinstance(s, cl.ForIn):
            out.append(cl.ForIn(s.temps, s.var, lower(s.body, fresh)))
        else:
            out.append(s)
    return tuple(out)


# --- helpers ----------------------------------------------------------------

def _rename(node, mapping: dict):
    """Rename state/intermediate references inside invariant expressions."""
    if isinstance(node, sl.StateRef):
        return sl.StateRef(mapping.get(node.var, node.var))
    if isinstance(node, sl.MapAccess):
        return sl.MapAccess(mapping.get(node.var, node.var), node.indices)
    if isinstance(node, (sl.BinOp, sl.Cmp)):
        return type(node)(node.op, _rename(node.lhs, mapping), _rename(node.rhs, mapping))
    if isinstance(node, sl.And):
        return sl.And(_rename(node.lhs, mapping), _rename(node.rhs, mapping))
    if isinstance(node, sl.EqFree):
        return sl.EqFree(_rename(node.expr, mapping), node.var)
    return node


def _rename_rule(rule, mapping: dict):
    if isinstance(rule, sl.MapSumDecl):
        return sl.MapSumDecl(mapping.get(rule.target, rule.target), rule.index_vars,
                             _rename(rule.body, mapping), rule.over_vars,
                             _rename(rule.where, mapping) if rule.where is not None else None)
    return sl.ForAllAssert(rule.quant_vars, _rename(rule.body, mapping))


def _union_sources(body):
    """Loop alternatives for a quantified variable: every map position it
    indexes in ``body``, each with a witness read that fixes the position."""
    def sources(x: str):
        out = []
        for var, pos in sl.all_occurrences(body, x):
            arity = next(len(a.indices) for a in sl.map_occurrences(body) if a.var == var)
            indices = tuple(Free(x) if i == pos else cl.Const(0) for i in range(arity))
            out.append((var, Read(var, indices)))
        return out
    return sources


def _map_stores(body, on_store) -> tuple:
    """Replace each store in ``body`` (at any depth) by ``pre + [store] + post``."""
    out = []
    for s in body:
        if isinstance(s, cl.Store):
            pre, post = on_store(s)
            out.extend(pre)
            out.append(s)
            out.extend(post)
        elif isinstance(s, cl.If):
            out.append(cl.If(s.cond, _map_stores(s.body, on_store)))
        elif isinstance(s, cl.ForIn):
            out.append(cl.ForIn(s.temps, s.var, _map_stores(s.body, on_store)))
        else:
            out.append(s)
    return tuple(out)


def _intermediate_template(rule: sl.MapSumDecl, op: str) -> tuple:
    indices = tuple(Free(x) for x in rule.index_vars)
    current = Read(rule.target, indices)
    update = cl.Store(cl.Address(rule.target, indices),
                      cl.BinOp(op, current, to_template(rule.body)))
    if rule.where is None:
        return (update,)
    return (cl.If(to_template(rule.where), (update,)),)


def _is_gate(s) -> bool:
    return (isinstance(s, cl.If)
            and s.cond == cl.BinOp("==", cl.Temp(DEPTH_TEMP), cl.Const(1)))


def _wrap_entry(f: cl.Function, checks: tuple) -> cl.Function:
    depth = cl.Address(DEPTH_VAR)
    prologue = (
        cl.Load(DEPTH_TEMP, depth),
        cl.Assign(DEPTH_TEMP, cl.BinOp("+$", cl.Temp(DEPTH_TEMP), cl.Const(1))),
        cl.Store(depth, cl.Temp(DEPTH_TEMP)),
    )
    gate = (cl.If(cl.BinOp("==", cl.Temp(DEPTH_TEMP), cl.Const(1)), checks),) if checks else ()
    epilogue = (cl.Store(depth, cl.BinOp("-$", cl.Temp(DEPTH_TEMP), cl.Const(1))),)
    return cl.Function(f.name, f.params, prologue + f.body + gate + epilogue, f.entry)


# --- instrumentation --------------------------------------------------------

def instrument_with_stats(program: cl.Program, spec: sl.TypedSpec, mode: str = "delta"):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    stats = InstrumentStats(mode)
    if mode == "none":
        return program, stats
    taken = program_names(program)
    clashes = sorted(n for n in taken if n.startswith(RESERVED))
    if clashes:
        raise InstrumentationCollision(f"input already uses reserved names: {clashes}")
    fresh = NameGen(taken)
    prefix = INTERMEDIATE_PREFIX if mode == "delta" else NAIVE_PREFIX
    storage = {name: prefix + name for name in spec.intermediate_arities}
    rules = [_rename_rule(r, storage) for r in spec.rules]

    decls = list(program.decls)
    bodies = {f.name: f.body for f in program.functions}
    checks: list = []

    if mode == "delta":
        marker_no = 0
        for rule in rules:
            if isinstance(rule, sl.MapSumDecl):
                decls.append(cl.Decl(rule.target, len(rule.index_vars), "state"))
                on_store = _delta_update(rule, fresh, stats)
            else:
                marker = f"{MARKER_PREFIX}{marker_no}"
                marker_no += 1
                decls.append(cl.Decl(marker, len(rule.quant_vars), "memory"))
                on_store = _delta_marker(rule, marker, fresh, stats)
                checks.append(_delta_check(rule, marker, fresh))
            bodies = {name: _map_stores(body, on_store) for name, body in bodies.items()}
    else:
        for rule in rules:
            if isinstance(rule, sl.MapSumDecl):
                decls.append(cl.Decl(rule.target, len(rule.index_vars), "memory"))
                template = _intermediate_template(rule, "+$")
                b = bind_cond(None, rule.where)
                checks.append(lower(rewrite(template, ((),), b, fresh=fresh,
                                            exclude={rule.target}), fresh))
            else:
                template = (cl.Assert(to_template(rule.body)),)
                checks.append(lower(rewrite(template, ((),), None, fresh=fresh,
                                            loop_sources=_union_sources(rule.body)), fresh))
    # one top-level statement per check keeps them individually prunable
    flat_checks = []
    for block in checks:
        flat_checks.extend(block if isinstance(block, tuple) else (block,))
    decls.append(cl.Decl(DEPTH_VAR, 0, "state"))
    functions = []
    for f in program.functions:
        g = cl.Function(f.name, f.params, bodies[f.name], f.entry)
        if f.entry:
            g = _wrap_entry(g, tuple(flat_checks))
            stats.checks_emitted += len(flat_checks)
        functions.append(g)
    out = cl.Program(program.name, tuple(decls), tuple(functions))
    return cl.validate(out), stats


def instrument(program: cl.Program, spec: sl.TypedSpec, mode: str = "delta") -> cl.Program:
    return instrument_with_stats(program, spec, mode)[0]


def _delta_update(rule: sl.MapSumDecl, fresh, stats):
    def on_store(store: cl.Store):
        a = store.address
        bindings = _union(bind_expr(a, rule.body), bind_expr(a, rule.where))
        if not bindings:
            return (), ()
        b = bind_cond(a, rule.where)
        stats.stores_instrumented += 1
        pre = rewrite(_intermediate_template(rule, "-$"), bindings, b,
                      fresh=fresh, exclude={rule.target})
        post = rewrite(_intermediate_template(rule, "+$"), bindings, b,
                       fresh=fresh, exclude={rule.target})
        return lower(pre, fresh), lower(post, fresh)
    return on_store


def _delta_marker(rule: sl.ForAllAssert, marker: str, fresh, stats):
    template = (cl.Store(cl.Address(marker, tuple(Free(x) for x in rule.quant_vars)), cl.Const(1)),)
    sources = _union_sources(rule.body)

    def on_store(store: cl.Store):
        bindings = bind_expr(store.address, rule.body)
        if not bindings:
            return (), ()
        stats.stores_instrumented += 1
        marks = [lower(rewrite(template, bindings, None, fresh=fresh, loop_sources=sources), fresh)
                 for _ in range(2)]
        return marks[0], marks[1]
    return on_store


def _delta_check(rule: sl.ForAllAssert, marker: str, fresh):
    temps = tuple(fresh("q") for _ in rule.quant_vars)
    flag = fresh("m")
    body = substitute(to_template(rule.body), {x: cl.Temp(t) for x, t in zip(rule.quant_vars, temps)})
    guarded = (
        cl.Load(flag, cl.Address(marker, tuple(cl.Temp(t) for t in temps))),
        cl.If(cl.Temp(flag), lower((cl.Assert(body),), fresh)),
    )
    if not temps:
        return guarded
    return (cl.ForIn(temps, marker, guarded),)


# --- check pruning ----------------------------------------------------------

def _storage_rule(name: str, spec: sl.TypedSpec):
    for prefix in (INTERMEDIATE_PREFIX, NAIVE_PREFIX):
        if name.startswith(prefix) and name[len(prefix):] in spec.intermediate_arities:
            return spec.rule_for(name[len(prefix):])
    return None


def _reads(stmt) -> set[str]:
    out = set()
    for s in cl.iter_statements((stmt,)):
        if isinstance(s, cl.Load):
            out.add(s.address.var)
        elif isinstance(s, cl.ForIn):
            out.add(s.var)
    return out


def prune_checks(program: cl.Program, spec: sl.TypedSpec) -> cl.Program:
    """Drop exit checks that no function reachable from an entry can affect.

    Non-entry functions never finish a transaction, so their checks go too.
    """
    return prune_checks_with_count(program, spec)[0]


def prune_checks_with_count(program: cl.Program, spec: sl.TypedSpec):
    graph = cl.call_graph(program)
    kinds = {d.name: d.kind for d in program.decls}
    # writes that can disturb an invariant: persistent ones made outside the exit checks
    writes = {f.name: {v for v in cl.stored_vars(tuple(s for s in f.body if not _is_gate(s)))
                       if kinds.get(v) == "state" and v != DEPTH_VAR}
              for f in program.functions}
    pruned = 0

    def deps(stmt) -> set[str]:
        out = set()
        for name in _reads(stmt):
            rule = _storage_rule(name, spec)
            if rule is not None:
                out.add(name)
                out |= spec.state_deps(rule)
            elif kinds.get(name) == "state" and name != DEPTH_VAR:
                out.add(name)
        return out

    functions = []
    for f in program.functions:
        body = []
        for s in f.body:
            if not _is_gate(s):
                body.append(s)
                continue
            if not f.entry:
                pruned += len(s.body)
                continue
            written = set().union(*(writes[g] for g in cl.reachable(program, f.name, graph)))
            # a check's dependencies flow in through temps and memory written by earlier checks
            full: list[set] = []
            for i, c in enumerate(s.body):
                d = deps(c)
                inner = list(cl.iter_statements((c,)))
                temps = {t for x in inner for t in cl.read_temps(x)}
                mem = _reads(c)
                for j in range(i):
                    prev = list(cl.iter_statements((s.body[j],)))
                    if ({t for x in prev for t in cl.assigned_temps(x)} & temps
                            or cl.stored_vars((s.body[j],)) & mem):
                        d |= full[j]
                full.append(d)
            keep = [any(isinstance(x, cl.Assert) for x in cl.iter_statements((c,)))
                    and bool(full[i] & written) for i, c in enumerate(s.body)]
            changed = True
            while changed:
                changed = False
                kept_stmts = [c for c, k in zip(s.body, keep) if k]
                needed = set().union(*(_reads(c) for c in kept_stmts))
                temps = {t for c in kept_stmts for x in cl.iter_statements((c,))
                         for t in cl.read_temps(x)}
                for i, c in enumerate(s.body):
                    if keep[i]:
                        continue
                    assigned = {t for x in cl.iter_statements((c,)) for t in cl.assigned_temps(x)}
                    if cl.stored_vars((c,)) & needed or assigned & temps:
                        keep[i] = changed = True
            pruned += keep.count(False)
            kept = tuple(c for c, k in zip(s.body, keep) if k)
            if kept:
                body.append(cl.If(s.cond, kept))
        functions.append(cl.Function(f.name, f.params, tuple(body), f.entry))
    return cl.Program(program.name, program.decls, tuple(functions)), pruned


# --- state variable caching ---------------------------------------------------

def _accesses(stmt, addr: cl.Address):
    """(loads, stores) of exactly ``addr`` anywhere inside ``stmt``."""
    loads = stores = 0
    for s in cl.iter_statements((stmt,)):
        if isinstance(s, cl.Load) and s.address == addr:
            loads += 1
        elif isinstance(s, cl.Store) and s.address == addr:
            stores += 1
    return loads, stores


def _blocks_caching(stmt, addr: cl.Address) -> bool:
    index_temps = {t for ix in addr.indices for t in cl.expr_temps(ix)}
    for s in cl.iter_statements((stmt,)):
        if isinstance(s, cl.Call):
            return True
        if isinstance(s, cl.ForIn) and s.var == addr.var:
            return True
        if index_temps & set(cl.assigned_temps(s)):
            return True
        for a in cl.statement_addresses(s):
            if a.var == addr.var and a != addr:
                return True
    return False


def _replace_accesses(body, addr: cl.Address, cache: str, dirty: str) -> tuple:
    out = []
    for s in body:
        if isinstance(s, cl.Load) and s.address == addr:
            out.append(cl.Assign(s.temp, cl.Temp(cache)))
        elif isinstance(s, cl.Store) and s.address == addr:
            out.append(cl.Assign(cache, s.expr))
            out.append(cl.Assign(dirty, cl.Const(1)))
        elif isinstance(s, cl.If):
            out.append(cl.If(s.cond, _replace_accesses(s.body, addr, cache, dirty)))
        elif isinstance(s, cl.ForIn):
            out.append(cl.ForIn(s.temps, s.var, _replace_accesses(s.body, addr, cache, dirty)))
        else:
            out.append(s)
    return tuple(out)


def _cache_address(body: tuple, addr: cl.Address, fresh, counter: list) -> tuple:
    out: list = []
    region: list = []

    def close():
        if not region:
            return
        loads = stores = direct_loads = 0
        for s in region:
            ld, st = _accesses(s, addr)
            loads += ld
            stores += st
            if isinstance(s, cl.Load) and s.address == addr:
                direct_loads += 1
        # one load up front, one guarded write-back: worth it only if that saves an access,
        # and only if the original already loaded unconditionally
        if loads + stores > 1 + (1 if stores else 0) and direct_loads >= 1:
            cache, dirty = fresh("cv"), fresh("cw")
            out.append(cl.Load(cache, addr))
            if stores:
                out.append(cl.Assign(dirty, cl.Const(0)))
            out.extend(_replace_accesses(tuple(region), addr, cache, dirty))
            if stores:
                out.append(cl.If(cl.Temp(dirty), (cl.Store(addr, cl.Temp(cache)),)))
            counter[0] += 1
        else:
            out.extend(region)
        region.clear()

    pending: list = []  # statements after the last access, not yet committed to the region
    for s in body:
        if _blocks_caching(s, addr):
            close()
            out.extend(pending)
            pending.clear()
            out.append(s)
            continue
        if any(_accesses(s, addr)):
            region.extend(pending)
            pending.clear()
            region.append(s)
        elif region:
            pending.append(s)
        else:
            out.append(s)
    close()
    out.extend(pending)
    return tuple(out)


def cache_state_vars(program: cl.Program) -> cl.Program:
    return cache_state_vars_with_count(program)[0]


def cache_state_vars_with_count(program: cl.Program):
    """Serve repeated accesses to one state slot from a temp: one load up
    front, a single write-back (only if something was stored) at the end of
    the straight-line region, before any call."""
    state = {d.name for d in program.decls if d.kind == "state"}
    fresh = NameGen(program_names(program))
    counter = [0]
    functions = []
    for f in program.functions:
        body = f.body
        candidates = []
        for s in cl.iter_statements(body):
            for a in cl.statement_addresses(s):
                if a.var in state and a not in candidates:
                    candidates.append(a)
        for addr in candidates:
            body = _cache_address(body, addr, fresh, counter)
        functions.append(cl.Function(f.name, f.params, body, f.entry))
    return cl.Program(program.name, program.decls, tuple(functions)), counter[0]


def compile_contract(program: cl.Program, spec: sl.TypedSpec, mode: str = "delta", *,
                     prune: bool = False, cache: bool = False):
    """Instrument, then optionally prune checks and cache state slots."""
    out, stats = instrument_with_stats(program, spec, mode)
    if mode != "none" and prune:
        out, stats.checks_pruned = prune_checks_with_count(out, spec)
    if cache:
        out, stats.addresses_cached = cache_state_vars_with_count(out)
    return cl.validate(out), stats
