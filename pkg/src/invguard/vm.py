"""Reference interpreter for the contract language.

Programs are compiled once into nested Python closures; ``execute`` runs one
transaction against a ``StateStore`` and either commits it or rolls every
persistent write back. Persistent accesses and transaction-memory accesses
are counted separately so benchmark reports can weigh them differently.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, fields

from . import contract_lang as cl
from .errors import InvalidParams, UnknownEntry

WORD = 1 << 256
MASK = WORD - 1
INT_MODES = ("bigint", "wrap256")
DEFAULT_WEIGHTS = {"sload": 100, "sstore": 100, "mload": 1, "mstore": 1, "arith": 1}
SLOAD, SSTORE, MLOAD, MSTORE, ARITH = range(5)


class Revert(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class CostCounters:
    sload: int = 0
    sstore: int = 0
    mload: int = 0
    mstore: int = 0
    arith: int = 0

    @classmethod
    def from_list(cls, counts) -> "CostCounters":
        return cls(*counts)

    def __add__(self, other: "CostCounters") -> "CostCounters":
        return CostCounters(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    @property
    def storage_accesses(self) -> int:
        return self.sload + self.sstore

    def weighted_cost(self, weights: dict | None = None) -> int:
        weights = DEFAULT_WEIGHTS if weights is None else weights
        return sum(getattr(self, name) * weights.get(name, 0) for name in DEFAULT_WEIGHTS)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class VMConfig:
    int_mode: str = "bigint"
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    depth_limit: int = 64

    def __post_init__(self):
        if self.int_mode not in INT_MODES:
            raise InvalidParams(f"unknown integer mode {self.int_mode!r}")
        if self.depth_limit < 1:
            raise InvalidParams("depth limit must be at least 1")

    @staticmethod
    def parse_weights(text: str) -> dict:
        """``sload=100,sstore=100,...`` on top of the defaults."""
        weights = dict(DEFAULT_WEIGHTS)
        for item in filter(None, (p.strip() for p in text.split(","))):
            name, _, value = item.partition("=")
            if name not in DEFAULT_WEIGHTS or not value.strip().lstrip("-").isdigit():
                raise InvalidParams(f"bad weight {item!r}")
            weights[name] = int(value)
        return weights


@dataclass(frozen=True)
class Transaction:
    sender: int
    function: str
    args: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(int(d["sender"]), str(d["function"]), tuple(int(a) for a in d.get("args", ())))

    def to_dict(self) -> dict:
        return {"sender": self.sender, "function": self.function, "args": list(self.args)}


class StateStore:
    """Persistent contract state. A map key is defined once it has been
    stored to (even with 0); reading an undefined key yields 0."""

    def __init__(self, scalars: dict | None = None, maps: dict | None = None):
        self.scalars: dict[str, int] = dict(scalars or {})
        self.maps: dict[str, dict[tuple, int]] = {k: dict(v) for k, v in (maps or {}).items()}
        self.lock = threading.Lock()

    @classmethod
    def for_program(cls, program: cl.Program) -> "StateStore":
        store = cls()
        for d in program.decls:
            if d.kind != "state":
                continue
            if d.arity == 0:
                store.scalars[d.name] = 0
            else:
                store.maps[d.name] = {}
        return store

    def ensure(self, program: cl.Program) -> None:
        """Add declarations the program has but this store lacks (e.g. after instrumenting)."""
        for d in program.decls:
            if d.kind == "state":
                if d.arity == 0:
                    self.scalars.setdefault(d.name, 0)
                else:
                    self.maps.setdefault(d.name, {})

    def read(self, var: str, key: tuple = ()) -> int:
        if key or var in self.maps:
            return self.maps.get(var, {}).get(key, 0)
        return self.scalars.get(var, 0)

    def copy(self) -> "StateStore":
        return StateStore(self.scalars, self.maps)

    def project(self, names) -> "StateStore":
        names = set(names)
        return StateStore({k: v for k, v in self.scalars.items() if k in names},
                          {k: v for k, v in self.maps.items() if k in names})

    def snapshot(self) -> dict:
        return {
            "scalars": dict(sorted(self.scalars.items())),
            "maps": {name: [[list(k), v] for k, v in sorted(m.items())]
                     for name, m in sorted(self.maps.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_snapshot(cls, snap: dict) -> "StateStore":
        return cls(snap.get("scalars", {}),
                   {name: {tuple(k): v for k, v in entries} for name, entries in snap.get("maps", {}).items()})

    def __eq__(self, other) -> bool:
        return isinstance(other, StateStore) and self.snapshot() == other.snapshot()


@dataclass
class ExecOutcome:
    status: str  # "accepted" | "reverted" | "rejected"
    cost: CostCounters
    reason: str | None = None
    state_delta: list = field(default_factory=list)  # [slot, old, new]

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_dict(self) -> dict:
        return {"status": self.status, "reason": self.reason, "cost": self.cost.to_dict(),
                "state_delta": self.state_delta}


@dataclass
class TraceResult:
    outcomes: list
    total: CostCounters

    @property
    def verdicts(self) -> list[bool]:
        return [o.accepted for o in self.outcomes]


# --- compilation ------------------------------------------------------------

def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


class _Context:
    __slots__ = ("state", "memory", "journal", "counts", "sender", "depth")


def _compile_expr(e, wrap: bool):
    if isinstance(e, cl.Const):
        v = e.value
        return lambda fr, cx: v
    if isinstance(e, cl.Temp):
        name = e.name
        return lambda fr, cx: fr.get(name, 0)
    if isinstance(e, cl.Builtin):
        if e.kind == "sender":
            return lambda fr, cx: cx.sender
        return lambda fr, cx: cx.depth
    lhs, rhs = _compile_expr(e.lhs, wrap), _compile_expr(e.rhs, wrap)
    op = e.op

    def count(cx):
        cx.counts[ARITH] += 1

    if op == "&&":
        def f(fr, cx):
            count(cx)
            return 1 if lhs(fr, cx) and rhs(fr, cx) else 0
        return f
    if op == "||":
        def f(fr, cx):
            count(cx)
            return 1 if lhs(fr, cx) or rhs(fr, cx) else 0
        return f
    if op in ("/", "%", "/$"):
        masked = wrap and op != "/$"

        def f(fr, cx):
            count(cx)
            a, b = lhs(fr, cx), rhs(fr, cx)
            if masked:
                a, b = a & MASK, b & MASK
            if b == 0:
                raise Revert("division by zero")
            q = _trunc_div(a, b)
            return q if op != "%" else a - b * q
        return f
    binary = {
        "+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b,
        "+$": lambda a, b: a + b, "-$": lambda a, b: a - b, "*$": lambda a, b: a * b,
        "==": lambda a, b: int(a == b), "!=": lambda a, b: int(a != b),
        "<": lambda a, b: int(a < b), "<=": lambda a, b: int(a <= b),
        ">": lambda a, b: int(a > b), ">=": lambda a, b: int(a >= b),
    }[op]
    if wrap and op in ("+", "-", "*"):
        def f(fr, cx):
            cx.counts[ARITH] += 1
            return binary(lhs(fr, cx), rhs(fr, cx)) & MASK
        return f

    def f(fr, cx):
        cx.counts[ARITH] += 1
        return binary(lhs(fr, cx), rhs(fr, cx))
    return f


class CompiledProgram:
    """A program turned into closures for one integer mode and depth limit."""

    def __init__(self, program: cl.Program, config: VMConfig | None = None):
        self.program = program
        self.config = config or VMConfig()
        self.wrap = self.config.int_mode == "wrap256"
        self.kinds = {d.name: d for d in program.decls}
        self.functions: dict = {}
        for f in program.functions:  # bodies are filled in after all names exist
            self.functions[f.name] = [f, None]
        for f in program.functions:
            self.functions[f.name][1] = self._block(f.body)

    def _block(self, body):
        stmts = tuple(self._stmt(s) for s in body)

        def run(fr, cx):
            for s in stmts:
                s(fr, cx)
        return run

    def _key(self, address: cl.Address):
        parts = tuple(_compile_expr(i, self.wrap) for i in address.indices)
        return lambda fr, cx: tuple(p(fr, cx) for p in parts)

    def _stmt(self, s):
        if isinstance(s, cl.Assign):
            name, ex = s.temp, _compile_expr(s.expr, self.wrap)

            def assign(fr, cx):
                fr[name] = ex(fr, cx)
            return assign
        if isinstance(s, cl.Load):
            return self._load(s)
        if isinstance(s, cl.Store):
            return self._store(s)
        if isinstance(s, cl.If):
            cond, body = _compile_expr(s.cond, self.wrap), self._block(s.body)

            def branch(fr, cx):
                if cond(fr, cx):
                    body(fr, cx)
            return branch
        if isinstance(s, cl.ForIn):
            return self._forin(s)
        if isinstance(s, cl.Assert):
            ex = _compile_expr(s.expr, self.wrap)

            def check(fr, cx):
                if not ex(fr, cx):
                    raise Revert("assertion failed")
            return check
        if isinstance(s, cl.Call):
            return self._call(s)
        raise TypeError(f"not a statement: {s!r}")

    def _load(self, s: cl.Load):
        name, var, key = s.temp, s.address.var, self._key(s.address)
        decl = self.kinds[var]
        if decl.kind == "memory":
            def mload(fr, cx):
                k = key(fr, cx)
                cx.counts[MLOAD] += 1
                fr[name] = cx.memory[var].get(k, 0)
            return mload
        if decl.arity == 0:
            def sload_scalar(fr, cx):
                cx.counts[SLOAD] += 1
                fr[name] = cx.state.scalars.get(var, 0)
            return sload_scalar

        def sload(fr, cx):
            k = key(fr, cx)
            cx.counts[SLOAD] += 1
            fr[name] = cx.state.maps[var].get(k, 0)
        return sload

    def _store(self, s: cl.Store):
        var, key, ex = s.address.var, self._key(s.address), _compile_expr(s.expr, self.wrap)
        decl = self.kinds[var]
        if decl.kind == "memory":
            def mstore(fr, cx):
                k = key(fr, cx)
                v = ex(fr, cx)
                cx.counts[MSTORE] += 1
                cx.memory[var][k] = v
            return mstore
        if decl.arity == 0:
            def sstore_scalar(fr, cx):
                v = ex(fr, cx)
                cx.counts[SSTORE] += 1
                scalars = cx.state.scalars
                cx.journal.append((var, None, var in scalars, scalars.get(var, 0)))
                scalars[var] = v
            return sstore_scalar

        def sstore(fr, cx):
            k = key(fr, cx)
            v = ex(fr, cx)
            cx.counts[SSTORE] += 1
            m = cx.state.maps[var]
            cx.journal.append((var, k, k in m, m.get(k, 0)))
            m[k] = v
        return sstore

    def _forin(self, s: cl.ForIn):
        var, temps, body = s.var, s.temps, self._block(s.body)
        positions = cl.forin_positions(s)
        counter = MLOAD if self.kinds[var].kind == "memory" else SLOAD

        def loop(fr, cx):
            source = cx.memory[var] if counter == MLOAD else cx.state.maps[var]
            keys = sorted({tuple(k[p] for p in positions) for k in source})
            for k in keys:
                cx.counts[counter] += 1
                for t, v in zip(temps, k):
                    fr[t] = v
                body(fr, cx)
        return loop

    def _call(self, s: cl.Call):
        target = self.functions[s.function]
        params = target[0].params
        args = tuple(_compile_expr(a, self.wrap) for a in s.args)
        limit = self.config.depth_limit

        def call(fr, cx):
            frame = dict(zip(params, (a(fr, cx) for a in args)))
            if cx.depth + 1 > limit:
                raise Revert("call depth limit exceeded")
            cx.depth += 1
            try:
                target[1](frame, cx)
            finally:
                cx.depth -= 1
        return call


def compile_program(program, config: VMConfig | None = None) -> CompiledProgram:
    if isinstance(program, CompiledProgram):
        if config is None or config == program.config:
            return program
        program = program.program
    return CompiledProgram(program, config)


# --- execution ----------------------------------------------------------------

def _slot(var: str, key) -> str:
    return var if key is None else var + "".join(f"[{k}]" for k in key)


def execute(state: StateStore, program, tx: Transaction, config: VMConfig | None = None, *,
            post_check=None) -> ExecOutcome:
    """Run one transaction. ``post_check(state)`` may veto the commit by
    returning a falsy value; the transaction is then reverted like a failed assert."""
    compiled = compile_program(program, config)
    entry = compiled.functions.get(tx.function)
    if entry is None or not entry[0].entry:
        raise UnknownEntry(f"{tx.function!r} is not an entry function")
    fn, body = entry
    if len(tx.args) != len(fn.params):
        raise InvalidParams(f"{tx.function!r} takes {len(fn.params)} arguments, got {len(tx.args)}")
    cx = _Context()
    cx.state = state
    cx.memory = {d.name: {} for d in compiled.program.decls if d.kind == "memory"}
    cx.journal = []
    cx.counts = [0] * 5
    cx.sender = tx.sender
    cx.depth = 1
    with state.lock:
        state.ensure(compiled.program)
        args = tuple(a & MASK for a in tx.args) if compiled.wrap else tuple(tx.args)
        try:
            body(dict(zip(fn.params, args)), cx)
            if post_check is not None and not post_check(state):
                raise Revert("post-state check failed")
        except Revert as r:
            _undo(state, cx.journal)
            return ExecOutcome("reverted", CostCounters.from_list(cx.counts), r.reason)
        return ExecOutcome("accepted", CostCounters.from_list(cx.counts), None, _delta(state, cx.journal))


def _undo(state: StateStore, journal: list) -> None:
    for var, key, present, old in reversed(journal):
        target, k = (state.scalars, var) if key is None else (state.maps[var], key)
        if present:
            target[k] = old
        else:
            del target[k]


def _delta(state: StateStore, journal: list) -> list:
    first: dict = {}
    for var, key, present, old in journal:
        first.setdefault((var, key), (present, old))
    out = []
    for (var, key), (present, old) in first.items():
        new = state.read(var, key or ())
        if not present or new != old:
            out.append([_slot(var, key), old, new])
    return sorted(out)


def run_trace(state: StateStore, program, trace, config: VMConfig | None = None, *,
              post_check=None) -> TraceResult:
    """Fold ``execute`` over ``trace``. A transaction naming no entry function,
    or with the wrong argument count, is recorded as rejected and skipped."""
    compiled = compile_program(program, config)
    outcomes = []
    for tx in trace:
        try:
            outcomes.append(execute(state, compiled, tx, post_check=post_check))
        except (UnknownEntry, InvalidParams) as e:
            outcomes.append(ExecOutcome("rejected", CostCounters(), e.message))
    total = CostCounters()
    for o in outcomes:
        total = total + o.cost
    return TraceResult(outcomes, total)
