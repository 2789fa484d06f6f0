"""Brute-force invariant oracle, seeded trace generators, differential
testing of the instrumentation modes, and cost benchmarking."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib.resources import files

import numpy as np

from . import contract_lang as cl
from . import spec_lang as sl
from .errors import InvalidParams
from .instrumenter import INTERMEDIATE_PREFIX, compile_contract
from .vm import CostCounters, StateStore, Transaction, VMConfig, compile_program, execute

TRACE_KINDS = ("erc20_transfer", "erc721_transfer", "erc1202_vote",
               "attack_batch_overflow", "attack_double_vote", "custom")
FIXTURES = ("erc20", "erc721", "vote", "cache_pattern")


def fixture_text(name: str) -> str:
    return files("invguard.fixtures").joinpath(name).read_text()


def load_fixture(name: str):
    """(program, typed spec or None) for a shipped fixture such as ``"erc20"``."""
    program = cl.parse_contract(fixture_text(name + ".mini"))
    try:
        spec_text = fixture_text(name + ".inv")
    except FileNotFoundError:
        return program, None
    return program, sl.check_spec(sl.parse_spec(spec_text), program)


# --- oracle -------------------------------------------------------------------

def _eval(node, env: dict, read):
    if isinstance(node, sl.IntConst):
        return node.value
    if isinstance(node, sl.StateRef):
        return read(node.var, ())
    if isinstance(node, sl.MapAccess):
        return read(node.var, tuple(env[x] for x in node.indices))
    if isinstance(node, sl.FreeRef):
        return env[node.name]
    if isinstance(node, sl.BinOp):
        a, b = _eval(node.lhs, env, read), _eval(node.rhs, env, read)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if b == 0:
            raise ZeroDivisionError("division by zero inside the invariant")
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    if isinstance(node, sl.Cmp):
        a, b = _eval(node.lhs, env, read), _eval(node.rhs, env, read)
        return int({"==": a == b, "!=": a != b, "<": a < b,
                    "<=": a <= b, ">": a > b, ">=": a >= b}[node.op])
    if isinstance(node, sl.EqFree):
        return int(_eval(node.expr, env, read) == env[node.var])
    if isinstance(node, sl.And):
        return int(bool(_eval(node.lhs, env, read)) and bool(_eval(node.rhs, env, read)))
    raise TypeError(f"not an invariant expression: {node!r}")


def oracle_check(state: StateStore, spec: sl.TypedSpec):
    """Recompute every intermediate from its definition and check every assertion.

    Returns ``(satisfied, intermediates)`` where intermediates maps each name to
    ``{key tuple: value}`` (keys with no contribution are absent, i.e. 0).
    Never mutates ``state``.
    """
    inter: dict[str, dict] = {}

    def read(var, key):
        if var in inter:
            return inter[var].get(key, 0)
        return state.read(var, key)

    def keys(var):
        return inter[var].keys() if var in inter else state.maps.get(var, {}).keys()

    satisfied = True
    for rule in spec.rules:
        if isinstance(rule, sl.MapSumDecl):
            derived = sl.derived_var(rule)
            enumerated = [v for v in rule.free_vars if derived is None or v != derived[0]]
            domains = []
            for v in enumerated:
                var, pos = sl.first_occurrence(rule, v)
                domains.append(sorted({k[pos] for k in keys(var)}))
            out: dict = {}
            for values in itertools.product(*domains):
                env = dict(zip(enumerated, values))
                if derived is not None:
                    env[derived[0]] = _eval(derived[1], env, read)
                if rule.where is not None and not _eval(rule.where, env, read):
                    continue
                key = tuple(env[x] for x in rule.index_vars)
                out[key] = out.get(key, 0) + _eval(rule.body, env, read)
            inter[rule.target] = out
        elif satisfied:
            domains = []
            for v in rule.quant_vars:
                values = set()
                for var, pos in sl.all_occurrences(rule.body, v):
                    values.update(k[pos] for k in keys(var))
                domains.append(sorted(values))
            for values in itertools.product(*domains):
                if not _eval(rule.body, dict(zip(rule.quant_vars, values)), read):
                    satisfied = False
                    break
    return satisfied, inter


# --- traces -------------------------------------------------------------------

@dataclass(frozen=True)
class TraceSpec:
    kind: str
    accounts: int = 10
    txs: int = 100
    seed: int = 0
    params: dict = field(default_factory=dict)


def gen_trace(spec: TraceSpec) -> list[Transaction]:
    """Deterministic trace for ``spec``; randomness comes from a PCG64 stream seeded by ``spec.seed``."""
    if spec.kind not in TRACE_KINDS:
        raise InvalidParams(f"unknown trace kind {spec.kind!r}")
    if spec.txs < 0 or spec.accounts < 1:
        raise InvalidParams("accounts must be positive and txs non-negative")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return _GENERATORS[spec.kind](spec, rng)


def _erc20(spec: TraceSpec, rng) -> list[Transaction]:
    n = spec.accounts
    if n < 2:
        raise InvalidParams("erc20_transfer needs at least 2 accounts")
    p = {"from_rate": 0.1, "fail_rate": 0.05, "batch_rate": 0.05, "max_mint": 1000, **spec.params}
    balances = [0] * (n + 1)
    trace = []
    for a in range(1, n + 1):  # the owner (sender 0) funds every account first
        amount = int(rng.integers(1, p["max_mint"] + 1))
        balances[a] += amount
        trace.append(Transaction(0, "mint", (a, amount)))
    while len(trace) < n + spec.txs:
        sender = int(rng.integers(1, n + 1))
        to = int(rng.integers(1, n + 1))
        roll = rng.random()
        if roll < p["fail_rate"]:
            trace.append(Transaction(sender, "transfer", (to, balances[sender] + 1)))
            continue
        if roll < p["fail_rate"] + p["batch_rate"] and balances[sender] >= 2:
            r2 = int(rng.integers(1, n + 1))
            value = int(rng.integers(1, balances[sender] // 2 + 1))
            balances[sender] -= 2 * value
            balances[to] += value
            balances[r2] += value
            trace.append(Transaction(sender, "batchTransfer", (to, r2, value)))
            continue
        value = int(rng.integers(0, balances[sender] + 1))
        if roll > 1 - p["from_rate"]:
            spender = int(rng.integers(1, n + 1))
            trace.append(Transaction(sender, "approve", (spender, value)))
            if len(trace) < n + spec.txs:
                balances[sender] -= value
                balances[to] += value
                trace.append(Transaction(spender, "transferFrom", (sender, to, value)))
            continue
        balances[sender] -= value
        balances[to] += value
        trace.append(Transaction(sender, "transfer", (to, value)))
    return trace


def _erc721(spec: TraceSpec, rng) -> list[Transaction]:
    n = spec.accounts
    if n < 2:
        raise InvalidParams("erc721_transfer needs at least 2 accounts")
    p = {"mint_rate": 0.3, "approve_rate": 0.15, "fail_rate": 0.05, **spec.params}
    owners: dict[int, int] = {}
    trace = []
    next_token = 1
    for _ in range(spec.txs):
        sender = int(rng.integers(1, n + 1))
        roll = rng.random()
        if not owners or roll < p["mint_rate"]:
            trace.append(Transaction(sender, "mint", (next_token,)))
            owners[next_token] = sender
            next_token += 1
            continue
        token = int(rng.choice(sorted(owners)))
        owner = owners[token]
        to = int(rng.integers(1, n + 1))
        if roll < p["mint_rate"] + p["fail_rate"]:
            trace.append(Transaction(sender, "mint", (token,)))  # already minted: reverts
        elif roll < p["mint_rate"] + p["fail_rate"] + p["approve_rate"]:
            trace.append(Transaction(owner, "approve", (to, token)))
        else:
            trace.append(Transaction(owner, "transferFrom", (owner, to, token)))
            owners[token] = to
    return trace


def _erc1202(spec: TraceSpec, rng) -> list[Transaction]:
    n = spec.accounts
    if n < 5:
        raise InvalidParams("erc1202_vote needs at least 5 accounts")
    p = {"repeat_rate": 0.0, "options": 3, **spec.params}
    trace = []
    issue = 0
    while len(trace) < spec.txs:
        issue += 1
        voters = [int(v) for v in rng.choice(np.arange(1, n + 1), size=5, replace=False)]
        trace.append(Transaction(0, "createIssue", (issue, *voters)))
        for v in voters:
            if len(trace) >= spec.txs:
                break
            option = int(rng.integers(1, p["options"] + 1))
            trace.append(Transaction(v, "vote", (issue, option)))
            if rng.random() < p["repeat_rate"] and len(trace) < spec.txs:
                trace.append(Transaction(v, "vote", (issue, int(rng.integers(1, p["options"] + 1)))))
    return trace


def _double_vote(spec: TraceSpec, rng) -> list[Transaction]:
    return [
        Transaction(0, "createIssue", (1, 1, 2, 3, 4, 5)),
        Transaction(1, "vote", (1, 2)),
        Transaction(1, "vote", (1, 2)),
    ]


def _batch_overflow(spec: TraceSpec, rng) -> list[Transaction]:
    # 2 * 2**255 wraps to 0 in 256-bit arithmetic, so the balance check passes
    return [Transaction(1, "batchTransfer", (2, 3, 1 << 255))]


def _custom(spec: TraceSpec, rng) -> list[Transaction]:
    return [Transaction.from_dict(d) for d in spec.params.get("txs", [])]


_GENERATORS = {
    "erc20_transfer": _erc20,
    "erc721_transfer": _erc721,
    "erc1202_vote": _erc1202,
    "attack_double_vote": _double_vote,
    "attack_batch_overflow": _batch_overflow,
    "custom": _custom,
}


def read_trace(path) -> list[Transaction]:
    with open(path) as fh:
        return [Transaction.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for tx in trace:
            fh.write(json.dumps(tx.to_dict(), sort_keys=True) + "\n")


# --- reports ------------------------------------------------------------------

@dataclass
class BenchReport:
    costs: dict = field(default_factory=dict)      # mode -> counters
    verdicts: dict = field(default_factory=dict)   # mode -> [bool]
    ratios: dict = field(default_factory=dict)
    mismatches: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {"costs": self.costs, "verdicts": self.verdicts, "ratios": self.ratios,
                "mismatches": self.mismatches, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        cols = ("sload", "sstore", "mload", "mstore", "arith", "weighted")
        lines = [f"{'mode':<16}" + "".join(f"{c:>12}" for c in cols)]
        for mode, c in self.costs.items():
            lines.append(f"{mode:<16}" + "".join(f"{c[k]:>12}" for k in cols))
        for name, value in sorted(self.ratios.items()):
            lines.append(f"{name}: {value:.3f}")
        lines.append(f"mismatches: {len(self.mismatches)}")
        return "\n".join(lines)


def _cost_dict(total: CostCounters, weights) -> dict:
    return {**total.to_dict(), "weighted": total.weighted_cost(weights)}


def _ratio(a, b) -> float:
    return float(a) / b if b else float("inf") if a else 1.0


def _intermediates_of(state: StateStore, spec: sl.TypedSpec) -> dict:
    out = {}
    for name, arity in spec.intermediate_arities.items():
        storage = INTERMEDIATE_PREFIX + name
        if arity == 0:
            out[name] = {(): state.scalars.get(storage, 0)}
        else:
            out[name] = dict(state.maps.get(storage, {}))
    return out


def _same_values(a: dict, b: dict) -> bool:
    return all(a.get(k, 0) == b.get(k, 0) for k in set(a) | set(b))


# --- differential testing -----------------------------------------------------

def differential_test(program: cl.Program, spec: sl.TypedSpec, trace, config: VMConfig | None = None,
                      *, optimized: bool = True) -> BenchReport:
    """Run the trace plainly (with the oracle vetoing violating commits), under
    naive and delta instrumentation, and report every disagreement."""
    config = config or VMConfig()
    variants = {"naive": compile_contract(program, spec, "naive")[0],
                "delta": compile_contract(program, spec, "delta")[0]}
    if optimized:
        variants["delta_opt"] = compile_contract(program, spec, "delta", prune=True, cache=True)[0]
    compiled = {m: compile_program(p, config) for m, p in variants.items()}
    reference = compile_program(program, config)
    states = {m: StateStore.for_program(p) for m, p in variants.items()}
    ref_state = StateStore.for_program(program)
    report = BenchReport(meta={"txs": len(trace), "int_mode": config.int_mode})
    verdicts = {m: [] for m in ["oracle", *variants]}
    flagged = []
    user_vars = program.state_vars

    for i, tx in enumerate(trace):
        seen = {}

        def veto(st):
            seen["ok"], seen["inter"] = oracle_check(st, spec)
            return seen["ok"]

        ref = execute(ref_state, reference, tx, post_check=veto)
        verdicts["oracle"].append(ref.accepted)
        flagged.append(seen.get("ok") is False)
        for m in variants:
            out = execute(states[m], compiled[m], tx)
            verdicts[m].append(out.accepted)
            if out.accepted != ref.accepted:
                report.mismatches.append({"tx": i, "kind": "verdict", "mode": m,
                                          "expected": ref.accepted, "got": out.accepted})
        if verdicts["delta"][-1] and ref.accepted:
            expected = seen["inter"]
            got = _intermediates_of(states["delta"], spec)
            for name in spec.intermediate_arities:
                if not _same_values(expected.get(name, {}), got[name]):
                    report.mismatches.append({"tx": i, "kind": "intermediate", "mode": "delta",
                                              "name": name})

    ref_snap = ref_state.snapshot()
    for m in variants:
        if states[m].project(user_vars).snapshot() != ref_snap:
            report.mismatches.append({"tx": None, "kind": "final_state", "mode": m})
    if optimized and states["delta_opt"].snapshot() != states["delta"].snapshot():
        report.mismatches.append({"tx": None, "kind": "optimized_state", "mode": "delta_opt"})
    report.verdicts = verdicts
    report.meta["oracle_flagged"] = [i for i, f in enumerate(flagged) if f]
    return report


def bench_compare(program: cl.Program, spec: sl.TypedSpec, trace, config: VMConfig | None = None) -> BenchReport:
    """Costs of running ``trace`` uninstrumented, delta (pruned and cached),
    delta without those optimizations, and naive."""
    config = config or VMConfig()
    variants = {
        "none": program,
        "delta": compile_contract(program, spec, "delta", prune=True, cache=True)[0],
        "delta_unoptimized": compile_contract(program, spec, "delta")[0],
        "naive": compile_contract(program, spec, "naive")[0],
    }
    report = BenchReport(meta={"txs": len(trace), "int_mode": config.int_mode,
                               "weights": dict(config.weights)})
    totals = {}
    for mode, p in variants.items():
        compiled = compile_program(p, config)
        state = StateStore.for_program(p)
        total = CostCounters()
        verdicts = []
        for tx in trace:
            out = execute(state, compiled, tx)
            total = total + out.cost
            verdicts.append(out.accepted)
        totals[mode] = total
        report.costs[mode] = _cost_dict(total, config.weights)
        report.verdicts[mode] = verdicts
    for mode in ("delta_unoptimized", "naive"):
        for i, (a, b) in enumerate(zip(report.verdicts["delta"], report.verdicts[mode])):
            if a != b:
                report.mismatches.append({"tx": i, "kind": "verdict", "mode": mode,
                                          "expected": a, "got": b})
    w = config.weights
    report.ratios = {
        "naive_over_delta_storage": _ratio(totals["naive"].storage_accesses, totals["delta"].storage_accesses),
        "naive_over_delta_sload": _ratio(totals["naive"].sload, totals["delta"].sload),
        "naive_over_delta_weighted": _ratio(totals["naive"].weighted_cost(w), totals["delta"].weighted_cost(w)),
        "delta_over_none_weighted": _ratio(totals["delta"].weighted_cost(w), totals["none"].weighted_cost(w)),
        "delta_unoptimized_over_none_weighted": _ratio(totals["delta_unoptimized"].weighted_cost(w),
                                                       totals["none"].weighted_cost(w)),
    }
    return report
