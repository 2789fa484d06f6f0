"""End-to-end acceptance checks. Each test prints a single PASS/FAIL line."""
import dataclasses

import numpy as np
import pytest

from invguard import contract_lang as cl
from invguard import spec_lang as sl
from invguard.harness import (
    TraceSpec, bench_compare, differential_test, fixture_text, gen_trace, load_fixture, oracle_check,
)
from invguard.instrumenter import cache_state_vars, compile_contract
from invguard.vm import StateStore, VMConfig, execute, run_trace

# pinned thresholds
MIN_NAIVE_OVER_DELTA = 100.0
MAX_DELTA_OVER_NONE = 3.0
MIN_RANDOM_TXS = 10_000
MIN_SEEDS = 5
ATOMICITY_TRACES = 1000


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _verdicts(program, trace, config=None):
    return run_trace(StateStore.for_program(program), program, trace, config).verdicts


def test_1_double_vote_nullified(verdict):
    program, spec = load_fixture("vote")
    trace = gen_trace(TraceSpec("attack_double_vote"))
    plain = _verdicts(program, trace)
    naive = _verdicts(compile_contract(program, spec, "naive")[0], trace)
    delta = _verdicts(compile_contract(program, spec, "delta")[0], trace)
    state = StateStore.for_program(program)
    flagged = []
    for i, tx in enumerate(trace):
        execute(state, program, tx)
        if not oracle_check(state, spec)[0]:
            flagged.append(i)
    ok = (plain == [True] * 3 and naive == delta == [True, True, False] and flagged == [2])
    verdict(1, ok, f"plain={plain} naive={naive} delta={delta} oracle_flags={flagged}")


def test_2_batch_overflow_nullified(verdict):
    program, spec = load_fixture("erc20")
    config = VMConfig(int_mode="wrap256")
    trace = gen_trace(TraceSpec("attack_batch_overflow"))
    state = StateStore.for_program(program)
    plain = run_trace(state, program, trace, config).verdicts
    violated = not oracle_check(state, spec)[0]
    results = {mode: _verdicts(compile_contract(program, spec, mode)[0], trace, config)
               for mode in ("naive", "delta")}
    results["delta_opt"] = _verdicts(
        compile_contract(program, spec, "delta", prune=True, cache=True)[0], trace, config)
    ok = plain == [True] and violated and all(v == [False] for v in results.values())
    verdict(2, ok, f"plain={plain} invariant_violated={violated} instrumented={results}")


ORACLE_RUNS = [
    ("erc20", "erc20_transfer", 20, 1000, {}),
    ("erc721", "erc721_transfer", 20, 600, {}),
    ("vote", "erc1202_vote", 20, 600, {"repeat_rate": 0.2}),
]


def test_3_oracle_equivalence(verdict):
    total, mismatches, seeds = 0, [], {}
    for name, kind, accounts, txs, params in ORACLE_RUNS:
        program, spec = load_fixture(name)
        for seed in range(MIN_SEEDS):
            trace = gen_trace(TraceSpec(kind, accounts, txs, seed, params))
            report = differential_test(program, spec, trace, optimized=False)
            total += len(trace)
            mismatches += [dict(m, fixture=name, seed=seed) for m in report.mismatches]
            seeds[name] = seeds.get(name, 0) + 1
    ok = total >= MIN_RANDOM_TXS and min(seeds.values()) >= MIN_SEEDS and not mismatches
    verdict(3, ok, f"{total} transactions, seeds={seeds}, mismatches={mismatches[:5]}")


@pytest.fixture(scope="module")
def erc20_bench():
    program, spec = load_fixture("erc20")
    trace = gen_trace(TraceSpec("erc20_transfer", 1000, 1000, 7))
    return bench_compare(program, spec, trace)


def test_4_naive_blowup(verdict, erc20_bench):
    ratio = erc20_bench.ratios["naive_over_delta_storage"]
    naive, delta = erc20_bench.costs["naive"], erc20_bench.costs["delta"]
    ok = ratio >= MIN_NAIVE_OVER_DELTA and not erc20_bench.mismatches
    verdict(4, ok, f"naive/delta sload+sstore = {ratio:.1f} "
                   f"(naive {naive['sload'] + naive['sstore']}, delta {delta['sload'] + delta['sstore']})")


def test_5_delta_overhead_bounded(verdict, erc20_bench):
    ratio = erc20_bench.ratios["delta_over_none_weighted"]
    unopt = erc20_bench.ratios["delta_unoptimized_over_none_weighted"]
    verdict(5, ratio <= MAX_DELTA_OVER_NONE,
            f"delta/none weighted cost = {ratio:.3f} (without prune+cache: {unopt:.3f})")


def _fixture_traces():
    yield "vote", gen_trace(TraceSpec("attack_double_vote")), VMConfig()
    yield "erc20", gen_trace(TraceSpec("attack_batch_overflow")), VMConfig(int_mode="wrap256")
    for name, kind, accounts, txs, params in ORACLE_RUNS:
        for seed in range(3):
            yield name, gen_trace(TraceSpec(kind, accounts, txs // 2, 100 + seed, params)), VMConfig()


def _costs(program, trace):
    return run_trace(StateStore.for_program(program), program, trace).total


def test_6_optimizations_are_safe(verdict):
    problems = []
    for name, trace, config in _fixture_traces():
        program, spec = load_fixture(name)
        report = differential_test(program, spec, trace, config)
        if report.verdicts["delta_opt"] != report.verdicts["delta"]:
            problems.append((name, "verdicts"))
        problems += [(name, m["kind"]) for m in report.mismatches if m["mode"] == "delta_opt"]
    pattern, _ = load_fixture("cache_pattern")
    cached = cache_state_vars(pattern)
    trace = gen_trace(TraceSpec("custom", params={"txs": [
        {"sender": s, "function": "vote", "args": [1, s % 3]} for s in range(1, 9)]}))
    before, after = _costs(pattern, trace), _costs(cached, trace)
    same = _verdicts(pattern, trace) == _verdicts(cached, trace)
    ok = (not problems and same and after.storage_accesses < before.storage_accesses
          and after.sload < before.sload)
    verdict(6, ok, f"differences={problems}; cache_pattern sload+sstore "
                   f"{before.storage_accesses} -> {after.storage_accesses}, sload {before.sload} -> {after.sload}")


INJECT_BASE = """
contract Injected {
  state balances: map^1;
  state totalSupply: int;
  state log: map^2;
  state counter: int;
  entry fn mint(to, v) {
    b = load balances[to];
    store balances[to], b + v;
    t = load totalSupply;
    store totalSupply, t + v;
  }
  entry fn transfer(to, v) {
    b = load balances[sender];
    if b >= v {
      store balances[sender], b - v;
      c = load balances[to];
      store balances[to], c + v;
    }
    n = load counter;
    store counter, n + 1;
    store log[n][sender], v;
  }
  entry fn touch(k) {
    store log[k][k], k;
    call bump(k);
  }
  fn bump(k) {
    n = load counter;
    store counter, n + k;
  }
}
"""

INJECT_SPEC = "t = Map Sum balances[y] Over y; ForAll Assert t == totalSupply;"


def _inject(program, rng):
    """Put ``assert sender != k`` at a random spot in every function body."""
    functions = []
    for f in program.functions:
        at = int(rng.integers(0, len(f.body) + 1))
        guard = cl.Assert(cl.BinOp("!=", cl.Builtin("sender"), cl.Const(int(rng.integers(0, 6)))))
        functions.append(dataclasses.replace(f, body=f.body[:at] + (guard,) + f.body[at:]))
    return dataclasses.replace(program, functions=tuple(functions))


def test_7_revert_atomicity(verdict):
    base = cl.parse_contract(INJECT_BASE)
    spec = sl.check_spec(sl.parse_spec(INJECT_SPEC), base)
    rng = np.random.Generator(np.random.PCG64(2024))
    reverts, broken = 0, []
    for n in range(ATOMICITY_TRACES):
        program = _inject(base, rng)
        if n % 2:
            program = compile_contract(program, spec, "delta", prune=bool(n % 4 == 1), cache=True)[0]
        state = StateStore.for_program(program)
        for _ in range(int(rng.integers(3, 12))):
            fn = ("mint", "transfer", "touch")[int(rng.integers(0, 3))]
            args = (int(rng.integers(0, 6)),) if fn == "touch" else (
                int(rng.integers(0, 6)), int(rng.integers(0, 50)))
            tx = gen_trace(TraceSpec("custom", params={"txs": [
                {"sender": int(rng.integers(0, 6)), "function": fn, "args": list(args)}]}))[0]
            before = state.to_json()
            out = execute(state, program, tx)
            if not out.accepted:
                reverts += 1
                if state.to_json() != before:
                    broken.append((n, tx.to_dict()))
    ok = not broken and reverts > ATOMICITY_TRACES
    verdict(7, ok, f"{ATOMICITY_TRACES} traces, {reverts} reverts, non-identical snapshots={broken[:3]}")


def test_8_round_trips(verdict):
    failures = []
    checked = 0
    for name in ("erc20", "erc721", "vote", "cache_pattern"):
        text = fixture_text(f"{name}.mini")
        program = cl.parse_contract(text)
        if cl.parse_contract(cl.pretty_print(program)) != program:
            failures.append(f"{name}.mini")
        checked += 1
        if name == "cache_pattern":
            outputs = [cache_state_vars(program)]
        else:
            spec_text = fixture_text(f"{name}.inv")
            parsed = sl.parse_spec(spec_text)
            if sl.parse_spec(sl.pretty_print_spec(parsed)) != parsed:
                failures.append(f"{name}.inv")
            checked += 1
            spec = sl.check_spec(parsed, program)
            outputs = [compile_contract(program, spec, mode, prune=p, cache=c)[0]
                       for mode in ("delta", "naive") for p in (False, True) for c in (False, True)]
        for i, out in enumerate(outputs):
            if cl.parse_contract(cl.pretty_print(out), reserved_ok=True) != out:
                failures.append(f"{name} output {i}")
            checked += 1
    verdict(8, not failures, f"{checked} round-trips, failures={failures}")

