import json

import pytest
from hypothesis import given, settings, strategies as st

from invguard import contract_lang as cl
from invguard.errors import InvalidParams, UnknownEntry
from invguard.harness import TraceSpec, fixture_text, gen_trace
from invguard.vm import (
    DEFAULT_WEIGHTS, WORD, CostCounters, StateStore, Transaction, VMConfig, execute, run_trace,
)

ARITH = """
contract Arith {
  state r: map^1;
  entry fn ops(a, b) {
    store r[0], a + b;
    store r[1], a - b;
    store r[2], a * b;
    store r[3], a +$ b;
    store r[4], a -$ b;
    store r[5], a *$ b;
  }
  entry fn div(a, b) {
    store r[0], a / b;
    store r[1], a % b;
  }
}
"""

MISC = """
contract Misc {
  state x: int;
  state m: map^1;
  memory scratch: map^1;
  entry fn setThenFail(v) {
    store x, v;
    store m[v], v;
    assert 0;
  }
  entry fn zero(k) { store m[k], 0; }
  entry fn sum() {
    s = 0;
    for k in m { v = load m[k]; s = s + v; }
    store x, s;
  }
  entry fn readUndefined(k) { v = load m[k]; store x, v + 1; }
  entry fn remember(k) {
    old = load scratch[k];
    store scratch[k], old + 1;
    again = load scratch[k];
    store x, again;
  }
  entry fn depth() { call inner(); }
  fn inner() { store x, calldepth; }
  entry fn recurse() { call recurse(); }
  fn helper() { }
}
"""


@pytest.fixture(scope="module")
def erc20():
    return cl.parse_contract(fixture_text("erc20.mini"))


@pytest.fixture(scope="module")
def misc():
    return cl.parse_contract(MISC)


def test_transfer_example(erc20):
    state = StateStore.for_program(erc20)
    assert execute(state, erc20, Transaction(0, "mint", (1, 10))).accepted
    out = execute(state, erc20, Transaction(1, "transfer", (2, 5)))
    assert out.accepted
    assert state.maps["balances"] == {(1,): 5, (2,): 5}
    assert out.state_delta == [["balances[1]", 10, 5], ["balances[2]", 0, 5]]
    assert out.cost == CostCounters(sload=2, sstore=2, arith=3)


def test_empty_trace(erc20):
    result = run_trace(StateStore.for_program(erc20), erc20, [])
    assert result.outcomes == [] and result.total == CostCounters()


def test_hundred_transfers_accepted(erc20):
    trace = gen_trace(TraceSpec("erc20_transfer", 10, 100, 1,
                                {"fail_rate": 0.0, "batch_rate": 0.0, "from_rate": 0.0}))
    result = run_trace(StateStore.for_program(erc20), erc20, trace)
    assert len(result.outcomes) == 110
    assert all(result.verdicts)


def test_revert_restores_state(misc):
    state = StateStore.for_program(misc)
    execute(state, misc, Transaction(0, "zero", (4,)))
    before = state.to_json()
    out = execute(state, misc, Transaction(0, "setThenFail", (7,)))
    assert out.status == "reverted" and out.reason == "assertion failed"
    assert out.cost.sstore == 2  # work done before the revert still counts
    assert state.to_json() == before
    assert (7,) not in state.maps["m"]


def test_zero_write_defines_key(misc):
    state = StateStore.for_program(misc)
    execute(state, misc, Transaction(0, "zero", (3,)))
    assert state.maps["m"] == {(3,): 0}
    out = execute(state, misc, Transaction(0, "sum", ()))
    assert out.cost.sload == 2  # one per iterated key plus the load in the body


def test_undefined_read_is_zero_and_does_not_define(misc):
    state = StateStore.for_program(misc)
    execute(state, misc, Transaction(0, "readUndefined", (9,)))
    assert state.scalars["x"] == 1
    assert state.maps["m"] == {}


def test_forin_sorted_and_snapshotted(misc):
    state = StateStore.for_program(misc)
    for k in (5, 1, 3):
        execute(state, misc, Transaction(0, "zero", (k,)))
    state.maps["m"].update({(5,): 50, (1,): 10, (3,): 30})
    execute(state, misc, Transaction(0, "sum", ()))
    assert state.scalars["x"] == 90


def test_memory_is_transaction_scoped(misc):
    state = StateStore.for_program(misc)
    for _ in range(2):
        out = execute(state, misc, Transaction(0, "remember", (1,)))
        assert state.scalars["x"] == 1
        assert (out.cost.mload, out.cost.mstore) == (2, 1)
    assert "scratch" not in state.snapshot()["maps"]


def test_calldepth_and_depth_limit(misc):
    state = StateStore.for_program(misc)
    execute(state, misc, Transaction(0, "depth", ()))
    assert state.scalars["x"] == 2
    out = execute(state, misc, Transaction(0, "recurse", ()), VMConfig(depth_limit=10))
    assert out.status == "reverted" and out.reason == "call depth limit exceeded"


def test_entry_checks(misc):
    state = StateStore.for_program(misc)
    with pytest.raises(UnknownEntry):
        execute(state, misc, Transaction(0, "helper", ()))
    with pytest.raises(UnknownEntry):
        execute(state, misc, Transaction(0, "missing", ()))
    with pytest.raises(InvalidParams):
        execute(state, misc, Transaction(0, "zero", ()))
    result = run_trace(state, misc, [Transaction(0, "helper", ()), Transaction(0, "zero", (1,))])
    assert [o.status for o in result.outcomes] == ["rejected", "accepted"]


def test_division_truncates_toward_zero():
    p = cl.parse_contract(ARITH)
    state = StateStore.for_program(p)
    execute(state, p, Transaction(0, "div", (-7, 2)))
    assert state.maps["r"] == {(0,): -3, (1,): -1}
    out = execute(state, p, Transaction(0, "div", (1, 0)))
    assert out.status == "reverted" and out.reason == "division by zero"


U256 = st.integers(0, WORD - 1)


@settings(max_examples=200, deadline=None)
@given(U256, U256)
def test_wrap_mode_ring_laws(a, b):
    p = cl.parse_contract(ARITH)
    state = StateStore.for_program(p)
    execute(state, p, Transaction(0, "ops", (a, b)), VMConfig(int_mode="wrap256"))
    r = state.maps["r"]
    assert r[(0,)] == (a + b) % WORD
    assert r[(1,)] == (a - b) % WORD
    assert r[(2,)] == (a * b) % WORD
    assert (r[(3,)], r[(4,)], r[(5,)]) == (a + b, a - b, a * b)


@settings(max_examples=100, deadline=None)
@given(st.integers(-10**40, 10**40), st.integers(-10**40, 10**40))
def test_bigint_mode_is_exact(a, b):
    p = cl.parse_contract(ARITH)
    state = StateStore.for_program(p)
    execute(state, p, Transaction(0, "ops", (a, b)))
    assert [state.maps["r"][(i,)] for i in range(3)] == [a + b, a - b, a * b]


def test_determinism(erc20):
    trace = gen_trace(TraceSpec("erc20_transfer", 8, 80, 3))
    runs = []
    for _ in range(2):
        state = StateStore.for_program(erc20)
        result = run_trace(state, erc20, trace)
        runs.append(([o.to_dict() for o in result.outcomes], result.total, state.to_json()))
    assert runs[0] == runs[1]


def test_exclusive_access_during_execute(misc):
    state = StateStore.for_program(misc)
    seen = []
    execute(state, misc, Transaction(0, "zero", (1,)), post_check=lambda s: seen.append(s.lock.locked()) or True)
    assert seen == [True]
    assert not state.lock.locked()


def test_post_check_veto_reverts(misc):
    state = StateStore.for_program(misc)
    out = execute(state, misc, Transaction(0, "zero", (1,)), post_check=lambda s: False)
    assert out.status == "reverted"
    assert state.maps["m"] == {}


def test_snapshot_round_trip(erc20):
    state = StateStore.for_program(erc20)
    run_trace(state, erc20, gen_trace(TraceSpec("erc20_transfer", 5, 20, 2)))
    text = state.to_json()
    assert json.loads(text) == state.snapshot()
    assert StateStore.from_snapshot(json.loads(text)) == state
    assert list(json.loads(text)["maps"]) == sorted(json.loads(text)["maps"])


def test_weights():
    assert VMConfig.parse_weights("sload=7, arith=0") == {**DEFAULT_WEIGHTS, "sload": 7, "arith": 0}
    with pytest.raises(InvalidParams):
        VMConfig.parse_weights("gas=3")
    assert CostCounters(sload=1, sstore=1, mload=1, mstore=1, arith=1).weighted_cost() == 203
    with pytest.raises(InvalidParams):
        VMConfig(int_mode="float")
