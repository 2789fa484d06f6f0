import itertools

import pytest
from hypothesis import given, settings, strategies as st

from invguard import contract_lang as cl
from invguard import spec_lang as sl
from invguard.binder import CondBinding, Free, Read, bind_cond, bind_expr, rewrite, to_template
from invguard.errors import UnboundFreeVarNoMap
from invguard.harness import _eval
from invguard.instrumenter import NameGen, _intermediate_template

T, C = cl.Temp, cl.Const
VOTE = sl.parse_spec("s = Map a, b Sum weights[a][c] Over c Where ballots[a][c] == b && b != 0;").rules[0]
BALLOT = cl.Address("ballots", (T("issueId"), cl.Builtin("sender")))


def test_vote_store_binds_issue_and_sender():
    assert bind_expr(BALLOT, VOTE.where) == ((("a", T("issueId")), ("c", cl.Builtin("sender"))),)


def test_other_base_var_binds_nothing():
    assert bind_expr(cl.Address("ballots", (T("i"), T("j"))), VOTE.body) == ()


def test_constant_binds_nothing():
    assert bind_expr(cl.Address("totalSupply"), sl.IntConst(0)) == ()


def test_scalar_match_binds_empty_map():
    assert bind_expr(cl.Address("totalSupply"), sl.StateRef("totalSupply")) == ((),)


def test_union_deduplicates():
    e = sl.BinOp("+", sl.MapAccess("m", ("x",)), sl.MapAccess("m", ("x",)))
    assert bind_expr(cl.Address("m", (T("k"),)), e) == ((("x", T("k")),),)


def test_repeated_free_var_keeps_both_pairs():
    e = sl.MapAccess("m", ("x", "x"))
    assert bind_expr(cl.Address("m", (T("i"), T("j"))), e) == ((("x", T("i")), ("x", T("j"))),)


def test_bind_cond():
    assert bind_cond(BALLOT, VOTE.where) == CondBinding("b", sl.MapAccess("ballots", ("a", "c")))
    self_ref = sl.parse_spec("t = Map x Sum 1 Over Where balances[x] + 1 == x;").rules[0]
    assert bind_cond(BALLOT, self_ref.where) is None
    cmp_only = sl.parse_spec("t = Map Sum 1 Over y Where balances[y] > 0;").rules[0]
    assert bind_cond(BALLOT, cmp_only.where) is None


def test_bind_cond_takes_leftmost():
    rule = sl.parse_spec("t = Map b Sum 1 Over y Where balances[y] + 1 == b && balances[y] == b;").rules[0]
    assert bind_cond(None, rule.where).expr == sl.BinOp("+", sl.MapAccess("balances", ("y",)), sl.IntConst(1))


def test_rewrite_vote_pre_update():
    template = _intermediate_template(VOTE, "-$")
    bindings = bind_expr(BALLOT, VOTE.body) + bind_expr(BALLOT, VOTE.where)
    assert len(bindings) == 1
    out = rewrite(template, bindings, bind_cond(BALLOT, VOTE.where), fresh=NameGen(), exclude={"s"})
    ballot = Read("ballots", (T("issueId"), cl.Builtin("sender")))
    assert out == (cl.If(
        cl.BinOp("&&", cl.BinOp("==", ballot, ballot), cl.BinOp("!=", ballot, C(0))),
        (cl.Store(cl.Address("s", (T("issueId"), ballot)),
                  cl.BinOp("-$", Read("s", (T("issueId"), ballot)),
                           Read("weights", (T("issueId"), cl.Builtin("sender"))))),),
    ),)


def test_rewrite_guards_duplicates():
    template = (cl.Store(cl.Address("v", (Free("a"),)), C(1)),)
    out = rewrite(template, ((("a", T("i")), ("a", T("j"))),), None, fresh=NameGen())
    assert out == (cl.If(cl.BinOp("==", T("i"), T("j")), (cl.Store(cl.Address("v", (T("i"),)), C(1)),)),)


def test_rewrite_wraps_unbound_in_loop():
    template = (cl.Store(cl.Address("t"), cl.BinOp("+$", Read("t"), Read("balances", (Free("y"),)))),)
    out = rewrite(template, ((),), None, fresh=NameGen())
    assert out == (cl.ForIn(("__i0",), "balances", (
        cl.Store(cl.Address("t"), cl.BinOp("+$", Read("t"), Read("balances", (T("__i0"),)))),)),)


def test_rewrite_concatenates_instantiations():
    template = (cl.Store(cl.Address("v", (Free("a"),)), C(1)),)
    out = rewrite(template, ((("a", T("i")),), (("a", T("j")),)), None, fresh=NameGen())
    assert [s.address.indices for s in out] == [(T("i"),), (T("j"),)]


def test_rewrite_empty_binding_set():
    assert rewrite((cl.Assert(Free("a")),), (), None, fresh=NameGen()) == ()


def test_rewrite_without_any_map_fails():
    with pytest.raises(UnboundFreeVarNoMap):
        rewrite((cl.Assert(cl.BinOp("==", Free("a"), C(0))),), ((),), None, fresh=NameGen())


def test_rewrite_is_deterministic():
    template = _intermediate_template(VOTE, "+$")
    runs = [rewrite(template, ((),), None, fresh=NameGen()) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


def test_to_template_uses_exact_arithmetic():
    e = sl.parse_spec("t = Map Sum balances[y] * 2 - 1 Over y;").rules[0].body
    assert to_template(e).op == "-$"
    assert to_template(e).lhs.op == "*$"


# --- soundness by enumeration -------------------------------------------------

KEYS = (0, 1, 2)
ARITY = {"m1": 1, "m2": 2}
FREE = ("x", "y")


def invariant_exprs():
    leaves = st.one_of(
        st.integers(0, 3).map(sl.IntConst),
        st.just(sl.StateRef("s")),
        st.tuples(st.sampled_from(FREE)).map(lambda ix: sl.MapAccess("m1", ix)),
        st.tuples(st.sampled_from(FREE), st.sampled_from(FREE)).map(lambda ix: sl.MapAccess("m2", ix)),
    )
    return st.recursive(leaves, lambda inner: st.builds(sl.BinOp, st.sampled_from("+-*"), inner, inner),
                        max_leaves=5)


@st.composite
def states(draw):
    return {
        "s": {(): draw(st.integers(0, 3))},
        "m1": {k: draw(st.integers(0, 3)) for k in itertools.product(KEYS, repeat=1)},
        "m2": {k: draw(st.integers(0, 3)) for k in itertools.product(KEYS, repeat=2)},
    }


@settings(max_examples=300, deadline=None)
@given(invariant_exprs(), st.sampled_from(["s", "m1", "m2"]), st.data())
def test_bindings_cover_every_changed_instance(expr, var, data):
    key = tuple(data.draw(st.sampled_from(KEYS)) for _ in range(ARITY.get(var, 0)))
    address = cl.Address(var, tuple(C(k) for k in key))
    pre = data.draw(states())
    post = {name: dict(m) for name, m in pre.items()}
    post[var][key] = pre[var][key] + data.draw(st.integers(1, 3))
    bindings = bind_expr(address, expr)

    def read_from(state):
        return lambda name, k: state[name][k]

    for values in itertools.product(KEYS, repeat=len(FREE)):
        env = dict(zip(FREE, values))
        if _eval(expr, env, read_from(pre)) == _eval(expr, env, read_from(post)):
            continue
        assert any(all(env[x] == e.value for x, e in bmap) for bmap in bindings), (env, bindings)
