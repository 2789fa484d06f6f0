"""Compile contract invariants into runtime checks that revert violating transactions."""

from .contract_lang import parse_contract, pretty_print
from .harness import TraceSpec, bench_compare, differential_test, gen_trace, load_fixture, oracle_check
from .instrumenter import cache_state_vars, compile_contract, instrument, prune_checks
from .spec_lang import check_spec, parse_spec, pretty_print_spec
from .vm import StateStore, Transaction, VMConfig, execute, run_trace

__all__ = [
    "parse_contract", "pretty_print", "parse_spec", "pretty_print_spec", "check_spec",
    "instrument", "compile_contract", "prune_checks", "cache_state_vars",
    "StateStore", "Transaction", "VMConfig", "execute", "run_trace",
    "TraceSpec", "gen_trace", "oracle_check", "differential_test", "bench_compare", "load_fixture",
]
