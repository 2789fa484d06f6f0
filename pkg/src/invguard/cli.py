"""Command-line entry point: instrument contracts, run and generate traces,
difftest the instrumentation modes, and benchmark them."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import contract_lang as cl
from . import spec_lang as sl
from .binder import bind_cond, bind_expr
from .errors import InvGuardError
from .harness import TRACE_KINDS, TraceSpec, bench_compare, differential_test, gen_trace, read_trace, write_trace
from .instrumenter import MODES, compile_contract
from .vm import StateStore, VMConfig, run_trace


def _load(args):
    program = cl.parse_contract(Path(args.contract).read_text(), reserved_ok=True)
    spec = None
    if getattr(args, "spec", None):
        spec = sl.check_spec(sl.parse_spec(Path(args.spec).read_text()), program)
    return program, spec


def _config(args) -> VMConfig:
    weights = VMConfig.parse_weights(args.weights) if args.weights else None
    kwargs = {"int_mode": args.int_mode, "depth_limit": args.depth_limit}
    if weights is not None:
        kwargs["weights"] = weights
    return VMConfig(**kwargs)


def _write_json(data, path) -> None:
    text = json.dumps(data, sort_keys=True, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_instrument(args) -> int:
    program, spec = _load(args)
    out, stats = compile_contract(program, spec, args.mode, prune=args.prune, cache=args.cache)
    text = cl.pretty_print(out)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.stats:
        _write_json(stats.to_dict(), args.stats)
    return 0


def cmd_run(args) -> int:
    program, _ = _load(args)
    state = StateStore.for_program(program)
    result = run_trace(state, program, read_trace(args.trace), _config(args))
    config = _config(args)
    report = {
        "outcomes": [o.to_dict() for o in result.outcomes],
        "total": {**result.total.to_dict(), "weighted": result.total.weighted_cost(config.weights)},
        "accepted": sum(result.verdicts),
        "final_state": state.snapshot(),
    }
    _write_json(report, args.report)
    return 0


def cmd_gen_trace(args) -> int:
    params = json.loads(args.params) if args.params else {}
    trace = gen_trace(TraceSpec(args.kind, args.accounts, args.txs, args.seed, params))
    if args.output:
        write_trace(trace, args.output)
    else:
        for tx in trace:
            print(json.dumps(tx.to_dict(), sort_keys=True))
    return 0


def cmd_difftest(args) -> int:
    program, spec = _load(args)
    report = differential_test(program, spec, read_trace(args.trace), _config(args))
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(f"{len(report.verdicts['oracle'])} transactions, {len(report.mismatches)} mismatches")
    for m in report.mismatches[:20]:
        print(json.dumps(m, sort_keys=True))
    return 0 if report.ok else 1


def cmd_bench(args) -> int:
    program, spec = _load(args)
    report = bench_compare(program, spec, read_trace(args.trace), _config(args))
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(report.table())
    return 0 if report.ok else 1


def cmd_bindings(args) -> int:
    """Print, for every store in the contract, its binding set against each rule."""
    program, spec = _load(args)
    rows = []
    for f in program.functions:
        for s in cl.iter_statements(f.body):
            if not isinstance(s, cl.Store):
                continue
            for k, rule in enumerate(spec.rules):
                exprs = (rule.body, rule.where) if isinstance(rule, sl.MapSumDecl) else (rule.body,)
                bindings = [b for e in exprs for b in bind_expr(s.address, e)]
                if not bindings:
                    continue
                cond = bind_cond(s.address, rule.where) if isinstance(rule, sl.MapSumDecl) else None
                rows.append({
                    "function": f.name,
                    "store": cl.format_address(s.address),
                    "rule": k,
                    "bindings": sorted({tuple(sorted((v, cl.format_expr(e)) for v, e in b)) for b in bindings}),
                    "cond": None if cond is None else [cond.var, sl.format_expr(cond.expr)],
                })
    _write_json(rows, None)
    return 0


def _vm_flags(p) -> None:
    p.add_argument("--int-mode", choices=("bigint", "wrap256"), default="bigint")
    p.add_argument("--weights", default="", help="e.g. sload=100,sstore=100,mload=1,mstore=1,arith=1")
    p.add_argument("--depth-limit", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="emit an instrumented contract")
    p.add_argument("--contract", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--mode", choices=MODES, default="delta")
    p.add_argument("--prune", action="store_true", help="drop exit checks an entry cannot affect")
    p.add_argument("--cache", action="store_true", help="cache repeated state accesses in temps")
    p.add_argument("-o", "--output")
    p.add_argument("--stats", help="write instrumentation statistics as JSON")
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("run", help="execute a trace and report outcomes and costs")
    p.add_argument("--contract", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--report")
    _vm_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-trace", help="generate a seeded transaction trace (JSON Lines)")
    p.add_argument("--kind", choices=TRACE_KINDS, required=True)
    p.add_argument("--accounts", type=int, default=10)
    p.add_argument("--txs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="extra generator parameters as a JSON object")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_trace)

    for name, func, help_text in (
        ("difftest", cmd_difftest, "compare oracle, naive and delta verdicts (exit 1 on mismatch)"),
        ("bench", cmd_bench, "compare costs of none, delta and naive"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--contract", required=True)
        p.add_argument("--spec", required=True)
        p.add_argument("--trace", required=True)
        p.add_argument("--report")
        _vm_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("bindings", help="dump store/rule binding sets as JSON")
    p.add_argument("--contract", required=True)
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_bindings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvGuardError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
