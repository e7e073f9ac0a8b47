"""Command-line entry point.

Three subcommands:

  domainpar verify   randomized sharded-vs-dense equivalence suite
  domainpar bench    timing/memory sweeps, CSV rows streamed as computed
  domainpar memory   closed-form memory model (reference table or estimate)

Exit codes: 0 success, 1 verification failure or runtime error, 2 usage
error (bad flags, unknown op names, invalid spec values).
"""

from __future__ import annotations

import argparse
import sys

from . import bench, memory, verify
from .errors import DomainParError


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainpar",
        description="Domain-parallel tensor ops on a simulated device mesh.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser(
        "verify", help="run the sharded-vs-dense equivalence suite"
    )
    p_verify.add_argument(
        "--ops", type=str, default=None,
        help="comma-separated op names (default: all)",
    )
    p_verify.add_argument("--ranks", type=_int_list, default=verify.DEFAULT_RANKS)
    p_verify.add_argument(
        "--per-rank", type=int, default=verify.DEFAULT_PER_RANK,
        help="instances per (op, rank-count) pair",
    )
    p_verify.add_argument("--seed", type=int, default=42)
    p_verify.add_argument(
        "--perturb", type=str, default=None, metavar="OP",
        help="fault injection: skew OP's handlers by 1e-3 and expect FAIL",
    )
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser("bench", help="time one op across sizes and ranks")
    p_bench.add_argument("--op", required=True, choices=sorted(bench.BENCH_OPS))
    p_bench.add_argument("--sizes", type=_int_list, required=True)
    p_bench.add_argument("--ranks", type=_int_list, default=(1, 2, 4))
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--warmup", type=int, default=1)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument(
        "--out", type=str, default=None,
        help="write CSV to this file instead of stdout",
    )
    p_bench.set_defaults(func=cmd_bench)

    p_memory = sub.add_parser("memory", help="closed-form memory model")
    mem_sub = p_memory.add_subparsers(dest="memory_command", required=True)

    p_table = mem_sub.add_parser("table", help="print the six reference rows")
    p_table.add_argument("--csv", action="store_true")
    p_table.set_defaults(func=cmd_memory_table)

    p_est = mem_sub.add_parser("estimate", help="estimate one configuration")
    p_est.add_argument("--spatial", type=_int_list, required=True)
    p_est.add_argument("--features", type=int, required=True)
    p_est.add_argument("--layers", type=int, required=True)
    p_est.add_argument("--batch", type=int, default=1)
    p_est.add_argument("--bytes-per-element", type=int, default=4)
    p_est.add_argument("--optimizer-multiplier", type=float, default=3.0)
    p_est.add_argument(
        "--ranks", type=int, default=None,
        help="also report per-rank activations for an even domain split",
    )
    p_est.set_defaults(func=cmd_memory_estimate)

    return parser


def cmd_verify(args) -> int:
    ops = verify.OPS if args.ops is None else tuple(
        name.strip() for name in args.ops.split(",") if name.strip()
    )
    for name in ops:
        if name not in verify.OPS:
            print(f"error: unknown op {name!r}; choose from {verify.OPS}",
                  file=sys.stderr)
            return 2
    table = None
    if args.perturb is not None:
        if args.perturb not in verify.PERTURB_TARGETS:
            print(f"error: unknown op {args.perturb!r}; choose from {verify.OPS}",
                  file=sys.stderr)
            return 2
        table = verify.perturbed_table(args.perturb)
    reports = verify.run_all(
        ops=ops, ranks=args.ranks, per_rank=args.per_rank, seed=args.seed,
        table=table,
    )
    print(verify.format_reports(reports, seed=args.seed, ranks=args.ranks))
    return 0 if all(r.passed for r in reports) else 1


def cmd_bench(args) -> int:
    config = bench.BenchConfig(
        op=args.op,
        sizes=args.sizes,
        ranks=args.ranks,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
    )
    stream = open(args.out, "w") if args.out else sys.stdout
    try:
        print(f"# seed={config.seed}", file=stream, flush=True)
        print(bench.CSV_HEADER, file=stream, flush=True)
        for record in bench.iter_bench(config):
            print(record.csv_row(), file=stream, flush=True)
    finally:
        if args.out:
            stream.close()
    return 0


def cmd_memory_table(args) -> int:
    reports = memory.reference_table_reports()
    if args.csv:
        print(memory.table_csv(reports))
    else:
        print(memory.format_table(reports))
    return 0


def cmd_memory_estimate(args) -> int:
    spec = memory.LayerStackSpec(
        n_layers=args.layers,
        features=args.features,
        spatial=args.spatial,
        batch=args.batch,
        bytes_per_element=args.bytes_per_element,
        optimizer_multiplier=args.optimizer_multiplier,
    )
    report = memory.memory_report(spec)
    print(f"n_params: {report.n_params}")
    print(f"weight_mib: {report.weight_mib:.1f}")
    print(f"optimizer_mib: {report.optimizer_mib:.1f}")
    print(f"activation_mib: {report.activation_mib:.1f}")
    if args.ranks is not None:
        if args.ranks < 1:
            print("error: --ranks must be >= 1", file=sys.stderr)
            return 2
        per_rank = memory.per_rank_activation_bytes(spec, args.ranks)
        mib = [b / memory.MIB for b in per_rank]
        print(f"activation_mib_per_rank: {max(mib):.1f}")
        print(
            "activation_mib_by_rank: "
            + ",".join(f"{v:.1f}" for v in mib)
        )
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainParError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
