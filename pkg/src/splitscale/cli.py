"""Command line entry points: run scenarios, check them, audit exports.

Exit codes: 0 success, 1 scenario problem, 2 broken invariant (audit
failure or internal error during a run).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import ledger
from .ledger import AuditError, import_chainstate
from .netsim import NodeStats, SimReport, run_simulation
from .scenario import Scenario, ScenarioError, parse_scenario

__all__ = ["main", "compute_scale_factor", "compute_bandwidth_ratio", "write_outputs"]

log = logging.getLogger("splitscale.cli")

CSV_HEADER = "record,height,subchain,node,kind,value\n"


def _measure_window(tip_height: int) -> tuple[int, int]:
    """Heights (exclusive lo, inclusive hi) metrics average over: the second
    half of the run, excluding warm-up."""
    lo = tip_height // 2
    return lo, tip_height


def compute_scale_factor(report: SimReport, capacity: int) -> Optional[float]:
    """Mean confirmed transactions per interval over the measurement window,
    relative to one full block per interval."""
    lo, hi = _measure_window(report.tip_height)
    if hi <= lo or capacity <= 0:
        return None
    total = sum(
        count for (h, _s), count in report.confirmed.items() if lo < h <= hi
    )
    return total / (hi - lo) / capacity


def _window_block_bytes_rate(stats: NodeStats, lo: int, hi: int) -> Optional[float]:
    marks = stats.block_bytes_at
    if not marks:
        return None
    lo_keys = [h for h in marks if h <= lo]
    hi_keys = [h for h in marks if h <= hi]
    if not lo_keys or not hi_keys:
        return None
    lo_h, hi_h = max(lo_keys), max(hi_keys)
    if hi_h <= lo_h:
        return None
    return (marks[hi_h] - marks[lo_h]) / (hi_h - lo_h)


def compute_bandwidth_ratio(
    report: SimReport, half_node: str, full_node: str
) -> Optional[float]:
    """Half-node block bytes per interval over a full node's, both measured
    over the run's second half."""
    lo, hi = _measure_window(report.tip_height)
    half = _window_block_bytes_rate(report.node_stats[half_node], lo, hi)
    full = _window_block_bytes_rate(report.node_stats[full_node], lo, hi)
    if half is None or full is None or full == 0:
        return None
    return half / full


def _first_node(report: SimReport, scenario: Scenario, role: str) -> Optional[str]:
    for spec in scenario.config.nodes:
        if spec.role == role:
            return spec.node_id
    return None


def metrics_csv(report: SimReport) -> str:
    rows = [CSV_HEADER]
    for (height, subchain) in sorted(report.confirmed):
        rows.append(
            f"confirmed,{height},{subchain},,,{report.confirmed[(height, subchain)]}\n"
        )
    for node in sorted(report.node_stats):
        stats = report.node_stats[node]
        for kind in sorted(stats.bytes_in):
            rows.append(f"bytes_in,,,{node},{kind},{stats.bytes_in[kind]}\n")
        for kind in sorted(stats.bytes_out):
            rows.append(f"bytes_out,,,{node},{kind},{stats.bytes_out[kind]}\n")
        rows.append(f"txs_confirmed,,,{node},,{stats.txs_confirmed}\n")
        rows.append(f"txs_rejected,,,{node},,{stats.txs_rejected}\n")
        rows.append(f"blocks_validated,,,{node},,{stats.blocks_validated}\n")
        rows.append(f"blocks_rejected,,,{node},,{stats.blocks_rejected}\n")
        rows.append(f"reorgs,,,{node},,{stats.reorgs}\n")
    for miner in sorted(report.miner_fees):
        rows.append(f"fees,,,{miner},,{report.miner_fees[miner]}\n")
    for miner in sorted(report.miner_subsidy):
        rows.append(f"subsidy,,,{miner},,{report.miner_subsidy[miner]}\n")
    return "".join(rows)


def summary_text(scenario: Scenario, report: SimReport) -> str:
    lines = [
        f"scenario {scenario.name}",
        f"tip_height {report.tip_height}",
        f"events {report.events}",
        f"issued {report.issued_total}",
        f"trace_digest {report.trace_digest.hex()}",
        f"export_digest {report.export_digest.hex()}",
    ]
    capacity = scenario.config.params.block_tx_capacity
    if "scale_factor" in scenario.metrics:
        sf = compute_scale_factor(report, capacity)
        lines.append(f"scale_factor {sf:.6f}" if sf is not None else "scale_factor n/a")
    if "bandwidth_ratio" in scenario.metrics:
        half = _first_node(report, scenario, "half")
        full = _first_node(report, scenario, "full")
        ratio = (
            compute_bandwidth_ratio(report, half, full)
            if half is not None and full is not None
            else None
        )
        lines.append(
            f"bandwidth_ratio {ratio:.6f}" if ratio is not None else "bandwidth_ratio n/a"
        )
    for miner in sorted(report.miner_fees):
        lines.append(f"fees {miner} {report.miner_fees[miner]}")
    return "\n".join(lines) + "\n"


def write_outputs(scenario: Scenario, report: SimReport, outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "metrics.csv").write_text(metrics_csv(report))
    (outdir / "summary.txt").write_text(summary_text(scenario, report))
    for subchain, data in report.exports.items():
        (outdir / f"chainstate-{subchain:02d}.export").write_bytes(data)


def _run_one(path: str, outdir: str, seed: Optional[str]) -> int:
    scenario_path = Path(path)
    try:
        scenario = parse_scenario(scenario_path.read_text(), scenario_path.stem)
    except ScenarioError as exc:
        for diag in exc.diagnostics:
            print(f"{path}: {diag}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return 1
    if seed is not None:
        scenario.config.seed = seed
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with open(out / "trace.log", "w") as sink:
            report = run_simulation(scenario.config, trace_sink=sink)
    except AuditError as exc:
        print(f"{path}: invariant violation: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{path}: internal error: {exc}", file=sys.stderr)
        return 2
    write_outputs(scenario, report, out)
    print((out / "summary.txt").read_text(), end="")
    return 0


def _run_one_star(args: tuple[str, str, Optional[str]]) -> int:
    return _run_one(*args)


def cmd_run(args: argparse.Namespace) -> int:
    out_root = Path(args.out)
    jobs = []
    for path in args.scenarios:
        outdir = out_root if len(args.scenarios) == 1 else out_root / Path(path).stem
        jobs.append((path, str(outdir), args.seed))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_run_one_star, jobs))
    else:
        codes = [_run_one_star(job) for job in jobs]
    return max(codes, default=0)


def cmd_check(args: argparse.Namespace) -> int:
    path = Path(args.scenario)
    try:
        scenario = parse_scenario(path.read_text(), path.stem)
    except ScenarioError as exc:
        for diag in exc.diagnostics:
            print(f"{args.scenario}: {diag}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return 1
    n = scenario.config
    print(
        f"{scenario.name}: ok"
        f" ({len(n.nodes)} nodes, {len(n.wallets)} wallets,"
        f" {len(n.splits)} splits, duration {n.duration_ms} ms)"
    )
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    states = []
    metas = []
    try:
        for path in args.exports:
            state, height, issued = import_chainstate(Path(path).read_bytes())
            states.append((path, state))
            metas.append((state.depth, height, issued))
    except Exception as exc:
        print(f"audit: cannot read exports: {exc}", file=sys.stderr)
        return 1
    problems = []
    for path, state in states:
        try:
            ledger.audit_partition(state)
        except AuditError as exc:
            problems.append(f"{path}: {exc}")
    seen = {}
    for path, state in states:
        for op in state.entries:
            if op in seen:
                problems.append(f"{path}: outpoint {op.hex()} also in {seen[op]}")
            seen[op] = path
    if len(set(metas)) == 1 and states:
        depth, height, issued = metas[0]
        have = sorted(s.subchain for _, s in states)
        if have == list(range(1 << depth)):
            total = sum(state.total_value() for _, state in states)
            if total != issued:
                problems.append(
                    f"conservation: chainstates hold {total}, issued {issued}"
                )
            else:
                print(f"conservation ok: {total} across {len(states)} chainstates")
        else:
            print("partial export set; conservation not checked")
    elif states:
        print("export headers disagree; conservation not checked")
    if problems:
        for p in problems:
            print(f"audit: {p}", file=sys.stderr)
        return 2
    print(f"audit ok: {len(states)} exports")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("SPLITSCALE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))

    parser = argparse.ArgumentParser(
        prog="splitscale",
        description="Simulate a UTXO ledger partitioned into eigenchain-bound sub-chains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one or more scenario files")
    p_run.add_argument("scenarios", nargs="+")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", default=None, help="override the scenario seed")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel scenario runs")
    p_run.set_defaults(fn=cmd_run)

    p_check = sub.add_parser("check", help="parse and validate a scenario file")
    p_check.add_argument("scenario")
    p_check.set_defaults(fn=cmd_check)

    p_audit = sub.add_parser("audit", help="audit chainstate export files")
    p_audit.add_argument("exports", nargs="+")
    p_audit.set_defaults(fn=cmd_audit)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
