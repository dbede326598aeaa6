"""boxer-bench: desk-scale latency, failover and planner-kernel measurements."""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

from .latency import CSV_HEADER, BenchError, LatencyRig, group_cdfs, rtt_bench, ttfb_bench, write_csv


def _summary(samples) -> None:
    for (kind, metric), rows in group_cdfs(samples).items():
        vals = [s.value_us for s in samples if s.kind == kind and s.metric == metric]
        print(f"{metric:4} {kind:7} n={len(vals):5d} median={statistics.median(vals):9.1f}us "
              f"p90={rows[next(i for i, r in enumerate(rows) if r[1] >= 0.9)][0]:9.1f}us", file=sys.stderr)


def _latency(args) -> int:
    if args.reps <= 0:
        print("no repetitions requested; nothing written", file=sys.stderr)
        return 0
    with LatencyRig(pairs=args.pairs, transport=args.transport) as rig:
        if args.cmd == "ttfb":
            samples = ttfb_bench(rig, reps=args.reps)
        else:
            samples = []
            for i in range(args.pairs):
                samples += rtt_bench(rig, rounds=args.reps, payload=args.payload, pair=i)
    _summary(samples)
    if args.cdf:
        with open(args.cdf, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("scenario", "metric", "value_us", "fraction"))
            for (kind, metric), rows in group_cdfs(samples).items():
                w.writerows((kind, metric, f"{v:.3f}", f"{f:.6f}") for v, f in rows)
    if args.out:
        write_csv(args.out, samples)
    return 0


def _failover(args) -> int:
    from .failover import DrillAborted, failover_drill
    rows = []
    for run in range(max(1, args.reps)):
        try:
            res = failover_drill(k=args.k, kill_at=args.kill_at, duration=args.duration)
        except DrillAborted as exc:
            print(f"failover: drill aborted: {exc}", file=sys.stderr)
            return 1
        if args.timeline:
            res.write_timeline(args.timeline if args.reps <= 1 else f"{args.timeline}.{run}")
        if not res.killed:
            print(f"run {run}: no kill (kill_at >= duration)", file=sys.stderr)
            continue
        rec = res.recovery_s
        print(f"run {run}: join {1e3 * (res.join_ts - res.kill_ts):.0f} ms after kill, recovery "
              + (f"{1e3 * rec:.0f} ms" if rec is not None else "not reached"), file=sys.stderr)
        if rec is not None:
            rows.append((f"failover/k{args.k}", "RECOVERY", str(run), f"{1e6 * rec:.3f}"))
    if args.out and rows:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            w.writerows(rows)
    return 0


def _kernel(args) -> int:
    import numpy as np

    from ..planner import model
    from ..planner._fallback import cost_curve as numpy_curve
    from ..planner.trace import synthetic_trace

    loads = synthetic_trace(seconds=args.samples).loads
    betas = np.linspace(0.0, loads.max(), args.steps)
    impls = [("numpy", numpy_curve)]
    if model._compiled_curve is not None:
        impls.insert(0, ("compiled", model._compiled_curve))
    else:
        print("compiled kernel not built; timing the fallback only", file=sys.stderr)
    results = {}
    rows = []
    for name, fn in impls:
        fn(loads, betas, 1.0, 1.0, 0.35, 1.0, 1.0)
        times = []
        for run in range(max(1, args.reps)):
            t0 = time.perf_counter()
            results[name] = fn(loads, betas, 1.0, 1.0, 0.35, 1.0, 1.0)
            times.append((time.perf_counter() - t0) * 1e6)
            rows.append((f"kernel/{name}", "CURVE", str(run), f"{times[-1]:.3f}"))
        print(f"{name:8} median {statistics.median(times) / 1e3:8.2f} ms  ({len(loads)} samples x {len(betas)} betas)",
              file=sys.stderr)
    if len(results) == 2:
        gap = float(np.max(np.abs(results["compiled"] - results["numpy"]) / np.maximum(1.0, np.abs(results["numpy"]))))
        print(f"max relative difference {gap:.2e}", file=sys.stderr)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            w.writerows(rows)
    return 0


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boxer-bench", description=__doc__)
    ap.add_argument("cmd", choices=["ttfb", "rtt", "failover", "kernel"])
    ap.add_argument("--pairs", type=int, default=4, help="endpoint pairs (ttfb/rtt)")
    ap.add_argument("--reps", type=int, default=None,
                    help="trials per pair (ttfb, default 128), rounds (rtt, 128), drills (failover, 1), runs (kernel, 5)")
    ap.add_argument("--out", help="samples CSV: scenario,metric,run_id,value_us")
    ap.add_argument("--cdf", help="ttfb/rtt: also write per-scenario CDF rows")
    ap.add_argument("--payload", type=int, default=1024, help="rtt payload bytes")
    ap.add_argument("--transport", default="direct")
    ap.add_argument("--k", type=int, default=3, help="failover: quorum replicas")
    ap.add_argument("--kill-at", type=float, default=3.0, help="failover: seconds into the run")
    ap.add_argument("--duration", type=float, default=8.0, help="failover: run length in seconds")
    ap.add_argument("--timeline", help="failover: per-100ms throughput CSV")
    ap.add_argument("--samples", type=int, default=86400, help="kernel: trace length")
    ap.add_argument("--steps", type=int, default=200, help="kernel: beta grid size")
    return ap


DEFAULT_REPS = {"ttfb": 128, "rtt": 128, "failover": 1, "kernel": 5}


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.reps is None:
        args.reps = DEFAULT_REPS[args.cmd]
    try:
        if args.cmd in ("ttfb", "rtt"):
            return _latency(args)
        if args.cmd == "failover":
            return _failover(args)
        return _kernel(args)
    except BenchError as exc:
        print(f"boxer-bench: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
