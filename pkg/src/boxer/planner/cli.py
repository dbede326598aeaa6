"""boxer-plan: savings table and cost curve for a request trace."""

from __future__ import annotations

import argparse
import csv
import sys
from typing import List

from .model import KERNEL, DEFAULT_PARAMS, CostParams, savings_table, sweep
from .trace import TraceError, load_trace, synthetic_trace


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _label(p: float) -> str:
    return f"c{p:g}"


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boxer-plan", description=__doc__)
    ap.add_argument("--trace", help="CSV of timestamp,requests (default: bundled synthetic day)")
    ap.add_argument("--alpha", type=float, default=DEFAULT_PARAMS.alpha, help="VM requests/interval/core")
    ap.add_argument("--gamma", type=float, default=DEFAULT_PARAMS.gamma, help="function requests/interval/core")
    ap.add_argument("--price-vm", type=float, default=DEFAULT_PARAMS.price_vm)
    ap.add_argument("--price-fn", type=float, default=DEFAULT_PARAMS.price_fn)
    ap.add_argument("--mult", type=_floats, default=[1.0, 2.0, 4.0, 8.0])
    ap.add_argument("--percentiles", type=_floats, default=[100.0, 99.0, 95.0, 90.0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--ceil-cores", action="store_true")
    ap.add_argument("--out", help="write the savings table as CSV")
    ap.add_argument("--curve-out", help="write the cost curve (first multiplier) as CSV")
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        trace = load_trace(args.trace) if args.trace else synthetic_trace()
        params = CostParams(args.alpha, args.gamma, args.price_vm, args.price_fn, ceil_cores=args.ceil_cores)
        plan = sweep(trace, params.with_multiplier(args.mult[0]), args.steps)
        table = savings_table(trace, params, args.percentiles, args.mult, args.steps)
    except (TraceError, ValueError, OSError) as exc:
        print(f"boxer-plan: {exc}", file=sys.stderr)
        return 2

    header = ["config"] + [_label(p) for p in args.percentiles]
    rows = [[f"EC2 + {m:g}xLambda"] + [c.formatted() for c in row] for m, row in zip(args.mult, table)]
    w = csv.writer(sys.stdout)
    w.writerow(header)
    w.writerows(rows)
    print(f"# kernel={KERNEL} samples={len(trace)} best_beta={plan.best_beta:.2f} "
          f"({100 * plan.beta_as_fraction_of_peak:.2f}% of peak, "
          f"{100 * plan.vm_request_fraction:.2f}% of requests on VMs)", file=sys.stderr)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows([header] + rows)
    if args.curve_out:
        with open(args.curve_out, "w", newline="") as fh:
            cw = csv.writer(fh)
            cw.writerow(["beta", "cost"])
            for b, c in zip(plan.betas.tolist(), plan.costs.tolist()):
                cw.writerow([f"{b:.6g}", f"{c:.10g}"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
