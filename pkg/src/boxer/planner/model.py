"""Cost of serving a trace with fixed VM capacity plus function overflow.

For a capacity of ``beta`` requests per interval the cost over the trace is::

    sum_t  beta / alpha * price_vm  +  max(0, mult * (load_t - beta) / gamma * price_fn)

VM cores are paid every interval; function cores only for the overflow.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence, Union

import numpy as np

from .trace import TraceSeries

try:
    from ._kernel import cost_curve as _compiled_curve
except ImportError:  # extension not built
    _compiled_curve = None
if os.environ.get("BOXER_KERNEL") == "numpy":
    _compiled_curve = None
from ._fallback import cost_curve as _numpy_curve

cost_curve = _compiled_curve or _numpy_curve
KERNEL = "compiled" if _compiled_curve is not None else "numpy"

NO_SAVING = "no-saving"


class EmptyTraceError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    alpha: float  # requests per interval per VM core
    gamma: float  # requests per interval per function core
    price_vm: float  # per core per interval
    price_fn: float  # per core per interval
    lambda_multiplier: float = 1.0
    ceil_cores: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValueError("throughputs must be positive")
        if self.price_vm < 0 or self.price_fn < 0:
            raise ValueError("prices must be non-negative")
        if self.lambda_multiplier < 1:
            raise ValueError("lambda_multiplier must be >= 1")

    def with_multiplier(self, mult: float) -> "CostParams":
        return CostParams(self.alpha, self.gamma, self.price_vm, self.price_fn, mult, self.ceil_cores)


# Raising beta pays off while more than price_vm/price_fn of the intervals
# overflow it, so the unit-multiplier optimum leaves about 35% overflowing
# (less on a coarse grid). Throughputs are normalized.
DEFAULT_PARAMS = CostParams(alpha=1.0, gamma=1.0, price_vm=0.35, price_fn=1.0)


@dataclass
class PlanResult:
    betas: np.ndarray
    costs: np.ndarray
    best_beta: float
    best_cost: float
    beta_as_fraction_of_peak: float
    vm_request_fraction: float  # share of all requests served by VM capacity at best_beta

    @property
    def curve(self) -> Dict[float, float]:
        return dict(zip(self.betas.tolist(), self.costs.tolist()))


def _loads(trace: Union[TraceSeries, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(trace, TraceSeries):
        return trace.loads
    return np.asarray(trace, dtype=np.float64)


def deployment_cost(trace, beta: float, params: CostParams) -> float:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    loads = _loads(trace)
    out = cost_curve(loads, np.array([float(beta)]), params.alpha, params.gamma, params.price_vm,
                     params.price_fn, params.lambda_multiplier, params.ceil_cores)
    return float(out[0])


def sweep(trace, params: CostParams, grid_steps: int = 200) -> PlanResult:
    if grid_steps < 2:
        raise ValueError("grid_steps must be >= 2")
    loads = _loads(trace)
    if len(loads) == 0:
        raise EmptyTraceError("empty trace")
    peak = float(loads.max())
    betas = np.linspace(0.0, peak, grid_steps)
    costs = cost_curve(loads, betas, params.alpha, params.gamma, params.price_vm, params.price_fn,
                       params.lambda_multiplier, params.ceil_cores)
    i = int(np.argmin(costs))  # first minimum: ties go to the smaller beta
    best = float(betas[i])
    total = float(loads.sum())
    served = float(np.minimum(loads, best).sum())
    return PlanResult(betas, costs, best, float(costs[i]), best / peak if peak > 0 else 0.0,
                      served / total if total > 0 else 0.0)


def capacity_percentile(trace, p: float) -> float:
    """Smallest capacity that covers at least ``p`` percent of intervals."""
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    loads = _loads(trace)
    if len(loads) == 0:
        raise EmptyTraceError("empty trace")
    # exact arithmetic so p=90 on 100 samples gives the 90th, not the 91st
    k = math.ceil(Fraction(str(p)) * len(loads) / 100)
    k = min(max(k, 1), len(loads))
    return float(np.partition(loads, k - 1)[k - 1])


@dataclass
class SavingsCell:
    percentile: float
    multiplier: float
    baseline: float
    hybrid: float

    @property
    def saving(self) -> Union[float, str]:
        if self.hybrid >= self.baseline:
            return NO_SAVING
        return 1.0 - self.hybrid / self.baseline

    def formatted(self) -> str:
        s = self.saving
        return s if isinstance(s, str) else f"{100 * s:.2f}%"


def savings_table(trace, params: CostParams, percentiles: Sequence[float],
                  multipliers: Sequence[float], grid_steps: int = 200) -> List[List[SavingsCell]]:
    """Rows by multiplier, columns by percentile.

    The baseline provisions VMs at the percentile capacity and serves nothing
    beyond it; the hybrid is the cheapest point of the VM + function sweep.
    """
    if not percentiles or not multipliers:
        raise ValueError("need at least one percentile and one multiplier")
    loads = _loads(trace)
    if len(loads) == 0:
        raise EmptyTraceError("empty trace")
    n = len(loads)
    table = []
    for mult in multipliers:
        hybrid = sweep(loads, params.with_multiplier(mult), grid_steps).best_cost
        row = []
        for p in percentiles:
            cap = capacity_percentile(loads, p)
            cores = math.ceil(cap / params.alpha) if params.ceil_cores else cap / params.alpha
            baseline = n * cores * params.price_vm
            row.append(SavingsCell(p, mult, baseline, hybrid))
        table.append(row)
    return table
