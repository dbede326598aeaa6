"""Cost model for VM capacity plus function overflow on a request trace."""

from .model import (KERNEL, NO_SAVING, DEFAULT_PARAMS, CostParams, EmptyTraceError, PlanResult, SavingsCell,
                    capacity_percentile, deployment_cost, savings_table, sweep)
from .trace import TraceError, TraceSeries, load_trace, synthetic_trace, write_trace

__all__ = ["KERNEL", "NO_SAVING", "DEFAULT_PARAMS", "CostParams", "EmptyTraceError", "PlanResult", "SavingsCell",
           "capacity_percentile", "deployment_cost", "savings_table", "sweep", "TraceError", "TraceSeries",
           "load_trace", "synthetic_trace", "write_trace"]
