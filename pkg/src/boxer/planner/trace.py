"""Request-rate traces: CSV ingestion and a bursty synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, TextIO, Union

import numpy as np


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSeries:
    """Requests per interval; ``indices[i]`` is the interval of ``loads[i]``."""

    indices: np.ndarray
    loads: np.ndarray
    interval_s: float = 1.0

    def __post_init__(self):
        if len(self.indices) != len(self.loads):
            raise TraceError("indices and loads differ in length")
        if len(self.loads) and np.any(self.loads < 0):
            raise TraceError("negative request count")
        if len(self.indices) > 1 and np.any(np.diff(self.indices) <= 0):
            raise TraceError("interval indices must strictly increase")

    @classmethod
    def from_loads(cls, loads: Iterable[float], interval_s: float = 1.0) -> "TraceSeries":
        arr = np.asarray(list(loads) if not isinstance(loads, np.ndarray) else loads, dtype=np.float64)
        return cls(np.arange(len(arr), dtype=np.int64), arr, interval_s)

    def __len__(self):
        return len(self.loads)

    @property
    def peak(self) -> float:
        return float(self.loads.max()) if len(self.loads) else 0.0


def load_trace(source: Union[str, TextIO], interval_s: Optional[float] = None) -> TraceSeries:
    """Parse ``timestamp,requests`` lines; gaps are zero filled.

    The interval length is the smallest timestamp step unless given.
    A non-numeric first line is taken as a header.
    """
    fh = open(source, newline="") if isinstance(source, str) else source
    try:
        rows = []
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise TraceError(f"line {lineno}: expected 'timestamp,requests'")
            try:
                ts, req = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise TraceError(f"line {lineno}: non-numeric field in {row!r}") from None
            if req < 0:
                raise TraceError(f"line {lineno}: negative request count {req:g}")
            if rows and ts <= rows[-1][0]:
                raise TraceError(f"line {lineno}: timestamp {ts:g} is not after {rows[-1][0]:g}")
            rows.append((ts, req, lineno))
    finally:
        if isinstance(source, str):
            fh.close()
    if not rows:
        return TraceSeries(np.zeros(0, np.int64), np.zeros(0), interval_s or 1.0)
    ts = np.array([r[0] for r in rows])
    if interval_s is None:
        steps = np.diff(ts)
        interval_s = float(steps.min()) if len(steps) else 1.0
    rel = (ts - ts[0]) / interval_s
    idx = np.rint(rel).astype(np.int64)
    if np.any(np.abs(rel - idx) > 1e-6):
        raise TraceError(f"timestamps are not on a {interval_s:g}s grid")
    loads = np.zeros(int(idx[-1]) + 1)
    loads[idx] = [r[1] for r in rows]
    return TraceSeries(np.arange(len(loads), dtype=np.int64), loads, interval_s)


def write_trace(trace: TraceSeries, out: TextIO) -> None:
    out.write("timestamp,requests\n")
    for i, v in zip(trace.indices, trace.loads):
        out.write(f"{int(i) * trace.interval_s:g},{v:g}\n")


def synthetic_trace(seconds: int = 86400, base: float = 1000.0, diurnal: float = 0.3,
                    burst_rate: float = 0.02, burst_alpha: float = 1.5, burst_scale: float = 4.0,
                    burst_len: float = 5.0, burst_cap: float = 40.0, noise: float = 0.05,
                    seed: int = 7) -> TraceSeries:
    """Per-second load shaped like a busy web front end.

    A diurnal sinusoid around ``base`` with multiplicative noise, plus
    bursts arriving as a Poisson process (``burst_rate`` per second) whose
    heights are Pareto(``burst_alpha``) multiples of ``base * burst_scale``
    decaying exponentially over ``burst_len`` seconds. Heights are capped at
    ``burst_cap * base``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(seconds, dtype=np.float64)
    level = base * (1.0 + diurnal * np.sin(2 * math.pi * (t / 86400.0 - 0.25)))
    level *= np.exp(rng.normal(0.0, noise, seconds))
    starts = np.flatnonzero(rng.random(seconds) < burst_rate)
    heights = base * np.minimum(burst_scale * (rng.pareto(burst_alpha, len(starts)) + 1.0), burst_cap)
    bursts = np.zeros(seconds)
    span = int(burst_len * 6)
    decay = np.exp(-np.arange(span) / burst_len)
    for s, h in zip(starts, heights):
        end = min(seconds, s + span)
        bursts[s:end] += h * decay[: end - s]
    loads = np.rint(level + bursts)
    return TraceSeries.from_loads(loads)
