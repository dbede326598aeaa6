"""Node-failover drill against the bundled toy quorum service.

Layout: node ``client`` (the seed) runs the load generator; nodes
``replica-0 .. replica-{k-1}`` each run one replica. At ``kill_at`` one
replica node dies with its supervisor, and a fresh supervisor joins under
the same name and starts a replacement replica.
"""

from __future__ import annotations

import csv
import json
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import List, Optional

from .cluster import ClusterError, LocalCluster, NodeHandle

QUORUM = [sys.executable, "-m", "boxer.bench.guests.quorum"]
PORT = 7000
RECOVERY_FRACTION = 0.9
STEADY_TIMEOUT_S = 30.0
WARM_S = 0.5


class DrillAborted(RuntimeError):
    pass


@dataclass
class DrillResult:
    k: int
    bin_s: float
    bins: List[int]
    t0: float
    kill_ts: Optional[float] = None
    join_ts: Optional[float] = None
    recovery_ts: Optional[float] = None
    pre_kill_mean: Optional[float] = None
    ops: List[int] = field(default_factory=list)
    errors: List[int] = field(default_factory=list)

    @property
    def killed(self) -> bool:
        return self.kill_ts is not None

    @property
    def recovery_s(self) -> Optional[float]:
        if self.kill_ts is None or self.recovery_ts is None:
            return None
        return self.recovery_ts - self.kill_ts

    def rates(self) -> List[float]:
        return [c / self.bin_s for c in self.bins]

    def write_timeline(self, path: str) -> None:
        """One row per bin; events are attached to the bin they fall in."""
        marks = {}
        for name, ts in (("kill", self.kill_ts), ("join_complete", self.join_ts), ("recovered", self.recovery_ts)):
            if ts is not None:
                # a recovery stamp is a bin end, so it belongs to the bin before
                idx = int((ts - self.t0) / self.bin_s - (1e-9 if name == "recovered" else 0))
                marks.setdefault(idx, []).append(name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t_s", "ops_per_s", "events"))
            for i, rate in enumerate(self.rates()):
                w.writerow((f"{i * self.bin_s:.1f}", f"{rate:.1f}", ";".join(marks.get(i, []))))


def recovery_point(bins: List[int], t0: float, bin_s: float, kill_ts: float,
                   fraction: float = RECOVERY_FRACTION, warm_s: float = WARM_S):
    """(pre-kill mean, end of the first post-kill bin at >= fraction of it).

    Only whole bins count: pre-kill bins end at or before the kill, and
    post-kill bins start at or after it.
    """
    first = int(round(warm_s / bin_s))
    pre = [c for i, c in enumerate(bins) if i >= first and t0 + (i + 1) * bin_s <= kill_ts]
    if not pre:
        raise DrillAborted("no pre-kill samples; raise kill_at")
    mean = sum(pre) / len(pre)
    for i, c in enumerate(bins):
        start = t0 + i * bin_s
        if start >= kill_ts and c >= fraction * mean:
            return mean, start + bin_s
    return mean, None


class _Drill:
    def __init__(self, k: int, base_dir: str, rate: float, write_fraction: float):
        self.k = k
        self.rate = rate
        self.write_fraction = write_fraction
        self.cluster = LocalCluster(base_dir)

    def _replica(self, node: NodeHandle, timeout: float) -> None:
        p = self.cluster.spawn_guest(node, QUORUM + ["replica", str(PORT)], stdout=subprocess.PIPE,
                                     stderr=subprocess.DEVNULL)
        line = _readline(p, timeout)
        p.stdout.close()
        if not line:
            raise DrillAborted(f"replica on {node.info['name']} did not start")

    def _client(self, seconds: float) -> subprocess.Popen:
        return self.cluster.spawn_guest(
            self.cluster.nodes[0],
            QUORUM + ["client", str(self.k), str(PORT), str(self.rate), str(seconds), str(self.write_fraction)],
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)

    def setup(self, steady_timeout: float) -> None:
        deadline = time.monotonic() + steady_timeout
        names = ["client"] + [f"replica-{i}" for i in range(self.k)]
        try:
            self.cluster.start(len(names), names)
            self.cluster.wait_members(len(names), max(0.1, deadline - time.monotonic()))
            for node in self.cluster.nodes[1:]:
                self._replica(node, max(0.1, deadline - time.monotonic()))
        except ClusterError as exc:
            raise DrillAborted(f"cluster setup: {exc}") from exc
        # steady state: a short probe run in which every session succeeds without errors
        while time.monotonic() < deadline:
            probe = self._client(0.3)
            out, _ = probe.communicate(timeout=max(1.0, deadline - time.monotonic()))
            report = json.loads(out.strip().splitlines()[-1])
            if all(report["ops"]) and not any(report["errors"]):
                return
        raise DrillAborted(f"no steady state within {steady_timeout:g}s")

    def replace(self, victim: NodeHandle, budget: float) -> NodeHandle:
        name = victim.info["name"]
        deadline = time.monotonic() + budget
        self.cluster.kill(victim)
        last = None
        while time.monotonic() < deadline:
            try:
                # rejected with a name conflict until the seed has processed the leave
                node = self.cluster.add_node(name, timeout=max(0.5, deadline - time.monotonic()))
            except ClusterError as exc:
                last = exc
                time.sleep(0.05)
                continue
            self._replica(node, max(0.5, deadline - time.monotonic()))
            return node
        raise DrillAborted(f"replacement for {name} did not join: {last}")


def _readline(proc: subprocess.Popen, timeout: float):
    import select
    r, _, _ = select.select([proc.stdout], [], [], timeout)
    return proc.stdout.readline() if r else b""


def failover_drill(k: int = 3, kill_at: float = 3.0, duration: float = 8.0, rate: float = 100.0,
                   write_fraction: float = 0.35, victim: Optional[int] = None,
                   base_dir: Optional[str] = None, steady_timeout: float = STEADY_TIMEOUT_S) -> DrillResult:
    """Run one drill; ``kill_at`` >= ``duration`` leaves the cluster alone."""
    if k < 1:
        raise ValueError("need at least one replica")
    tmp = tempfile.TemporaryDirectory(prefix="boxer-drill-") if base_dir is None else None
    drill = _Drill(k, base_dir or tmp.name, rate, write_fraction)
    try:
        drill.setup(steady_timeout)
        client = drill._client(duration)
        started = json.loads(client.stdout.readline())["started"]
        kill_ts = join_ts = None
        if kill_at < duration:
            time.sleep(max(0.0, started + kill_at - time.monotonic()))
            target = drill.cluster.nodes[1 + (k - 1 if victim is None else victim)]
            kill_ts = time.monotonic()
            node = drill.replace(target, max(1.0, started + duration - time.monotonic()))
            join_ts = node.info["join_completed_mono"]
        out, _ = client.communicate(timeout=duration + 30)
        report = json.loads(out.strip().splitlines()[-1])
    finally:
        drill.cluster.stop()
        if tmp is not None:
            tmp.cleanup()
    res = DrillResult(k, report["bin_s"], report["bins"], report["t0"], kill_ts, join_ts,
                      ops=report["ops"], errors=report["errors"])
    if kill_ts is not None:
        res.pre_kill_mean, res.recovery_ts = recovery_point(res.bins, res.t0, res.bin_s, kill_ts)
    return res
