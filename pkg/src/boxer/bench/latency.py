"""TTFB and RTT measurement against native loopback, with CDF and CSV output.

Every overlay sample is taken next to a native one in the same process
lifetime: TTFB trials alternate overlay/native one at a time (the order flips
each pair), so slow background work on a shared core lands on both series.
"""

from __future__ import annotations

import csv
import json
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .cluster import LocalCluster, NodeHandle

GUEST = [sys.executable, "-m", "boxer.bench.guests.latency"]
SERVER_PORT = 9000
WARMUP = 32
CSV_HEADER = ("scenario", "metric", "run_id", "value_us")


class BenchError(RuntimeError):
    def __init__(self, scenario: str, message: str):
        super().__init__(f"[{scenario}] {message}")
        self.scenario = scenario


@dataclass(frozen=True)
class LatencySample:
    scenario: str
    metric: str
    run_id: str
    value_us: float

    def __post_init__(self):
        if self.metric not in ("TTFB", "RTT"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if not self.value_us > 0:
            raise ValueError(f"non-positive latency {self.value_us}")

    @property
    def kind(self) -> str:
        """``overlay`` or ``native``."""
        return self.scenario.split("/", 1)[0]


def cdf_rows(values: Iterable[float]) -> List[Tuple[float, float]]:
    """Empirical CDF as (value, fraction <= value) steps; ties collapse to one step."""
    xs = sorted(values)
    n = len(xs)
    rows: List[Tuple[float, float]] = []
    for i, x in enumerate(xs):
        if rows and rows[-1][0] == x:
            rows[-1] = (x, (i + 1) / n)
        else:
            rows.append((x, (i + 1) / n))
    return rows


def group_cdfs(samples: Sequence[LatencySample]) -> Dict[Tuple[str, str], List[Tuple[float, float]]]:
    groups: Dict[Tuple[str, str], List[float]] = {}
    for s in samples:
        groups.setdefault((s.kind, s.metric), []).append(s.value_us)
    return {k: cdf_rows(v) for k, v in sorted(groups.items())}


def write_csv(path: str, samples: Sequence[LatencySample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for s in samples:
            w.writerow((s.scenario, s.metric, s.run_id, f"{s.value_us:.3f}"))


def read_csv(path: str) -> List[LatencySample]:
    with open(path, newline="") as fh:
        return [LatencySample(r["scenario"], r["metric"], r["run_id"], float(r["value_us"]))
                for r in csv.DictReader(fh)]


class _Client:
    """A persistent latency client guest driven over stdin/stdout."""

    def __init__(self, proc: subprocess.Popen):
        self.proc = proc

    def ask(self, scenario: str, cmd: str) -> List[float]:
        try:
            self.proc.stdin.write(cmd + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise BenchError(scenario, f"client guest gone: {exc}") from exc
        if not line:
            raise BenchError(scenario, f"client guest exited (status {self.proc.poll()})")
        reply = json.loads(line)
        if "error" in reply:
            raise BenchError(scenario, reply["error"])
        return reply["ok"]

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write("quit\n")
                self.proc.stdin.flush()
            except OSError:
                pass
            try:
                self.proc.wait(2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for f in (self.proc.stdin, self.proc.stdout):
            if f is not None:
                f.close()


@dataclass
class _Pair:
    label: str
    client: _Client
    target: str
    native_client: _Client
    native_target: str


class LatencyRig:
    """Supervisor nodes with a latency server on each, plus native twins.

    Pair ``i`` runs its client on node ``i+1`` and dials the server on node
    ``i`` by name, so consecutive pairs share no endpoint roles.
    """

    def __init__(self, pairs: int = 4, base_dir: Optional[str] = None, transport: str = "direct"):
        if pairs < 1:
            raise ValueError("need at least one endpoint pair")
        self._tmp = None
        if base_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="boxer-bench-")
            base_dir = self._tmp.name
        self.cluster = LocalCluster(base_dir, transport=transport)
        self.npairs = pairs
        self.pairs: List[_Pair] = []
        self._native: List[subprocess.Popen] = []
        self._clients: List[_Client] = []

    def _overlay_server(self, node: NodeHandle) -> None:
        p = self.cluster.spawn_guest(node, GUEST + ["server", "0.0.0.0", str(SERVER_PORT)],
                                     stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
        if not p.stdout.readline():
            raise BenchError(f"overlay/{node.info['name']}", "server guest failed to start")
        p.stdout.close()

    def _native_server(self) -> int:
        p = subprocess.Popen(GUEST + ["server", "127.0.0.1", "0"], stdout=subprocess.PIPE,
                             stderr=subprocess.DEVNULL)
        self._native.append(p)
        line = p.stdout.readline()
        p.stdout.close()
        if not line:
            raise BenchError("native", "server failed to start")
        return json.loads(line)["listening"]

    def _client(self, node: Optional[NodeHandle]) -> _Client:
        kw = dict(stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        if node is None:
            proc = subprocess.Popen(GUEST + ["client"], **kw)
            self._native.append(proc)
        else:
            proc = self.cluster.spawn_guest(node, GUEST + ["client"], **kw)
        c = _Client(proc)
        self._clients.append(c)
        return c

    def start(self) -> "LatencyRig":
        n = self.npairs + 1
        names = [f"n{i}" for i in range(n)]
        self.cluster.start(n, names)
        self.cluster.wait_members(n)
        for node in self.cluster.nodes[:-1]:
            self._overlay_server(node)
        for i in range(self.npairs):
            port = self._native_server()
            self.pairs.append(_Pair(f"p{i}", self._client(self.cluster.nodes[i + 1]), f"{names[i]} {SERVER_PORT}",
                                    self._client(None), f"127.0.0.1 {port}"))
        return self

    def close(self) -> None:
        for c in self._clients:
            c.close()
        for p in self._native:
            if p.poll() is None:
                p.kill()
                p.wait()
        self.cluster.stop()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def ttfb_bench(rig: LatencyRig, reps: int = 128, run_id: str = "0", warmup: int = WARMUP) -> List[LatencySample]:
    """``reps`` paired overlay/native connect-to-first-byte trials per endpoint pair."""
    if reps <= 0:
        return []
    out: List[LatencySample] = []
    for pair in rig.pairs:
        legs = [(f"overlay/{pair.label}", pair.client, pair.target),
                (f"native/{pair.label}", pair.native_client, pair.native_target)]
        for scenario, client, target in legs:
            client.ask(scenario, f"ttfb {target} {warmup}")
        got: Dict[str, List[float]] = {legs[0][0]: [], legs[1][0]: []}
        for i in range(reps):
            for scenario, client, target in (legs if i % 2 == 0 else legs[::-1]):
                got[scenario] += client.ask(scenario, f"ttfb {target} 1")
        for scenario, values in got.items():
            out += [LatencySample(scenario, "TTFB", run_id, v) for v in values]
    return out


def rtt_bench(rig: LatencyRig, rounds: int = 128, payload: int = 1024, run_id: str = "0",
              warmup: int = WARMUP, pair: int = 0) -> List[LatencySample]:
    """Ping-pong RTT on one held overlay connection and one held native one.

    Rounds alternate between the two connections one at a time, flipping
    the order each pair, as the TTFB trials do.
    """
    if rounds <= 0:
        return []
    if payload < 1:
        raise ValueError("payload must be at least one byte")
    p = rig.pairs[pair]
    legs = [(f"overlay/{p.label}", p.client, p.target), (f"native/{p.label}", p.native_client, p.native_target)]
    got: Dict[str, List[float]] = {legs[0][0]: [], legs[1][0]: []}
    try:
        # a drop mid-run raises and discards the whole series
        for scenario, client, target in legs:
            client.ask(scenario, f"open {target} {payload}")
            client.ask(scenario, f"rounds {warmup}")
        for i in range(rounds):
            for scenario, client, _ in (legs if i % 2 == 0 else legs[::-1]):
                got[scenario] += client.ask(scenario, "rounds 1")
    finally:
        for scenario, client, _ in legs:
            if client.proc.poll() is None:
                client.ask(scenario, "close")
    return [LatencySample(s, "RTT", run_id, v) for s, values in got.items() for v in values]
