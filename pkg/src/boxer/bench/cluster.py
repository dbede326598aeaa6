"""A set of supervisor processes on one machine, for benchmarks and tests."""

from __future__ import annotations

import json
import os
import select
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from ..monitor import build_shim
from ..supervisor import guest_environment
from ..types import DEFAULT_OVERLAY_CIDR


class ClusterError(RuntimeError):
    pass


@dataclass
class NodeHandle:
    index: int
    dir: str
    proc: subprocess.Popen
    info: dict
    name: Optional[str]
    guests: List[subprocess.Popen] = field(default_factory=list)

    @property
    def node_id(self) -> int:
        return self.info["node_id"]

    @property
    def overlay_ip(self) -> str:
        return self.info["overlay_ip"]

    @property
    def control(self) -> str:
        return self.info["control"]

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None


def _read_ready(proc: subprocess.Popen, timeout: float) -> dict:
    deadline = time.monotonic() + timeout
    buf = b""
    fd = proc.stdout.fileno()
    while time.monotonic() < deadline:
        r, _, _ = select.select([fd], [], [], max(0.0, deadline - time.monotonic()))
        if not r:
            break
        chunk = os.read(fd, 4096)
        if not chunk:
            break
        buf += chunk
        if b"\n" in buf:
            line = buf.split(b"\n", 1)[0]
            return json.loads(line)
    raise ClusterError(f"supervisor pid {proc.pid} not ready within {timeout:g}s (exit={proc.poll()})")


def debug_stats(boxer_dir: str, timeout: float = 2.0) -> dict:
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        s.connect(os.path.join(boxer_dir, "debug.sock"))
        data = b""
        while True:
            chunk = s.recv(65536)
            if not chunk:
                break
            data += chunk
    return json.loads(data)


class LocalCluster:
    """Seed plus joiners, each a ``boxer-ns`` process in its own process group."""

    def __init__(self, base_dir: str, cidr: str = DEFAULT_OVERLAY_CIDR, transport: str = "direct",
                 extra_args: Sequence[str] = ()):
        self.base = os.path.abspath(base_dir)
        self.cidr = cidr
        self.transport = transport
        self.extra_args = list(extra_args)
        self.nodes: List[NodeHandle] = []
        self.seed_addr: Optional[str] = None
        self.shim = build_shim()
        os.makedirs(self.base, exist_ok=True)

    def _launch(self, name: Optional[str], seed: bool, timeout: float, transport: Optional[str]) -> NodeHandle:
        index = len(self.nodes)
        d = os.path.join(self.base, f"node{index}")
        os.makedirs(d, exist_ok=True)
        cmd = [sys.executable, "-m", "boxer.cli", "--dir", d, "--cidr", self.cidr,
               "--transport", transport or self.transport]
        if seed:
            cmd += ["--be-seed", "--listen", "127.0.0.1:0"]
        else:
            cmd += ["--seed", self.seed_addr]
        if name:
            cmd += ["--name", name]
        cmd += self.extra_args
        err = open(os.path.join(self.base, f"node{index}.stderr"), "ab")
        env = {k: v for k, v in os.environ.items() if not k.startswith("BOXER_")}
        env.pop("LD_PRELOAD", None)
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=err, env=env, start_new_session=True)
        err.close()
        try:
            info = _read_ready(proc, timeout)
        except ClusterError:
            self._kill(proc)
            raise
        node = NodeHandle(index, d, proc, info, name)
        self.nodes.append(node)
        return node

    def start(self, n: int, names: Optional[Sequence[Optional[str]]] = None, timeout: float = 15.0) -> "LocalCluster":
        names = list(names or [None] * n)
        seed = self._launch(names[0], True, timeout, None)
        self.seed_addr = seed.control
        for i in range(1, n):
            self._launch(names[i], False, timeout, None)
        return self

    def add_node(self, name: Optional[str] = None, timeout: float = 15.0,
                 transport: Optional[str] = None) -> NodeHandle:
        if self.seed_addr is None:
            raise ClusterError("start the cluster first")
        return self._launch(name, False, timeout, transport)

    def guest_env(self, node: NodeHandle, base: Optional[Dict[str, str]] = None) -> Dict[str, str]:
        return guest_environment(dict(os.environ if base is None else base), self.shim, node.dir, self.cidr,
                                 node.node_id, node.info["name"])

    def spawn_guest(self, node: NodeHandle, argv: Sequence[str], **popen) -> subprocess.Popen:
        """Start a monitored guest attached to ``node``; it dies with the node on kill()."""
        env = self.guest_env(node, popen.pop("env", None))
        proc = subprocess.Popen(list(argv), env=env, **popen)
        node.guests.append(proc)
        return proc

    def stats(self, node: NodeHandle) -> dict:
        return debug_stats(node.dir)

    def wait_members(self, count: int, timeout: float = 5.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            live = [n for n in self.nodes if n.alive]
            if all(self.stats(n)["coord"]["members"] == count for n in live):
                return
            time.sleep(0.02)
        raise ClusterError(f"membership did not converge to {count} within {timeout:g}s")

    @staticmethod
    def _kill(proc: subprocess.Popen, sig: int = signal.SIGKILL) -> None:
        try:
            os.killpg(proc.pid, sig)
        except ProcessLookupError:
            pass
        try:
            proc.wait(5)
        except subprocess.TimeoutExpired:
            pass

    def kill(self, node: NodeHandle) -> None:
        """Abrupt node failure: supervisor and its guests die together."""
        for g in node.guests:
            g.kill()
        self._kill(node.proc)
        for g in node.guests:
            g.wait()

    def stop(self) -> None:
        for node in self.nodes:
            if node.alive:
                try:
                    node.proc.send_signal(signal.SIGTERM)
                except ProcessLookupError:
                    pass
        for node in self.nodes:
            try:
                node.proc.wait(3)
            except subprocess.TimeoutExpired:
                pass
            self._kill(node.proc)
            for g in node.guests:
                if g.poll() is None:
                    g.kill()
                    g.wait()
            if node.proc.stdout is not None:
                node.proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()
