"""Toy replicated counter for the failover drill. Knows nothing about boxer.

replica PORT
    Serve a counter on 0.0.0.0:PORT. Peers are the other ``replica-*``
    hosts listed in $BOXER_DIR/hosts; the file is re-read when it changes,
    so the replica set follows membership. A fresh replica copies the
    counter from any reachable peer before it starts serving.
    Line protocol: ``R`` -> ``V n``; ``W`` -> ``OK n`` once a majority
    holds the write, else ``ERR noquorum``; ``P n`` (from a peer) -> ``ACK``;
    ``S`` -> ``V n``.
client K PORT RATE SECONDS WRITE_FRACTION
    One session per replica ``replica-0 .. replica-K-1``, each paced at RATE
    ops/s with no catch-up bursts. Prints one JSON line: completions per
    100 ms bin on CLOCK_MONOTONIC plus per-session totals.
"""

import json
import os
import random
import re
import socket
import socketserver
import sys
import threading
import time

BIN_S = 0.1
PEER_TIMEOUT_S = 0.2
REPLICA_NAME = re.compile(r"^replica-\d+$")


def _line(sock_file):
    line = sock_file.readline()
    if not line:
        raise ConnectionError("closed")
    return line.decode().strip()


class Peer:
    def __init__(self, name, port):
        self.name, self.port = name, port
        self.lock = threading.Lock()
        self.sock = self.file = None

    def call(self, line):
        with self.lock:
            try:
                if self.sock is None:
                    self.sock = socket.create_connection((self.name, self.port), timeout=PEER_TIMEOUT_S)
                    self.file = self.sock.makefile("rb")
                self.sock.sendall(line.encode() + b"\n")
                return _line(self.file)
            except OSError:
                self.close()
                return None

    def close(self):
        if self.sock is not None:
            self.sock.close()
        self.sock = self.file = None


class Replica:
    def __init__(self, port):
        self.port = port
        self.me = socket.gethostname()
        self.value = 0
        self.lock = threading.Lock()
        self.peers = {}
        self._hosts_stamp = None
        self.refresh_peers()

    def refresh_peers(self):
        path = os.path.join(os.environ.get("BOXER_DIR", "."), "hosts")
        try:
            stamp = os.stat(path).st_mtime_ns
        except OSError:
            return
        if stamp == self._hosts_stamp:
            return
        self._hosts_stamp = stamp
        names = set()
        with open(path) as fh:
            for row in fh:
                parts = row.split()
                if len(parts) >= 2 and REPLICA_NAME.match(parts[1]) and parts[1] != self.me:
                    names.add(parts[1])
        for gone in set(self.peers) - names:
            self.peers.pop(gone).close()
        for new in names - set(self.peers):
            self.peers[new] = Peer(new, self.port)

    def sync(self):
        for peer in list(self.peers.values()):
            reply = peer.call("S")
            if reply and reply.startswith("V "):
                self.value = max(self.value, int(reply[2:]))
                return True
        return False

    def write(self):
        with self.lock:
            self.value += 1
            v = self.value
        self.refresh_peers()
        size = len(self.peers) + 1
        acks = 1
        for peer in list(self.peers.values()):
            if acks * 2 > size:
                break
            if peer.call(f"P {v}") == "ACK":
                acks += 1
        return v if acks * 2 > size else None

    def handle(self, line):
        if line == "R":
            return f"V {self.value}"
        if line == "W":
            v = self.write()
            return f"OK {v}" if v is not None else "ERR noquorum"
        if line.startswith("P "):
            with self.lock:
                self.value = max(self.value, int(line[2:]))
            return "ACK"
        if line == "S":
            return f"V {self.value}"
        return "ERR unknown"


def serve(port):
    replica = Replica(port)
    replica.sync()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                while True:
                    line = _line(self.rfile)
                    self.wfile.write(replica.handle(line).encode() + b"\n")
            except (ConnectionError, OSError, ValueError):
                pass

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server(("0.0.0.0", port), Handler) as srv:
        print(json.dumps({"ready": replica.me, "value": replica.value}), flush=True)
        srv.serve_forever()


def session(name, port, rate, stop_at, write_fraction, done, errors):
    interval = 1.0 / rate
    rng = random.Random(name)
    sock = f = None
    next_at = time.monotonic()
    while True:
        now = time.monotonic()
        if now >= stop_at:
            break
        if now < next_at:
            time.sleep(next_at - now)
        # no catch-up: a stalled session does not burst afterwards
        next_at = max(next_at + interval, time.monotonic())
        try:
            if sock is None:
                sock = socket.create_connection((name, port), timeout=0.5)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                f = sock.makefile("rb")
            op = "W" if rng.random() < write_fraction else "R"
            sock.sendall(op.encode() + b"\n")
            reply = _line(f)
            if reply.startswith("ERR"):
                errors.append(time.monotonic())
                continue
            done.append(time.monotonic())
        except OSError:
            errors.append(time.monotonic())
            if sock is not None:
                sock.close()
            sock = f = None
            time.sleep(0.02)
    if sock is not None:
        sock.close()


def client(k, port, rate, seconds, write_fraction):
    t0 = time.monotonic()
    stop_at = t0 + seconds
    done = [[] for _ in range(k)]
    errors = [[] for _ in range(k)]
    threads = [threading.Thread(target=session, args=(f"replica-{i}", port, rate, stop_at, write_fraction,
                                                      done[i], errors[i]), daemon=True) for i in range(k)]
    print(json.dumps({"started": t0}), flush=True)
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    nbins = int(round(seconds / BIN_S))
    bins = [0] * nbins
    for per in done:
        for ts in per:
            i = int((ts - t0) / BIN_S)
            if 0 <= i < nbins:
                bins[i] += 1
    print(json.dumps({"t0": t0, "bin_s": BIN_S, "bins": bins,
                      "ops": [len(d) for d in done], "errors": [len(e) for e in errors]}), flush=True)


if __name__ == "__main__":
    if sys.argv[1] == "replica":
        serve(int(sys.argv[2]))
    else:
        client(int(sys.argv[2]), int(sys.argv[3]), float(sys.argv[4]), float(sys.argv[5]), float(sys.argv[6]))
