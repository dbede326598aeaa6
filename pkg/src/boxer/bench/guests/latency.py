"""Latency guest. Knows nothing about boxer; runs the same with or without the shim.

server HOST PORT
    per connection: b"T" -> one byte back and close; b"R" + u32 size -> echo
    frames of that size until EOF.
client
    reads commands on stdin, one per line, answers one JSON line each:
    ``ttfb HOST PORT N``, ``rtt HOST PORT N SIZE``, and for interleaving
    with another client ``open HOST PORT SIZE`` / ``rounds N`` / ``close``
    on one held connection.
"""

import json
import socket
import struct
import sys
import threading
import time


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def _handle(conn):
    with conn:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            op = _recv_exact(conn, 1)
            if op == b"T":
                conn.sendall(b"t")
            elif op == b"R":
                (size,) = struct.unpack("!I", _recv_exact(conn, 4))
                while True:
                    conn.sendall(_recv_exact(conn, size))
        except (ConnectionError, OSError):
            pass


def serve(host, port):
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(128)
    print(json.dumps({"listening": srv.getsockname()[1]}), flush=True)
    while True:
        conn, _ = srv.accept()
        threading.Thread(target=_handle, args=(conn,), daemon=True).start()


def ttfb(host, port, n):
    """Microseconds from connect() to the first response byte."""
    out = []
    for _ in range(n):
        t0 = time.perf_counter_ns()
        s = socket.create_connection((host, port))
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(b"T")
        _recv_exact(s, 1)
        out.append((time.perf_counter_ns() - t0) / 1000.0)
        s.close()
    return out


def _echo_conn(host, port, size):
    s = socket.create_connection((host, port))
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    s.sendall(b"R" + struct.pack("!I", size))
    return s


def _rounds(s, n, size):
    payload = bytes(size)
    out = []
    for _ in range(n):
        t0 = time.perf_counter_ns()
        s.sendall(payload)
        _recv_exact(s, size)
        out.append((time.perf_counter_ns() - t0) / 1000.0)
    return out


def rtt(host, port, n, size):
    s = _echo_conn(host, port, size)
    try:
        return _rounds(s, n, size)
    finally:
        s.close()


def client():
    held = None
    for line in sys.stdin:
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "ttfb":
                res = {"ok": ttfb(parts[1], int(parts[2]), int(parts[3]))}
            elif parts[0] == "rtt":
                res = {"ok": rtt(parts[1], int(parts[2]), int(parts[3]), int(parts[4]))}
            elif parts[0] == "open":
                if held is not None:
                    held[0].close()
                held = None
                size = int(parts[3])
                held = (_echo_conn(parts[1], int(parts[2]), size), size)
                res = {"ok": []}
            elif parts[0] == "rounds":
                if held is None:
                    res = {"error": "no open connection"}
                else:
                    res = {"ok": _rounds(held[0], int(parts[1]), held[1])}
            elif parts[0] == "close":
                if held is not None:
                    held[0].close()
                held = None
                res = {"ok": []}
            elif parts[0] == "quit":
                return
            else:
                res = {"error": f"unknown command {parts[0]}"}
        except OSError as exc:
            res = {"error": f"{type(exc).__name__}: {exc}"}
        print(json.dumps(res), flush=True)


if __name__ == "__main__":
    if sys.argv[1] == "server":
        serve(sys.argv[2], int(sys.argv[3]))
    else:
        client()
