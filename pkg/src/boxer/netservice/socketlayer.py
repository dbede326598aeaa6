"""Guest-visible stream socket semantics over the supervisor's tables.

``sockets`` (the application-socket-table) maps a socket inode to its
record; ``queues`` (the connect-queue-table) maps a listen address to the
single queue every listening record on that address shares. Connections
arriving from the transport layer are admitted into a queue and handed to
the oldest parked accept, or left queued with a signal connection injected
so that a polling guest wakes up.

The layer is synchronous and single threaded; the supervisor drives it from
its event loop. Parked accepts are represented by callbacks.
"""

from __future__ import annotations

import itertools
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from ..types import OverlayAddr, Status

EPHEMERAL_PORTS = (32768, 60999)
QUEUE_CAP = 128

CREATED, BOUND, LISTENING = "created", "bound", "listening"

# on_ready(status, conn, peer) -> bool; False means the waiter is gone and the
# connection must go elsewhere
ReadyCallback = Callable[[Status, object, Optional[OverlayAddr]], bool]

_ids = itertools.count(1)


@dataclass(eq=False)
class Waiter:
    on_ready: ReadyCallback
    pid: int
    seq: int
    record: "SocketRecord"
    done: bool = False


@dataclass(eq=False)
class ConnectionQueue:
    listen_addr: OverlayAddr
    ready: Deque[Tuple[object, OverlayAddr]] = field(default_factory=deque)
    listeners: List["SocketRecord"] = field(default_factory=list)
    qid: int = field(default_factory=lambda: next(_ids))


@dataclass(eq=False)
class SocketRecord:
    inode: int
    owners: Set[int] = field(default_factory=set)
    state: str = CREATED
    bound_addr: Optional[OverlayAddr] = None
    reuse: bool = False
    queue: Optional[ConnectionQueue] = None
    waiters: Deque[Waiter] = field(default_factory=deque)
    native_port: Optional[int] = None  # loopback port of the guest's real socket
    signal_outstanding: bool = False


def _pid_alive(pid: int) -> bool:
    try:
        with open(f"/proc/{pid}/stat") as fh:
            state = fh.read().rsplit(")", 1)[1].split()[0]
        return state not in ("Z", "X")
    except (OSError, IndexError):
        return False


def _close(conn) -> None:
    close = getattr(conn, "close", None)
    if close is not None:
        close()


class SocketLayer:
    def __init__(self, local_ip: str,
                 inject_signal: Optional[Callable[[SocketRecord], None]] = None,
                 ports: Tuple[int, int] = EPHEMERAL_PORTS, queue_cap: int = QUEUE_CAP,
                 pid_alive: Callable[[int], bool] = _pid_alive):
        self.local_ip = local_ip
        self.sockets: Dict[int, SocketRecord] = {}
        self.queues: Dict[OverlayAddr, ConnectionQueue] = {}
        self._inject = inject_signal
        self._ports = ports
        self._next_port = ports[0]
        self._queue_cap = queue_cap
        self._pid_alive = pid_alive
        self._waiter_seq = itertools.count()
        self.signals_injected = 0
        self.delivered = 0
        self.refused = 0

    # -- table maintenance ---------------------------------------------------

    def register(self, inode: int, pid: int) -> Status:
        rec = self.sockets.get(inode)
        if rec is None:
            rec = self.sockets[inode] = SocketRecord(inode)
        rec.owners.add(pid)
        return Status.OK

    def _lookup(self, inode: int, pid: Optional[int]) -> Optional[SocketRecord]:
        rec = self.sockets.get(inode)
        if rec is not None and pid is not None:
            # forked children reach the same inode without registering
            rec.owners.add(pid)
        return rec

    def forget(self, inode: int) -> None:
        """Drop a record whose socket was replaced by a connected stream."""
        rec = self.sockets.pop(inode, None)
        if rec is not None:
            self._unlink(rec)

    def close(self, inode: int, pid: int) -> Status:
        rec = self.sockets.get(inode)
        if rec is None:
            return Status.INVALID_SOCKET
        rec.owners.discard(pid)
        rec.owners = {p for p in rec.owners if self._pid_alive(p)}
        if not rec.owners:
            del self.sockets[inode]
            self._unlink(rec)
        return Status.OK

    def reap(self, pid: int) -> int:
        """Forget ``pid`` everywhere once it has exited; returns records dropped."""
        if self._pid_alive(pid):
            return 0
        dropped = 0
        for inode, rec in list(self.sockets.items()):
            if pid in rec.owners:
                rec.owners.discard(pid)
                if not rec.owners:
                    del self.sockets[inode]
                    self._unlink(rec)
                    dropped += 1
        return dropped

    def _unlink(self, rec: SocketRecord) -> None:
        while rec.waiters:
            w = rec.waiters.popleft()
            if not w.done:
                w.done = True
                w.on_ready(Status.CLOSED, None, None)
        q = rec.queue
        rec.queue = None
        if q is None:
            return
        q.listeners.remove(rec)
        if not q.listeners:
            del self.queues[q.listen_addr]
            while q.ready:
                _close(q.ready.popleft()[0])

    # -- socket calls --------------------------------------------------------

    def _port_taken(self, port: int) -> bool:
        return any(r.bound_addr is not None and r.bound_addr.port == port for r in self.sockets.values())

    def _alloc_port(self) -> Optional[int]:
        lo, hi = self._ports
        for _ in range(hi - lo + 1):
            port = self._next_port
            self._next_port = lo if port >= hi else port + 1
            if not self._port_taken(port):
                return port
        return None

    def bind(self, inode: int, addr: OverlayAddr, reuse: bool = False,
             pid: Optional[int] = None) -> Tuple[Status, Optional[OverlayAddr]]:
        rec = self._lookup(inode, pid)
        if rec is None:
            return Status.INVALID_SOCKET, None
        if rec.state != CREATED:
            return Status.INVALID_STATE, None
        if not addr.is_wildcard and addr.host != self.local_ip:
            return Status.INVALID_ADDRESS, None
        port = addr.port
        if port == 0:
            port = self._alloc_port()
            if port is None:
                return Status.EXHAUSTED, None
        bound = OverlayAddr(self.local_ip, port)
        for other in self.sockets.values():
            if other is rec or other.bound_addr != bound:
                continue
            if not (reuse and other.reuse):
                return Status.ADDR_IN_USE, None
        rec.state, rec.bound_addr, rec.reuse = BOUND, bound, reuse
        return Status.OK, bound

    def listen(self, inode: int, pid: Optional[int] = None, native_port: Optional[int] = None) -> Status:
        rec = self._lookup(inode, pid)
        if rec is None:
            return Status.INVALID_SOCKET
        if native_port:
            rec.native_port = native_port
        if rec.state == LISTENING:
            return Status.OK
        if rec.state != BOUND:
            return Status.INVALID_STATE
        q = self.queues.get(rec.bound_addr)
        if q is None:
            q = self.queues[rec.bound_addr] = ConnectionQueue(rec.bound_addr)
        q.listeners.append(rec)
        rec.queue, rec.state = q, LISTENING
        return Status.OK

    def accept(self, inode: int, blocking: bool, pid: int = 0,
               on_ready: Optional[ReadyCallback] = None):
        """Returns ``(Status.OK, conn, peer)``, ``(WOULD_BLOCK|error, None, None)``
        or ``(None, waiter, None)`` when the caller got parked."""
        rec = self._lookup(inode, pid)
        if rec is None:
            return Status.INVALID_SOCKET, None, None
        if rec.state != LISTENING:
            return Status.INVALID_STATE, None, None
        # the monitor drained the native socket before asking
        rec.signal_outstanding = False
        q = rec.queue
        if q.ready:
            conn, peer = q.ready.popleft()
            if q.ready:
                self._signal(q)
            return Status.OK, conn, peer
        if not blocking or on_ready is None:
            return Status.WOULD_BLOCK, None, None
        w = Waiter(on_ready, pid, next(self._waiter_seq), rec)
        rec.waiters.append(w)
        return None, w, None

    def cancel(self, waiter: Waiter) -> None:
        if waiter.done:
            return
        waiter.done = True
        try:
            waiter.record.waiters.remove(waiter)
        except ValueError:
            pass

    def queue_for(self, dest: OverlayAddr) -> Optional[ConnectionQueue]:
        return self.queues.get(dest)

    def admits(self, dest: OverlayAddr) -> Status:
        q = self.queues.get(dest)
        if q is None:
            return Status.CONN_REFUSED
        if len(q.ready) >= self._queue_cap:
            return Status.CONN_REFUSED
        return Status.OK

    def deliver(self, conn, dest: OverlayAddr, peer: OverlayAddr) -> Status:
        status = self.admits(dest)
        if status != Status.OK:
            self.refused += 1
            return status
        q = self.queues[dest]
        self.delivered += 1
        while True:
            w = self._oldest_waiter(q)
            if w is None:
                break
            w.record.waiters.remove(w)
            w.done = True
            if w.on_ready(Status.OK, conn, peer):
                return Status.OK
        q.ready.append((conn, peer))
        self._signal(q)
        return Status.OK

    @staticmethod
    def _oldest_waiter(q: ConnectionQueue) -> Optional[Waiter]:
        best = None
        for rec in q.listeners:
            if rec.waiters and (best is None or rec.waiters[0].seq < best.seq):
                best = rec.waiters[0]
        return best

    def _signal(self, q: ConnectionQueue) -> None:
        for rec in q.listeners:
            if rec.native_port and not rec.signal_outstanding:
                rec.signal_outstanding = True
                self.signals_injected += 1
                if self._inject is not None:
                    self._inject(rec)

    # -- introspection -------------------------------------------------------

    def stats(self) -> dict:
        return {
            "application_socket_table": len(self.sockets),
            "connect_queue_table": len(self.queues),
            "queues": {str(a): {"id": q.qid, "ready": len(q.ready),
                                "listeners": [r.inode for r in q.listeners]}
                       for a, q in self.queues.items()},
            "signal_connections_injected": self.signals_injected,
            "delivered": self.delivered,
            "refused": self.refused,
            "parked": sum(len(r.waiters) for r in self.sockets.values()),
        }
