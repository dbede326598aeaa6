"""Network service: socket-layer tables plus transport establishment."""

from __future__ import annotations

import asyncio
import logging
import socket
from typing import Callable, Optional, Tuple

from ..coord.membership import MembershipSet
from ..types import SIGNAL_PEER_ADDR, BoxerError, OverlayAddr, Status
from .socketlayer import EPHEMERAL_PORTS, QUEUE_CAP, ConnectionQueue, SocketLayer, SocketRecord, Waiter
from .transport import DirectDial, Transport, TransportPolicy

__all__ = ["NetworkService", "SocketLayer", "SocketRecord", "ConnectionQueue", "Waiter",
           "Transport", "TransportPolicy", "CONNECT_TIMEOUT_S", "NONBLOCKING_CONNECT_TIMEOUT_S"]

log = logging.getLogger(__name__)

CONNECT_TIMEOUT_S = 3.0
# non-blocking connects are finished synchronously within this budget
NONBLOCKING_CONNECT_TIMEOUT_S = 0.5


class NetworkService:
    def __init__(self, members: MembershipSet, control_host: str = "127.0.0.1",
                 policy: TransportPolicy = TransportPolicy(), connect_timeout: float = CONNECT_TIMEOUT_S,
                 nonblocking_timeout: float = NONBLOCKING_CONNECT_TIMEOUT_S, **transport_opts):
        self.members = members
        self.control_host = control_host
        self.policy = policy
        self.connect_timeout = connect_timeout
        self.nonblocking_timeout = nonblocking_timeout
        self.node_id: Optional[int] = None
        self.local_ip: Optional[str] = None
        self.layer: Optional[SocketLayer] = None
        self.transport = Transport(self, **transport_opts)
        self._src_port = EPHEMERAL_PORTS[0]
        self._signal_tasks = set()

    def attach(self, node_id: int, local_ip: str) -> None:
        """Bind the service to this node's identity once the join completed."""
        self.node_id, self.local_ip = node_id, local_ip
        self.layer = SocketLayer(local_ip, inject_signal=self._inject_signal)

    def admits(self, dest: OverlayAddr) -> Status:
        if self.layer is None or dest.host != self.local_ip:
            return Status.HOST_UNREACHABLE
        return self.layer.admits(dest)

    def _next_src_port(self) -> int:
        lo, hi = EPHEMERAL_PORTS
        port = self._src_port
        self._src_port = lo if port >= hi else port + 1
        return port

    async def connect(self, dest: OverlayAddr, blocking: bool = True,
                      src_port: Optional[int] = None) -> Tuple[Status, Optional[socket.socket], OverlayAddr]:
        """Establish a stream to ``dest``; returns (status, stream, local overlay address)."""
        src = OverlayAddr(self.local_ip or "0.0.0.0", src_port or self._next_src_port())
        if dest.port == 0:
            return Status.INVALID_ADDRESS, None, src
        rec = self.members.by_ip(dest.host)
        if rec is None:
            return Status.HOST_UNREACHABLE, None, src
        budget = self.connect_timeout if blocking else self.nonblocking_timeout
        try:
            sock = await asyncio.wait_for(self.transport.establish(rec, dest, src), budget)
        except asyncio.TimeoutError:
            return Status.TIMEOUT, None, src
        except BoxerError as exc:
            return exc.status, None, src
        except (OSError, ConnectionError) as exc:
            log.debug("connect to %s failed: %s", dest, exc)
            return Status.UNAVAILABLE, None, src
        return Status.OK, sock, src

    def start_connect(self, dest: OverlayAddr, blocking: bool, src_port: Optional[int],
                      done: Callable[[Status, Optional[socket.socket], OverlayAddr], None]) -> Optional[DirectDial]:
        """Callback flavour of :meth:`connect` for direct transport.

        Returns the in-flight dial (cancellable), or None when the
        destination needs the coroutine path; ``done`` is not called then.
        """
        rec = self.members.by_ip(dest.host) if dest.port else None
        if rec is None or not self.transport.uses_direct(rec):
            return None
        src = OverlayAddr(self.local_ip or "0.0.0.0", src_port or self._next_src_port())
        budget = self.connect_timeout if blocking else self.nonblocking_timeout
        return DirectDial(self.transport, rec, dest, src, budget, lambda status, sock: done(status, sock, src))

    # -- signal connections ----------------------------------------------

    def _inject_signal(self, rec: SocketRecord) -> None:
        task = asyncio.get_running_loop().create_task(self._signal(rec.native_port))
        self._signal_tasks.add(task)
        task.add_done_callback(self._signal_tasks.discard)

    @staticmethod
    async def _signal(port: int) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        try:
            sock.bind((SIGNAL_PEER_ADDR, 0))
            await asyncio.get_running_loop().sock_connect(sock, ("127.0.0.1", port))
        except OSError as exc:
            log.debug("signal connection to port %d failed: %s", port, exc)
        finally:
            sock.close()

    def stats(self) -> dict:
        out = self.layer.stats() if self.layer is not None else {}
        out["transport"] = dict(self.transport.counters, policy=str(self.policy))
        return out
