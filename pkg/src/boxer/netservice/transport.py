"""Byte-stream establishment between supervisors.

Every node's control port doubles as its transport endpoint: the first
frame on an inbound stream says what the stream is for. Three ways to get
a stream to the node owning ``dest``:

direct
    Dial the owner's control port, send ``TransportHello(MODE_DIRECT)``,
    read one ``TransportStatus``. The owner checks admission before
    answering, so a refusal costs one round trip and no extra setup.
punch
    Swap candidate endpoints with ``PunchOffer``/``PunchAnswer`` over a
    control connection, then both sides listen on their candidate and dial
    the other's at once. Each stream opens with a hello carrying the nonce;
    the initiator picks the first verified stream with ``PunchSelect`` and
    the responder delivers at most once per nonce.
proxy
    Ask a relay node to dial the owner directly and splice the two legs.
"""

from __future__ import annotations

import asyncio
import errno
import logging
import secrets
import socket
from collections import OrderedDict
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional

from .. import aio, proto
from ..proto import (MODE_DIRECT, MODE_PUNCH, MODE_RELAY, PunchAnswer, PunchOffer, PunchSelect,
                     TransportHello, TransportStatus)
from ..types import BoxerError, NodeRecord, OverlayAddr, Status

if TYPE_CHECKING:  # pragma: no cover
    from . import NetworkService

log = logging.getLogger(__name__)

PUNCH_ROUNDS = 3
PUNCH_WINDOW_S = 1.0
NONCE_MEMORY = 4096


@dataclass(frozen=True)
class TransportPolicy:
    kind: str = "direct"  # direct | punch | proxy
    relay: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("direct", "punch", "proxy"):
            raise ValueError(f"unknown transport {self.kind!r}")
        if (self.kind == "proxy") != (self.relay is not None):
            raise ValueError("proxy transport needs exactly one relay node id")

    @classmethod
    def parse(cls, text: str) -> "TransportPolicy":
        text = text.strip()
        if text.startswith("proxy:"):
            return cls("proxy", int(text[6:]))
        return cls(text)

    def __str__(self):
        return f"proxy:{self.relay}" if self.kind == "proxy" else self.kind


class _NonceLog:
    """Bounded memory of nonces that already produced a delivery."""

    def __init__(self, size: int = NONCE_MEMORY):
        self._seen: "OrderedDict[int, None]" = OrderedDict()
        self._size = size

    def claim(self, nonce: int) -> bool:
        if nonce in self._seen:
            return False
        self._seen[nonce] = None
        if len(self._seen) > self._size:
            self._seen.popitem(last=False)
        return True


def _restore_defaults(sock: socket.socket) -> None:
    # the stream goes to a guest that never asked for NODELAY
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 0)
    except OSError:
        pass


def _nodelay(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class FrameReader:
    """Pull exactly one frame off a non-blocking socket, never reading past it."""

    __slots__ = ("buf", "need")

    def __init__(self):
        self.buf = bytearray()
        self.need = 4

    def pump(self, sock: socket.socket) -> Optional[proto.Message]:
        """None while incomplete; raises ConnectionError on EOF."""
        while True:
            try:
                chunk = sock.recv(self.need - len(self.buf))
            except (BlockingIOError, InterruptedError):
                return None
            if not chunk:
                raise ConnectionError("peer closed mid-frame")
            self.buf += chunk
            if len(self.buf) < self.need:
                continue
            if self.need == 4:
                self.need = proto.frame_length(bytes(self.buf))
                continue
            msg, _ = proto.decode_frame(bytes(self.buf))
            return msg


class DirectDial:
    """Direct establishment driven by loop callbacks rather than tasks.

    This is the path every overlay connect takes under the default
    policy. Each step is tried before anything is registered with the
    loop: on a local control port the handshake and the peer's answer
    are usually already there, and a watcher plus timer per connect
    would cost more than the rest of the work. ``done(status, sock)``
    fires exactly once unless the dial is cancelled first.
    """

    def __init__(self, transport: "Transport", rec: NodeRecord, dest: OverlayAddr, src: OverlayAddr,
                 budget: float, done):
        self.t = transport
        self.loop = asyncio.get_running_loop()
        self.deadline = self.loop.time() + budget
        self.done = done
        self.reader = FrameReader()
        self.sock: Optional[socket.socket] = None
        self.fd = -1
        self.watch = None
        self.timer = None
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        except OSError:
            self._finish(Status.UNAVAILABLE)
            return
        self.sock, self.fd = sock, sock.fileno()
        sock.setblocking(False)
        _nodelay(sock)
        self.hello = proto.encode_frame(TransportHello(0, MODE_DIRECT, src, dest))
        err = sock.connect_ex((rec.control.host, rec.control.port))
        if err in (0, errno.EINPROGRESS, errno.EAGAIN):
            self._send_hello()
        else:
            self._finish(Status.HOST_UNREACHABLE)

    def _wait(self, mode: str, callback) -> None:
        self._unwatch()
        self.watch = mode
        if mode == "w":
            self.loop.add_writer(self.fd, callback)
        else:
            self.loop.add_reader(self.fd, callback)
        if self.timer is None:
            self.timer = self.loop.call_at(self.deadline, self._finish, Status.TIMEOUT)

    def _unwatch(self) -> None:
        if self.watch == "w":
            self.loop.remove_writer(self.fd)
        elif self.watch == "r":
            self.loop.remove_reader(self.fd)
        self.watch = None

    def _send_hello(self) -> None:
        try:
            sent = self.sock.send(self.hello)
        except (BlockingIOError, InterruptedError):
            # handshake still in flight
            self._wait("w", self._send_hello)
            return
        except OSError as exc:
            if exc.errno == errno.ENOTCONN:
                self._wait("w", self._send_hello)
                return
            sent = -1
        if sent != len(self.hello):
            self._finish(Status.HOST_UNREACHABLE)
            return
        self._readable()

    def _readable(self) -> None:
        try:
            reply = self.reader.pump(self.sock)
        except (ConnectionError, OSError, proto.ProtocolError):
            self._finish(Status.UNAVAILABLE)
            return
        if reply is None:
            if self.watch != "r":
                self._wait("r", self._readable)
            return
        if not isinstance(reply, TransportStatus):
            self._finish(Status.PROTOCOL_ERROR)
        elif reply.status != Status.OK:
            self._finish(reply.status)
        else:
            self.t.counters["direct"] += 1
            _restore_defaults(self.sock)
            self._finish(Status.OK)

    def _release(self) -> None:
        if self.timer is not None:
            self.timer.cancel()
        self._unwatch()

    def _finish(self, status: Status) -> None:
        if self.done is None:
            return
        done, self.done = self.done, None
        self._release()
        sock, self.sock = self.sock, None
        if status != Status.OK and sock is not None:
            sock.close()
            sock = None
        done(status, sock)

    def cancel(self) -> None:
        if self.done is None:
            return
        self.done = None
        self._release()
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class Transport:
    def __init__(self, service: "NetworkService", punch_rounds: int = PUNCH_ROUNDS,
                 punch_window: float = PUNCH_WINDOW_S, punch_select_wait: float = 0.0):
        self.ns = service
        self.punch_rounds = punch_rounds
        self.punch_window = punch_window
        # test knob: linger after the first verified stream so both dials land
        self.punch_select_wait = punch_select_wait
        self._nonces = _NonceLog()
        self.counters = {
            "direct": 0, "relayed": 0, "relay_spliced": 0, "punch_offers": 0, "punch_answers": 0,
            "punch_streams_verified": 0, "punch_losers_closed": 0, "punch_delivered": 0,
            "punch_duplicate_nonce": 0, "punch_rounds_failed": 0,
        }

    # -- active side ------------------------------------------------------

    async def establish(self, rec: NodeRecord, dest: OverlayAddr, src: OverlayAddr) -> socket.socket:
        policy = self.ns.policy
        if rec.node_id == self.ns.node_id or policy.kind == "direct":
            sock = await self.direct(rec, dest, src)
        elif policy.kind == "punch":
            sock = await self.punch(rec, dest, src)
        else:
            relay = self.ns.members.records.get(policy.relay)
            if relay is None:
                raise BoxerError(Status.HOST_UNREACHABLE, f"relay node {policy.relay} is not a member")
            if relay.node_id in (rec.node_id, self.ns.node_id):
                sock = await self.direct(rec, dest, src)
            else:
                sock = await self.via_relay(relay, rec, dest, src)
        _restore_defaults(sock)
        return sock

    async def _dial_control(self, rec: NodeRecord) -> socket.socket:
        try:
            sock = await aio.dial(rec.control.host, rec.control.port)
        except OSError as exc:
            raise BoxerError(Status.HOST_UNREACHABLE, f"node {rec.node_id}: {exc}") from None
        _nodelay(sock)
        return sock

    async def _expect_status(self, sock: socket.socket) -> None:
        try:
            reply = await aio.read_msg(sock)
        except (ConnectionError, proto.ProtocolError) as exc:
            sock.close()
            raise BoxerError(Status.UNAVAILABLE, f"transport setup broke: {exc}") from None
        if not isinstance(reply, TransportStatus):
            sock.close()
            raise BoxerError(Status.PROTOCOL_ERROR, f"expected TransportStatus, got {type(reply).__name__}")
        if reply.status != Status.OK:
            sock.close()
            raise BoxerError(reply.status)

    def uses_direct(self, rec: NodeRecord) -> bool:
        policy = self.ns.policy
        return (rec.node_id == self.ns.node_id or policy.kind == "direct"
                or (policy.kind == "proxy" and policy.relay in (rec.node_id, self.ns.node_id)))

    async def direct(self, rec: NodeRecord, dest: OverlayAddr, src: OverlayAddr,
                     budget: float = 3600.0) -> socket.socket:
        fut = asyncio.get_running_loop().create_future()

        def done(status, sock):
            if not fut.done():
                fut.set_result((status, sock))
            elif sock is not None:
                sock.close()

        dial = DirectDial(self, rec, dest, src, budget, done)
        try:
            status, sock = await fut
        except asyncio.CancelledError:
            dial.cancel()
            raise
        if status != Status.OK:
            raise BoxerError(status)
        return sock

    async def via_relay(self, relay: NodeRecord, rec: NodeRecord, dest: OverlayAddr,
                        src: OverlayAddr) -> socket.socket:
        sock = await self._dial_control(relay)
        try:
            await aio.write_msg(sock, TransportHello(0, MODE_RELAY, src, dest, rec.node_id))
        except OSError:
            sock.close()
            raise BoxerError(Status.HOST_UNREACHABLE) from None
        await self._expect_status(sock)
        self.counters["relayed"] += 1
        return sock

    async def punch(self, rec: NodeRecord, dest: OverlayAddr, src: OverlayAddr) -> socket.socket:
        host = self.ns.control_host
        for _ in range(self.punch_rounds):
            nonce = secrets.randbits(64)
            lst = aio.listener(host)
            try:
                ep = OverlayAddr(host, lst.getsockname()[1])
                ctl = await self._dial_control(rec)
                try:
                    await aio.write_msg(ctl, PunchOffer(nonce, self.ns.node_id, rec.node_id, ep, dest))
                    self.counters["punch_offers"] += 1
                    answer = await asyncio.wait_for(aio.read_msg(ctl), self.punch_window)
                except (OSError, ConnectionError, proto.ProtocolError, asyncio.TimeoutError):
                    self.counters["punch_rounds_failed"] += 1
                    continue
                finally:
                    ctl.close()
                if not isinstance(answer, PunchAnswer) or answer.nonce != nonce:
                    raise BoxerError(Status.PROTOCOL_ERROR, "bad punch answer")
                if answer.status != Status.OK:
                    # refusal is known before any dial
                    raise BoxerError(answer.status)
                self.counters["punch_answers"] += 1
                sock = await self._punch_initiate(lst, answer.responder_ep, nonce, src, dest)
                if sock is not None:
                    return sock
                self.counters["punch_rounds_failed"] += 1
            finally:
                lst.close()
        raise BoxerError(Status.TIMEOUT, "hole punching exhausted its rounds")

    async def _verify(self, sock: socket.socket, nonce: int, src: OverlayAddr,
                      dest: OverlayAddr) -> Optional[TransportHello]:
        _nodelay(sock)
        await aio.write_msg(sock, TransportHello(nonce, MODE_PUNCH, src, dest))
        hello = await aio.read_msg(sock)
        if isinstance(hello, TransportHello) and hello.mode == MODE_PUNCH and hello.nonce == nonce:
            return hello
        return None

    async def _punch_streams(self, lst: socket.socket, peer: OverlayAddr, nonce: int,
                             src: OverlayAddr, dest: OverlayAddr, found: "asyncio.Queue") -> List[asyncio.Task]:
        loop = asyncio.get_running_loop()

        async def one(sock: socket.socket):
            try:
                hello = await self._verify(sock, nonce, src, dest)
                if hello is not None:
                    found.put_nowait((sock, hello))
                    return
            except (OSError, ConnectionError, proto.ProtocolError):
                pass
            except asyncio.CancelledError:
                sock.close()
                raise
            sock.close()

        async def dialer():
            try:
                sock = await aio.dial(peer.host, peer.port)
            except OSError:
                return
            await one(sock)

        async def acceptor():
            children = []
            try:
                while True:
                    sock, _ = await loop.sock_accept(lst)
                    sock.setblocking(False)
                    children.append(asyncio.ensure_future(one(sock)))
            finally:
                for c in children:
                    c.cancel()

        return [asyncio.ensure_future(dialer()), asyncio.ensure_future(acceptor())]

    async def _punch_initiate(self, lst, peer, nonce, src, dest) -> Optional[socket.socket]:
        found: asyncio.Queue = asyncio.Queue()
        tasks = await self._punch_streams(lst, peer, nonce, src, dest, found)
        winner = None
        try:
            try:
                winner, _ = await asyncio.wait_for(found.get(), self.punch_window)
            except asyncio.TimeoutError:
                return None
            if self.punch_select_wait:
                await asyncio.sleep(self.punch_select_wait)
        finally:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            self.counters["punch_streams_verified"] += found.qsize() + (winner is not None)
            while not found.empty():
                loser, _ = found.get_nowait()
                aio.send_now(loser, PunchSelect(nonce, False))
                loser.close()
                self.counters["punch_losers_closed"] += 1
        try:
            await aio.write_msg(winner, PunchSelect(nonce, True))
        except OSError:
            winner.close()
            return None
        await self._expect_status(winner)
        return winner

    # -- passive side -----------------------------------------------------

    async def handle_inbound(self, sock: socket.socket, first: proto.Message) -> None:
        """Serve a stream whose first frame was a transport message."""
        if isinstance(first, PunchOffer):
            await self._punch_respond(sock, first)
        elif isinstance(first, TransportHello) and first.mode == MODE_DIRECT:
            self.handle_direct(sock, first)
        elif isinstance(first, TransportHello) and first.mode == MODE_RELAY:
            await self._relay(sock, first)
        else:
            sock.close()

    def handle_direct(self, sock: socket.socket, hello: TransportHello) -> Status:
        return self._admit(sock, hello.dest, hello.src)

    def _admit(self, sock: socket.socket, dest: OverlayAddr, src: OverlayAddr) -> Status:
        """Answer, then hand the stream to the socket layer, without yielding.

        The status must be on the wire before a guest can write to the
        stream, or the dialer would read guest bytes as a control frame.
        """
        status = self.ns.admits(dest)
        if not aio.send_now(sock, TransportStatus(status)):
            sock.close()
            return Status.UNAVAILABLE
        if status != Status.OK:
            sock.close()
            return status
        _restore_defaults(sock)
        return self.ns.layer.deliver(sock, dest, src)

    async def _relay(self, sock: socket.socket, hello: TransportHello) -> None:
        if hello.target == self.ns.node_id:
            self._admit(sock, hello.dest, hello.src)
            return
        rec = self.ns.members.records.get(hello.target)
        if rec is None:
            aio.send_now(sock, TransportStatus(Status.HOST_UNREACHABLE))
            sock.close()
            return
        try:
            upstream = await asyncio.wait_for(self.direct(rec, hello.dest, hello.src), self.ns.connect_timeout)
        except BoxerError as exc:
            aio.send_now(sock, TransportStatus(exc.status))
            sock.close()
            return
        except asyncio.TimeoutError:
            aio.send_now(sock, TransportStatus(Status.TIMEOUT))
            sock.close()
            return
        if not aio.send_now(sock, TransportStatus(Status.OK)):
            sock.close()
            upstream.close()
            return
        self.counters["relay_spliced"] += 1
        await aio.splice(sock, upstream)

    async def _punch_respond(self, ctl: socket.socket, offer: PunchOffer) -> None:
        status = self.ns.admits(offer.dest)
        if status != Status.OK:
            aio.send_now(ctl, PunchAnswer(offer.nonce, status, OverlayAddr("0.0.0.0", 0)))
            ctl.close()
            return
        host = self.ns.control_host
        lst = aio.listener(host)
        try:
            ep = OverlayAddr(host, lst.getsockname()[1])
            ok = aio.send_now(ctl, PunchAnswer(offer.nonce, Status.OK, ep))
            ctl.close()
            if not ok:
                return
            found: asyncio.Queue = asyncio.Queue()
            src = OverlayAddr(offer.dest.host, 0)
            tasks = await self._punch_streams(lst, offer.initiator_ep, offer.nonce, src, offer.dest, found)
            try:
                await asyncio.wait_for(self._await_selection(found, offer), self.punch_window * 1.5)
            except asyncio.TimeoutError:
                pass
            finally:
                for t in tasks:
                    t.cancel()
                await asyncio.gather(*tasks, return_exceptions=True)
                while not found.empty():
                    found.get_nowait()[0].close()
        finally:
            lst.close()

    async def _await_selection(self, found: "asyncio.Queue", offer: PunchOffer) -> None:
        """Read the initiator's verdict on every verified stream until one is chosen."""
        pending = set()
        done_event = asyncio.Event()

        async def judge(sock: socket.socket, hello: TransportHello):
            try:
                verdict = await aio.read_msg(sock)
            except (OSError, ConnectionError, proto.ProtocolError):
                sock.close()
                return
            except asyncio.CancelledError:
                sock.close()
                raise
            if not (isinstance(verdict, PunchSelect) and verdict.nonce == offer.nonce and verdict.selected):
                sock.close()
                return
            if not self._nonces.claim(offer.nonce):
                self.counters["punch_duplicate_nonce"] += 1
                aio.send_now(sock, TransportStatus(Status.PROTOCOL_ERROR))
                sock.close()
                return
            if self._admit(sock, offer.dest, hello.src) == Status.OK:
                self.counters["punch_delivered"] += 1
            done_event.set()

        getter = None
        try:
            while not done_event.is_set():
                getter = asyncio.ensure_future(found.get())
                waiter = asyncio.ensure_future(done_event.wait())
                await asyncio.wait({getter, waiter}, return_when=asyncio.FIRST_COMPLETED)
                waiter.cancel()
                if getter.done():
                    pending.add(asyncio.ensure_future(judge(*getter.result())))
                else:
                    getter.cancel()
        finally:
            if getter is not None and not getter.done():
                getter.cancel()
            for t in pending:
                if not t.done():
                    t.cancel()
            await asyncio.gather(*pending, return_exceptions=True)
