"""Node supervisor: one per node, unprivileged.

Serves the process monitors of its guests over ``ns.sock``, speaks the
control protocol with other supervisors on its control port, keeps the
membership files current and launches guests with the monitor preloaded.
"""

from __future__ import annotations

import asyncio
import collections
import ipaddress
import json
import logging
import os
import shutil
import signal
import socket
import struct
import sys
import time
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Set, Tuple

from . import aio, proto
from .coord.service import BARRIER_TIMEOUT_S, Coordinator
from .fsremap import RESOLV_CONF, RemapTable, load_rules
from .monitor import build_shim, preload_env
from .netservice import NetworkService, TransportPolicy
from .netservice.transport import FrameReader
from .proto import (Accept, AcceptResp, Bind, BindResp, CloseNotify, CloseNotifyResp, Connect, ConnectResp,
                    Listen, ListenResp, NameLookup, NameLookupResp, PathRemap, PathRemapResp, PunchOffer,
                    Register, RegisterResp, TransportHello, Uname, UnameResp)
from .types import DEFAULT_OVERLAY_CIDR, BoxerError, OverlayAddr, Status

log = logging.getLogger(__name__)

DEFAULT_SEED = OverlayAddr("127.0.0.1", 7700)
REAP_INTERVAL_S = 1.0
FIRST_FRAME_TIMEOUT_S = 5.0
_UCRED = struct.Struct("3i")


class LaunchError(RuntimeError):
    pass


@dataclass
class GuestSpec:
    argv: List[str]
    env: Dict[str, str] = field(default_factory=dict)
    cwd: Optional[str] = None
    wait_nodes: int = 0
    wait_names: Tuple[str, ...] = ()
    barrier_timeout: float = BARRIER_TIMEOUT_S

    def __post_init__(self):
        if not self.argv or not self.argv[0]:
            raise LaunchError("empty guest command")
        self.wait_names = tuple(self.wait_names)
        if len(set(self.wait_names)) != len(self.wait_names):
            raise LaunchError("barrier names must be unique")
        if self.wait_nodes < 0:
            raise LaunchError("barrier node count must be >= 0")


@dataclass
class NodeConfig:
    boxer_dir: str
    seed: Optional[OverlayAddr] = None  # None means this node is the seed
    listen: Optional[OverlayAddr] = None  # control endpoint; the seed defaults to DEFAULT_SEED
    name: Optional[str] = None
    cidr: str = DEFAULT_OVERLAY_CIDR
    transport: TransportPolicy = field(default_factory=TransportPolicy)
    remap_file: Optional[str] = None
    expected_nodes: int = 0

    def __post_init__(self):
        net = ipaddress.IPv4Network(self.cidr)
        # host part = node id + 1; network and broadcast are never used
        if self.expected_nodes and net.num_addresses - 2 < self.expected_nodes:
            raise ValueError(f"overlay {self.cidr} cannot hold {self.expected_nodes} nodes")
        if self.listen is None:
            self.listen = DEFAULT_SEED if self.seed is None else OverlayAddr("127.0.0.1", 0)

    @property
    def is_seed(self) -> bool:
        return self.seed is None


def _peer_pid(sock: socket.socket) -> int:
    try:
        raw = sock.getsockopt(socket.SOL_SOCKET, socket.SO_PEERCRED, _UCRED.size)
        return _UCRED.unpack(raw)[0]
    except OSError:
        return 0


def guest_environment(base: Dict[str, str], shim: str, boxer_dir: str, cidr: str, node_id: int,
                      node_name: str) -> Dict[str, str]:
    """Environment of a monitored guest on the given node."""
    env = dict(base)
    env.update(preload_env(shim, env.get("LD_PRELOAD")))
    env.update({
        "BOXER_DIR": boxer_dir,
        "BOXER_OVERLAY_CIDR": cidr,
        "BOXER_NODE_ID": str(node_id),
        "BOXER_NODE_NAME": node_name,
    })
    return env


class ServiceConnection:
    """One monitor connection; requests are answered strictly one by one."""

    def __init__(self, sup: "Supervisor", sock: socket.socket):
        self.sup = sup
        self.sock = sock
        self.pid = _peer_pid(sock)
        self.frames = proto.FrameBuffer()
        self.fds: Deque[int] = collections.deque()
        self.waiter = None
        self.pending: Optional[asyncio.Task] = None
        self.closed = False
        self.requests = 0
        self.responses = 0
        sock.setblocking(False)
        asyncio.get_running_loop().add_reader(sock.fileno(), self._readable)

    def _readable(self) -> None:
        try:
            data, anc, _flags, _addr = self.sock.recvmsg(65536, socket.CMSG_SPACE(4 * 8))
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self.close()
            return
        self.fds.extend(proto._fds_from_ancillary(anc))
        if not data:
            self.close()
            return
        self.frames.feed(data)
        while not self.closed:
            try:
                msg = self.frames.pop()
            except proto.ProtocolError as exc:
                log.warning("pid %d: protocol error on service connection: %s", self.pid, exc)
                self.close()
                return
            if msg is None:
                return
            self.requests += 1
            self.sup.dispatch(self, msg)

    def reply(self, msg: proto.Message, fd: Optional[int] = None) -> bool:
        if self.closed:
            return False
        data = proto.encode_frame(msg)
        anc = [] if fd is None else [(socket.SOL_SOCKET, socket.SCM_RIGHTS, struct.pack("i", fd))]
        try:
            sent = self.sock.sendmsg([data], anc)
            if sent < len(data):
                self.sock.setblocking(True)
                self.sock.settimeout(1.0)
                self.sock.sendall(data[sent:])
                self.sock.setblocking(False)
        except OSError as exc:
            log.debug("pid %d: reply failed: %s", self.pid, exc)
            self.close()
            return False
        self.responses += 1
        self.sup.counters["responses"] += 1
        return True

    def on_accept_ready(self, status: Status, conn, peer) -> bool:
        """Socket-layer callback for a parked Accept."""
        self.waiter = None
        if self.closed:
            return False
        if status != Status.OK:
            self.reply(AcceptResp(status))
            return True
        if not self.reply(AcceptResp(Status.OK, peer), fd=conn.fileno()):
            return False
        conn.close()
        return True

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        loop = asyncio.get_running_loop()
        loop.remove_reader(self.sock.fileno())
        if self.waiter is not None and self.sup.ns.layer is not None:
            self.sup.ns.layer.cancel(self.waiter)
            self.waiter = None
        if self.pending is not None:
            self.pending.cancel()
        while self.fds:
            os.close(self.fds.popleft())
        self.sock.close()
        self.sup.connections.discard(self)
        # the process may still be on its way out; the periodic sweep retries
        if self.sup.ns.layer is not None:
            self.sup.ns.layer.reap(self.pid)


class _FirstFrame:
    """Waits for the opening frame of an inbound control-port stream.

    The frame is usually already queued when the stream is accepted, so
    the watcher and timeout are only set up if the first read comes up short.
    """

    __slots__ = ("sup", "sock", "reader", "loop", "timer")

    def __init__(self, sup: "Supervisor", sock: socket.socket):
        self.sup, self.sock = sup, sock
        self.reader = FrameReader()
        self.loop = None
        self.timer = None
        self._readable()

    def _stop(self) -> None:
        if self.loop is not None:
            self.timer.cancel()
            self.loop.remove_reader(self.sock.fileno())

    def _give_up(self) -> None:
        self.loop.remove_reader(self.sock.fileno())
        self.sock.close()

    def _readable(self) -> None:
        if self.sock.fileno() < 0:
            return
        try:
            first = self.reader.pump(self.sock)
        except (ConnectionError, OSError, proto.ProtocolError):
            self._stop()
            self.sock.close()
            return
        if first is not None:
            self._stop()
            self.sup._route_control(self.sock, first)
        elif self.loop is None:
            self.loop = asyncio.get_running_loop()
            self.timer = self.loop.call_later(FIRST_FRAME_TIMEOUT_S, self._give_up)
            self.loop.add_reader(self.sock.fileno(), self._readable)


class Supervisor:
    def __init__(self, config: NodeConfig, shim: Optional[str] = None, **ns_opts):
        self.config = config
        self.dir = os.path.abspath(config.boxer_dir)
        self.coord = Coordinator(config.cidr, self.dir, config.name)
        self.ns = NetworkService(self.coord.members, config.listen.host, config.transport, **ns_opts)
        self.remap: Optional[RemapTable] = None
        self.shim = shim
        self.connections: Set[ServiceConnection] = set()
        self.counters = collections.Counter()
        self.control_addr: Optional[OverlayAddr] = None
        self._control: Optional[socket.socket] = None
        self._servers: List[asyncio.AbstractServer] = []
        self._tasks: Set[asyncio.Task] = set()
        self.guests: List[asyncio.subprocess.Process] = []
        self.started_at = time.time()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    @property
    def node_id(self) -> Optional[int]:
        return self.coord.node_id

    @property
    def overlay_ip(self) -> Optional[str]:
        return self.coord.overlay_ip

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    # -- startup -----------------------------------------------------------

    def _prepare_dir(self) -> None:
        os.makedirs(self.path("log"), exist_ok=True)
        if not os.access(self.dir, os.W_OK):
            raise BoxerError(Status.INVALID_STATE, f"{self.dir} is not writable")
        for name in ("ns.sock", "coord.sock", "debug.sock"):
            try:
                os.unlink(self.path(name))
            except FileNotFoundError:
                pass
        self._write_resolv_conf()
        self.remap = load_rules(self.config.remap_file, self.dir)

    def _write_resolv_conf(self) -> None:
        try:
            with open(RESOLV_CONF) as fh:
                native = fh.read()
        except OSError:
            native = ""
        lines = ["# overlay resolver configuration; overlay names resolve before DNS\n"]
        lines += [ln + "\n" for ln in native.splitlines() if ln.strip() and not ln.startswith("#")]
        with open(self.path("resolv.conf"), "w") as fh:
            fh.writelines(lines)

    async def start(self) -> None:
        self._prepare_dir()
        cfg = self.config
        self._control = aio.listener(cfg.listen.host, cfg.listen.port, backlog=512)
        host, port = self._control.getsockname()
        self.control_addr = OverlayAddr(host, port)
        asyncio.get_running_loop().add_reader(self._control.fileno(), self._control_readable)
        if cfg.is_seed:
            self.coord.start_seed(self.control_addr)
        else:
            await self.coord.join(cfg.seed, self.control_addr)
        self.ns.attach(self.coord.node_id, self.coord.overlay_ip)
        self.coord.write_files()
        loop = asyncio.get_running_loop()
        ns_sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        ns_sock.bind(self.path("ns.sock"))
        ns_sock.listen(512)
        ns_sock.setblocking(False)
        self._ns_sock = ns_sock
        loop.add_reader(ns_sock.fileno(), self._accept_service)
        self._servers.append(await asyncio.start_unix_server(self.coord.serve_subscriber, self.path("coord.sock")))
        self._servers.append(await asyncio.start_unix_server(self._serve_debug, self.path("debug.sock")))
        self._spawn(self._reap_loop())

    def ready_info(self) -> dict:
        return {"event": "ready", "node_id": self.node_id, "overlay_ip": self.overlay_ip,
                "name": self.coord.display_name, "control": str(self.control_addr), "dir": self.dir,
                "join_completed_at": self.coord.join_completed_at,
                "join_completed_mono": self.coord.join_completed_mono}

    # -- control port ------------------------------------------------------

    def _control_readable(self) -> None:
        # drain the backlog; every stream states its purpose in its first frame
        while True:
            try:
                sock, _ = self._control.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                log.warning("control accept failed: %s", exc)
                return
            sock.setblocking(False)
            _FirstFrame(self, sock)

    def _route_control(self, sock: socket.socket, first: proto.Message) -> None:
        if isinstance(first, TransportHello) and first.mode == proto.MODE_DIRECT:
            self.ns.transport.handle_direct(sock, first)
        elif isinstance(first, (TransportHello, PunchOffer)):
            self._spawn(self.ns.transport.handle_inbound(sock, first))
        else:
            self._spawn(self._coord_session(sock, first))

    async def _coord_session(self, sock: socket.socket, first: proto.Message) -> None:
        reader, writer = await asyncio.open_connection(sock=sock)
        await self.coord.serve_session(reader, writer, first)

    # -- service connections -------------------------------------------------

    def _accept_service(self) -> None:
        try:
            sock, _ = self._ns_sock.accept()
        except (BlockingIOError, InterruptedError):
            return
        except OSError as exc:
            log.warning("service accept failed: %s", exc)
            return
        self.connections.add(ServiceConnection(self, sock))

    def dispatch(self, conn: ServiceConnection, msg: proto.Message) -> None:
        self.counters["requests"] += 1
        self.counters[type(msg).__name__] += 1
        layer = self.ns.layer
        if isinstance(msg, Register):
            conn.reply(RegisterResp(layer.register(msg.inode, conn.pid)))
        elif isinstance(msg, Bind):
            status, addr = layer.bind(msg.inode, msg.addr, bool(msg.flags & proto.BIND_REUSEPORT), conn.pid)
            conn.reply(BindResp(status, addr) if addr is not None else BindResp(status))
        elif isinstance(msg, Listen):
            native_port = None
            if conn.fds:
                fd = conn.fds.popleft()
                try:
                    with socket.socket(fileno=fd) as s:
                        native_port = s.getsockname()[1]
                except OSError:
                    pass
            conn.reply(ListenResp(layer.listen(msg.inode, conn.pid, native_port)))
        elif isinstance(msg, Accept):
            status, got, peer = layer.accept(msg.inode, msg.blocking, conn.pid, conn.on_accept_ready)
            if status is None:
                conn.waiter = got
            elif status == Status.OK:
                if conn.reply(AcceptResp(Status.OK, peer), fd=got.fileno()):
                    got.close()
                elif msg.inode in layer.sockets:
                    # the asker vanished; the connection goes back to the queue
                    if layer.deliver(got, layer.sockets[msg.inode].bound_addr, peer) != Status.OK:
                        got.close()
                else:
                    got.close()
            else:
                conn.reply(AcceptResp(status))
        elif isinstance(msg, Connect):
            self._connect(conn, msg)
        elif isinstance(msg, NameLookup):
            ip = self.coord.resolve(msg.name)
            conn.reply(NameLookupResp(Status.OK, (ip,)) if ip else NameLookupResp(Status.NOT_FOUND))
        elif isinstance(msg, Uname):
            conn.reply(UnameResp(Status.OK, self.coord.display_name))
        elif isinstance(msg, PathRemap):
            target = self.remap.remap(msg.path)
            conn.reply(PathRemapResp(Status.OK, target) if target != msg.path else PathRemapResp(Status.NOT_FOUND))
        elif isinstance(msg, CloseNotify):
            conn.reply(CloseNotifyResp(layer.close(msg.inode, conn.pid)))
        else:
            log.warning("pid %d sent non-request %s", conn.pid, type(msg).__name__)
            conn.close()

    def _connect(self, conn: ServiceConnection, msg: Connect) -> None:
        layer = self.ns.layer
        rec = layer.sockets.get(msg.inode)
        if rec is not None and rec.state == "listening":
            conn.reply(ConnectResp(Status.INVALID_STATE))
            return
        src_port = rec.bound_addr.port if rec is not None and rec.bound_addr is not None else None

        def done(status: Status, sock: Optional[socket.socket], local: OverlayAddr) -> None:
            conn.pending = None
            if status != Status.OK:
                conn.reply(ConnectResp(status))
                return
            try:
                if conn.reply(ConnectResp(Status.OK, local), fd=sock.fileno()):
                    layer.forget(msg.inode)
            finally:
                sock.close()

        conn.pending = self.ns.start_connect(msg.dest, msg.blocking, src_port, done)
        if conn.pending is None:
            conn.pending = self._spawn(self._connect_async(msg, src_port, done))

    async def _connect_async(self, msg: Connect, src_port: Optional[int], done) -> None:
        done(*await self.ns.connect(msg.dest, msg.blocking, src_port))

    async def _reap_loop(self) -> None:
        while True:
            await asyncio.sleep(REAP_INTERVAL_S)
            layer = self.ns.layer
            if layer is None:
                continue
            pids = set()
            for rec in layer.sockets.values():
                pids |= rec.owners
            for pid in pids:
                layer.reap(pid)

    # -- debug -------------------------------------------------------------

    def stats(self) -> dict:
        out = {"node": self.ready_info(), "coord": self.coord.stats(), "netservice": self.ns.stats(),
               "service": {"connections": len(self.connections), **self.counters}}
        return out

    async def _serve_debug(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            writer.write(json.dumps(self.stats(), sort_keys=True).encode() + b"\n")
            await writer.drain()
        finally:
            writer.close()

    # -- guests ------------------------------------------------------------

    def guest_env(self, spec: GuestSpec) -> Dict[str, str]:
        if self.shim is None:
            self.shim = build_shim()
        env = dict(os.environ)
        env.update(spec.env)
        return guest_environment(env, self.shim, self.dir, self.config.cidr, self.node_id,
                                 self.coord.display_name)

    async def launch_guest(self, spec: GuestSpec, stdio: str = "log") -> asyncio.subprocess.Process:
        if shutil.which(spec.argv[0], path=spec.env.get("PATH", os.environ.get("PATH"))) is None \
                and not os.path.exists(spec.argv[0]):
            raise LaunchError(f"command not found: {spec.argv[0]}")
        if spec.wait_nodes or spec.wait_names:
            await self.coord.wait_barrier(spec.wait_nodes, spec.wait_names, spec.barrier_timeout)
        env = self.guest_env(spec)
        index = len(self.guests)
        if stdio == "inherit":
            out = err = None
        else:
            stem = f"guest-{index}-{os.path.basename(spec.argv[0])}"
            out = open(self.path(f"log/{stem}.stdout"), "wb")
            err = open(self.path(f"log/{stem}.stderr"), "wb")
        try:
            proc = await asyncio.create_subprocess_exec(*spec.argv, env=env, cwd=spec.cwd,
                                                        stdout=out, stderr=err, stdin=asyncio.subprocess.DEVNULL)
        except OSError as exc:
            raise LaunchError(f"cannot start {spec.argv[0]}: {exc}") from None
        finally:
            if out is not None:
                out.close()
                err.close()
        self.guests.append(proc)
        return proc

    async def stop(self) -> None:
        for proc in self.guests:
            if proc.returncode is None:
                try:
                    proc.terminate()
                except ProcessLookupError:
                    pass
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for conn in list(self.connections):
            conn.close()
        for srv in self._servers:
            srv.close()
        if getattr(self, "_ns_sock", None) is not None:
            asyncio.get_running_loop().remove_reader(self._ns_sock.fileno())
            self._ns_sock.close()
        if self._control is not None:
            self._control.close()
        await self.coord.close()
        for name in ("ns.sock", "coord.sock", "debug.sock"):
            try:
                os.unlink(self.path(name))
            except FileNotFoundError:
                pass


async def run_node(config: NodeConfig, spec: Optional[GuestSpec] = None, stdio: str = "log",
                   ready_stream=None) -> int:
    """Run a supervisor until its guest exits (exit code forwarded) or a signal arrives."""
    sup = Supervisor(config)
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(sig, stop.set)
    code = 0
    try:
        await sup.start()
        if ready_stream is not None:
            ready_stream.write(json.dumps(sup.ready_info()) + "\n")
            ready_stream.flush()
        if spec is None:
            await stop.wait()
            return 0
        proc = await sup.launch_guest(spec, stdio)
        waiter = asyncio.ensure_future(proc.wait())
        stopper = asyncio.ensure_future(stop.wait())
        await asyncio.wait({waiter, stopper}, return_when=asyncio.FIRST_COMPLETED)
        if waiter.done():
            code = waiter.result()
            # report signal deaths the way a shell would
            code = 128 - code if code < 0 else code
        else:
            waiter.cancel()
            code = 143
        stopper.cancel()
        return code
    finally:
        await sup.stop()
