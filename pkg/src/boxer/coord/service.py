"""Coordination runtime: the seed's sequencer and every node's replica.

The seed owns a session per joined node and pushes every sequenced update
down all of them. Joiners apply updates with hold-and-reorder, heartbeat
every ``HEARTBEAT_S`` and ask for a snapshot when a gap outlives
``GAP_REFETCH_S``. A session that goes quiet for ``LEAVE_AFTER_S`` or
breaks counts as the node leaving.
"""

from __future__ import annotations

import asyncio
import logging
import os
import socket
import tempfile
import time
from dataclasses import replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set

from .. import proto
from ..proto import (Heartbeat, JoinOk, JoinReject, JoinReq, NameReq, NameResp, Snapshot, SnapshotReq,
                     Update)
from ..types import BoxerError, NodeRecord, OverlayAddr, Status, UpdateKind, overlay_ip_for
from .membership import MembershipSet, event_line, hosts_text, snapshot_lines

log = logging.getLogger(__name__)

HEARTBEAT_S = 0.5
LEAVE_AFTER_S = 2.0
GAP_REFETCH_S = 1.0
JOIN_ATTEMPTS = 5
BACKOFF_CAP_S = 5.0
SUBSCRIBER_BUFFER = 1024
BARRIER_TIMEOUT_S = 60.0


async def _read_frame(reader: asyncio.StreamReader) -> proto.Message:
    head = await reader.readexactly(4)
    total = proto.frame_length(head)
    rest = await reader.readexactly(total - 4)
    return proto.decode_frame(head + rest)[0]


def _write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class _Subscriber:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.queue: asyncio.Queue = asyncio.Queue(SUBSCRIBER_BUFFER)
        self.task: Optional[asyncio.Task] = None

    async def pump(self):
        try:
            while True:
                line = await self.queue.get()
                self.writer.write(line.encode())
                await self.writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            self.writer.close()


class _Session:
    """Seed-side state for one joined node."""

    def __init__(self, node_id: int, writer: asyncio.StreamWriter):
        self.node_id = node_id
        self.writer = writer
        self.last_seen = time.monotonic()

    def send(self, msg: proto.Message) -> None:
        if not self.writer.is_closing():
            self.writer.write(proto.encode_frame(msg))


class Coordinator:
    def __init__(self, cidr: str, boxer_dir: Optional[str] = None, name: Optional[str] = None):
        self.cidr = cidr
        self.dir = boxer_dir
        self.name = name or None
        self.members = MembershipSet()
        self.node_id: Optional[int] = None
        self.overlay_ip: Optional[str] = None
        self.is_seed = False
        self.stale = False
        self.join_completed_at: Optional[float] = None  # wall clock
        self.join_completed_mono: Optional[float] = None  # CLOCK_MONOTONIC, comparable across processes
        self._next_id = 1
        self._sessions: Dict[int, _Session] = {}
        self._subs: Set[_Subscriber] = set()
        self._changed = asyncio.Event()
        self._tasks: Set[asyncio.Task] = set()
        self._seed_writer: Optional[asyncio.StreamWriter] = None
        self._name_waiter: Optional[asyncio.Future] = None
        self._name_lock = asyncio.Lock()
        self._last_seed_beat = time.monotonic()
        self.listeners: List[Callable[[List[tuple]], None]] = []

    # -- shared ------------------------------------------------------------

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    @property
    def display_name(self) -> str:
        return self.name or f"node-{self.node_id}"

    def _apply(self, update: Update) -> None:
        applied = self.members.apply(update)
        if applied:
            self._changed_with([(u.kind, replace(u.record, seq=u.seq)) for u in applied])

    def _reset(self, version: int, records: Iterable[NodeRecord]) -> None:
        before = dict(self.members.records)
        self.members.reset(version, records)
        after = self.members.records
        events = []
        for nid in sorted(set(before) | set(after)):
            old, new = before.get(nid), after.get(nid)
            if old is None:
                events.append((UpdateKind.JOIN, new))
            elif new is None:
                events.append((UpdateKind.LEAVE, old))
            elif old.name != new.name:
                events.append((UpdateKind.NAME, new))
        self._changed_with(events)

    def _changed_with(self, events: List[tuple]) -> None:
        if self.node_id is not None:
            me = self.members.records.get(self.node_id)
            if me is not None:
                self.name = me.name
        self.write_files()
        for kind, rec in events:
            line = event_line(kind, rec)
            for sub in list(self._subs):
                try:
                    sub.queue.put_nowait(line)
                except asyncio.QueueFull:
                    # slow reader: drop it, it must resubscribe for a fresh snapshot
                    self._subs.discard(sub)
                    if sub.task is not None:
                        sub.task.cancel()
                    sub.writer.close()
        for cb in self.listeners:
            cb(events)
        self._changed.set()
        self._changed = asyncio.Event()

    def write_files(self) -> None:
        if not self.dir:
            return
        _write_atomic(os.path.join(self.dir, "hosts"), hosts_text(self.members))
        if self.node_id is not None:
            _write_atomic(os.path.join(self.dir, "self"), f"{self.node_id}\n")

    # -- seed --------------------------------------------------------------

    def start_seed(self, control: OverlayAddr) -> None:
        self.is_seed = True
        self.node_id = 0
        self.overlay_ip = overlay_ip_for(self.cidr, 0)
        self._issue(UpdateKind.JOIN, NodeRecord(0, control, self.overlay_ip, self.name))
        self.join_completed_at = time.time()
        self.join_completed_mono = time.monotonic()
        self._spawn(self._reap_quiet_sessions())

    def _issue(self, kind: UpdateKind, record: NodeRecord) -> Update:
        seq = self.members.version + 1
        update = Update(seq, kind, replace(record, seq=seq))
        self._apply(update)
        for s in list(self._sessions.values()):
            s.send(update)
        return update

    async def serve_session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                            first: proto.Message) -> None:
        """Seed side of a control connection that opened with a coordination frame."""
        if not self.is_seed:
            writer.close()
            return
        if isinstance(first, SnapshotReq):
            writer.write(proto.encode_frame(Snapshot(self.members.version, tuple(self.members.sorted_records()))))
            await writer.drain()
            writer.close()
            return
        if not isinstance(first, JoinReq):
            writer.close()
            return
        session = self._admit(first, writer)
        if session is None:
            await writer.drain()
            writer.close()
            return
        try:
            while True:
                msg = await _read_frame(reader)
                session.last_seen = time.monotonic()
                if isinstance(msg, SnapshotReq):
                    session.send(Snapshot(self.members.version, tuple(self.members.sorted_records())))
                elif isinstance(msg, NameReq):
                    session.send(NameResp(self._rename(session.node_id, msg.name)))
        except (asyncio.IncompleteReadError, ConnectionError, proto.ProtocolError, OSError):
            pass
        finally:
            self._drop_session(session)

    def _admit(self, req: JoinReq, writer: asyncio.StreamWriter) -> Optional[_Session]:
        name = req.name or None
        if name is not None and self.members.resolve(name) is not None:
            writer.write(proto.encode_frame(JoinReject(Status.NAME_CONFLICT, f"name {name} taken")))
            return None
        node_id = self._next_id
        try:
            ip = overlay_ip_for(self.cidr, node_id)
        except BoxerError as exc:
            writer.write(proto.encode_frame(JoinReject(exc.status, str(exc))))
            return None
        self._next_id += 1
        control = req.control
        if control.is_wildcard:
            peer = writer.get_extra_info("peername")
            control = OverlayAddr(peer[0], control.port)
        self._issue(UpdateKind.JOIN, NodeRecord(node_id, control, ip, name))
        session = self._sessions[node_id] = _Session(node_id, writer)
        prefix = int(self.cidr.split("/")[1]) if "/" in self.cidr else 32
        session.send(JoinOk(node_id, ip, prefix, self.members.version, tuple(self.members.sorted_records())))
        return session

    def _rename(self, node_id: int, name: str) -> Status:
        rec = self.members.records.get(node_id)
        if rec is None:
            return Status.NOT_FOUND
        if not name:
            return Status.INVALID_ADDRESS
        holder = self.members.resolve(name)
        if holder is not None and holder != rec.overlay_ip:
            return Status.NAME_CONFLICT
        if rec.name != name:
            self._issue(UpdateKind.NAME, replace(rec, name=name))
        return Status.OK

    def _drop_session(self, session: _Session) -> None:
        if self._sessions.get(session.node_id) is not session:
            return
        del self._sessions[session.node_id]
        session.writer.close()
        rec = self.members.records.get(session.node_id)
        if rec is not None:
            self._issue(UpdateKind.LEAVE, rec)

    async def _reap_quiet_sessions(self) -> None:
        while True:
            await asyncio.sleep(HEARTBEAT_S)
            now = time.monotonic()
            for s in list(self._sessions.values()):
                s.send(Heartbeat(0, self.members.version))
                if now - s.last_seen > LEAVE_AFTER_S:
                    log.info("node %d missed heartbeats, dropping it", s.node_id)
                    self._drop_session(s)

    # -- joiner ------------------------------------------------------------

    async def join(self, seed: OverlayAddr, control: OverlayAddr, attempts: int = JOIN_ATTEMPTS) -> None:
        delay = 0.25
        last_exc: Optional[BaseException] = None
        for attempt in range(attempts):
            try:
                reader, writer = await asyncio.wait_for(asyncio.open_connection(seed.host, seed.port), 2.0)
            except (OSError, asyncio.TimeoutError) as exc:
                last_exc = exc
                if attempt + 1 < attempts:
                    await asyncio.sleep(delay)
                    delay = min(delay * 2, BACKOFF_CAP_S)
                continue
            try:
                writer.write(proto.encode_frame(JoinReq(self.name or "", control)))
                reply = await asyncio.wait_for(_read_frame(reader), 5.0)
            except (OSError, asyncio.IncompleteReadError, asyncio.TimeoutError, proto.ProtocolError) as exc:
                writer.close()
                last_exc = exc
                if attempt + 1 < attempts:
                    await asyncio.sleep(delay)
                    delay = min(delay * 2, BACKOFF_CAP_S)
                continue
            if isinstance(reply, JoinReject):
                writer.close()
                raise BoxerError(reply.status, reply.reason or reply.status.name)
            if not isinstance(reply, JoinOk):
                writer.close()
                raise BoxerError(Status.PROTOCOL_ERROR, f"unexpected {type(reply).__name__} on join")
            self.node_id, self.overlay_ip = reply.node_id, reply.overlay_ip
            self._seed_writer = writer
            self._reset(reply.version, reply.records)
            self.join_completed_at = time.time()
            self.join_completed_mono = time.monotonic()
            self._last_seed_beat = time.monotonic()
            self._spawn(self._follow(reader))
            self._spawn(self._heartbeat())
            return
        raise BoxerError(Status.UNAVAILABLE, f"seed {seed} unreachable after {attempts} attempts: {last_exc}")

    async def _follow(self, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                msg = await _read_frame(reader)
                self._last_seed_beat = time.monotonic()
                if isinstance(msg, Update):
                    self._apply(msg)
                elif isinstance(msg, Snapshot):
                    if msg.version >= self.members.version:
                        self._reset(msg.version, msg.records)
                elif isinstance(msg, NameResp):
                    if self._name_waiter is not None and not self._name_waiter.done():
                        self._name_waiter.set_result(msg.status)
        except (asyncio.IncompleteReadError, ConnectionError, proto.ProtocolError, OSError):
            pass
        self._mark_stale("seed connection closed")

    def _mark_stale(self, why: str) -> None:
        if not self.stale:
            log.warning("membership is stale: %s; serving last known state", why)
        self.stale = True
        if self._name_waiter is not None and not self._name_waiter.done():
            self._name_waiter.set_result(Status.UNAVAILABLE)

    async def _heartbeat(self) -> None:
        while not self.stale:
            await asyncio.sleep(HEARTBEAT_S)
            w = self._seed_writer
            if w is None or w.is_closing():
                self._mark_stale("seed connection closed")
                return
            w.write(proto.encode_frame(Heartbeat(self.node_id, self.members.version)))
            gap = self.members.gap_since
            if gap is not None and time.monotonic() - gap > GAP_REFETCH_S:
                w.write(proto.encode_frame(SnapshotReq(self.node_id)))
                self.members.gap_since = time.monotonic()
            if time.monotonic() - self._last_seed_beat > LEAVE_AFTER_S:
                self._mark_stale("seed missed heartbeats")
                return

    # -- names ---------------------------------------------------------------

    async def request_name(self, name: str, timeout: float = 5.0) -> Status:
        if self.is_seed:
            return self._rename(self.node_id, name)
        if self.stale or self._seed_writer is None:
            return Status.UNAVAILABLE
        async with self._name_lock:
            self._name_waiter = asyncio.get_running_loop().create_future()
            self._seed_writer.write(proto.encode_frame(NameReq(self.node_id, name)))
            try:
                return await asyncio.wait_for(self._name_waiter, timeout)
            except asyncio.TimeoutError:
                return Status.TIMEOUT
            finally:
                self._name_waiter = None

    def resolve(self, name: str) -> Optional[str]:
        return self.members.resolve(name)

    # -- barrier ---------------------------------------------------------------

    def barrier_met(self, count: int = 0, names: Sequence[str] = ()) -> bool:
        if len(self.members.records) < count:
            return False
        return all(self.members.by_name(n) is not None for n in names)

    async def wait_barrier(self, count: int = 0, names: Sequence[str] = (),
                           timeout: float = BARRIER_TIMEOUT_S) -> None:
        deadline = time.monotonic() + timeout
        while not self.barrier_met(count, names):
            left = deadline - time.monotonic()
            if left <= 0:
                missing = [n for n in names if self.members.by_name(n) is None]
                raise BoxerError(Status.TIMEOUT, f"barrier not met after {timeout:g}s: have "
                                 f"{len(self.members.records)}/{count} nodes, missing names {missing}")
            try:
                await asyncio.wait_for(self._changed.wait(), left)
            except asyncio.TimeoutError:
                pass

    # -- coord.sock ------------------------------------------------------------

    async def serve_subscriber(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sub = _Subscriber(writer)
        # snapshot and registration happen in one step so no event slips between
        for line in snapshot_lines(self.members):
            sub.queue.put_nowait(line)
        self._subs.add(sub)
        sub.task = asyncio.current_task()
        try:
            await sub.pump()
        except asyncio.CancelledError:
            pass
        finally:
            self._subs.discard(sub)

    async def close(self) -> None:
        for t in list(self._tasks):
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for s in list(self._sessions.values()):
            s.writer.close()
        if self._seed_writer is not None:
            self._seed_writer.close()
        for sub in list(self._subs):
            sub.writer.close()

    def stats(self) -> dict:
        return {
            "node_id": self.node_id, "overlay_ip": self.overlay_ip, "name": self.name,
            "seed": self.is_seed, "stale": self.stale, "version": self.members.version,
            "members": len(self.members.records), "held_updates": len(self.members.pending),
            "sessions": len(self._sessions), "subscribers": len(self._subs),
        }
