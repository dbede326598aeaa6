"""Wire format for service connections and the control network.

Every message travels in one frame::

    length (u32, big endian) | kind (u8) | body

``length`` counts the kind byte plus the body. Bodies are a fixed sequence
of fields in network byte order; there is no self-description, so the field
list on each message class *is* the schema. Descriptors never appear in a
body; they ride in SCM_RIGHTS ancillary data next to the frame.
"""

from __future__ import annotations

import array
import socket
import struct
from dataclasses import dataclass, field, fields
from typing import ClassVar, Dict, List, Optional, Tuple, Type, Union

from .types import NodeRecord, OverlayAddr, Status, UpdateKind

FRAME_CAP = 16 * 1024 * 1024  # max body size in bytes
HEADER = struct.Struct("!IB")


class ProtocolError(Exception):
    pass


class OversizeError(ProtocolError):
    pass


class NeedMoreData:
    """Sentinel returned by :func:`decode_frame` on incomplete input."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NeedMoreData"

    def __bool__(self):
        return False


NEED_MORE = NeedMoreData()


# -- field codecs -----------------------------------------------------------

def _ip_to_int(ip: str) -> int:
    try:
        return _U32.unpack(socket.inet_pton(socket.AF_INET, ip))[0]
    except (OSError, TypeError):
        raise ValueError(f"not an IPv4 address: {ip!r}") from None


def _int_to_ip(n: int) -> str:
    return socket.inet_ntoa(_U32.pack(n))


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise ProtocolError("truncated message body")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


_U8 = struct.Struct("!B")
_U16 = struct.Struct("!H")
_U32 = struct.Struct("!I")
_U64 = struct.Struct("!Q")
_ADDR = struct.Struct("!IH")
_RECORD_HEAD = struct.Struct("!QIHIQ")


def _put(kind: str, value, out: bytearray) -> None:
    if kind == "u8":
        out += _U8.pack(int(value))
    elif kind == "u16":
        out += _U16.pack(value)
    elif kind == "u32":
        out += _U32.pack(value)
    elif kind == "u64":
        out += _U64.pack(value)
    elif kind == "ip":
        out += _U32.pack(_ip_to_int(value))
    elif kind == "addr":
        out += _ADDR.pack(_ip_to_int(value.host), value.port)
    elif kind == "str":
        raw = value.encode()
        if len(raw) > 0xFFFF:
            raise OversizeError("string field longer than 65535 bytes")
        out += _U16.pack(len(raw)) + raw
    elif kind == "ips":
        if len(value) > 0xFF:
            raise OversizeError("too many addresses")
        out += _U8.pack(len(value))
        for ip in value:
            out += _U32.pack(_ip_to_int(ip))
    elif kind == "record":
        _put_record(value, out)
    elif kind == "records":
        out += _U32.pack(len(value))
        for rec in value:
            _put_record(rec, out)
    elif kind == "blob":
        out += _U32.pack(len(value)) + bytes(value)
    else:  # pragma: no cover - schema typo
        raise AssertionError(kind)


def _put_record(rec: NodeRecord, out: bytearray) -> None:
    out += _RECORD_HEAD.pack(rec.node_id, _ip_to_int(rec.control.host), rec.control.port,
                             _ip_to_int(rec.overlay_ip), rec.seq)
    _put("str", rec.name or "", out)


def _get(kind: str, r: _Reader):
    if kind == "u8":
        return r.unpack(_U8)[0]
    if kind == "u16":
        return r.unpack(_U16)[0]
    if kind == "u32":
        return r.unpack(_U32)[0]
    if kind == "u64":
        return r.unpack(_U64)[0]
    if kind == "ip":
        return _int_to_ip(r.unpack(_U32)[0])
    if kind == "addr":
        ip, port = r.unpack(_ADDR)
        return OverlayAddr(_int_to_ip(ip), port)
    if kind == "str":
        (n,) = r.unpack(_U16)
        try:
            return r.take(n).decode()
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"bad utf-8 in string field: {exc}") from None
    if kind == "ips":
        (n,) = r.unpack(_U8)
        return tuple(_int_to_ip(r.unpack(_U32)[0]) for _ in range(n))
    if kind == "record":
        return _get_record(r)
    if kind == "records":
        (n,) = r.unpack(_U32)
        return tuple(_get_record(r) for _ in range(n))
    if kind == "blob":
        (n,) = r.unpack(_U32)
        return r.take(n)
    raise AssertionError(kind)  # pragma: no cover


def _get_record(r: _Reader) -> NodeRecord:
    node_id, cip, cport, oip, seq = r.unpack(_RECORD_HEAD)
    name = _get("str", r) or None
    return NodeRecord(node_id, OverlayAddr(_int_to_ip(cip), cport), _int_to_ip(oip), name, seq)


# -- message registry -------------------------------------------------------

REGISTRY: Dict[int, Type["Message"]] = {}


def message(kind: int):
    def register(cls):
        if kind in REGISTRY:
            raise AssertionError(f"duplicate kind 0x{kind:02x}")
        cls.KIND = kind
        REGISTRY[kind] = cls
        return cls
    return register


_FIXED = {"u8": "B", "u16": "H", "u32": "I", "u64": "Q", "ip": "4s", "addr": "4sH"}


def _compile(cls) -> None:
    """Precompute field names and, for fixed-size schemas, one Struct for the whole body."""
    cls._names = tuple(f.name for f in fields(cls))
    cls._struct = None
    if all(k in _FIXED for k in cls.SCHEMA):
        cls._struct = struct.Struct("!" + "".join(_FIXED[k] for k in cls.SCHEMA))


def _pton(ip: str) -> bytes:
    try:
        return socket.inet_pton(socket.AF_INET, ip)
    except (OSError, TypeError):
        raise ValueError(f"not an IPv4 address: {ip!r}") from None


class Message:
    KIND: ClassVar[int]
    SCHEMA: ClassVar[Tuple[str, ...]] = ()

    def encode_body(self) -> bytes:
        cls = type(self)
        if "_names" not in cls.__dict__:
            _compile(cls)
        if cls._struct is None:
            out = bytearray()
            for name, kind in zip(cls._names, self.SCHEMA):
                _put(kind, getattr(self, name), out)
            return bytes(out)
        flat = []
        for name, kind in zip(cls._names, self.SCHEMA):
            v = getattr(self, name)
            if kind == "addr":
                flat += (_pton(v.host), v.port)
            elif kind == "ip":
                flat.append(_pton(v))
            else:
                flat.append(int(v))
        return cls._struct.pack(*flat)

    @classmethod
    def decode_body(cls, body: bytes) -> "Message":
        if "_names" not in cls.__dict__:
            _compile(cls)
        st = cls._struct
        if st is None:
            r = _Reader(body)
            values = [_get(kind, r) for kind in cls.SCHEMA]
            if r.pos != len(body):
                raise ProtocolError(f"{cls.__name__}: {len(body) - r.pos} trailing bytes")
            return cls(*values)
        if len(body) != st.size:
            if len(body) < st.size:
                raise ProtocolError("truncated message body")
            raise ProtocolError(f"{cls.__name__}: {len(body) - st.size} trailing bytes")
        raw = st.unpack(body)
        values = []
        i = 0
        for kind in cls.SCHEMA:
            if kind == "addr":
                values.append(OverlayAddr(socket.inet_ntoa(raw[i]), raw[i + 1]))
                i += 2
            elif kind == "ip":
                values.append(socket.inet_ntoa(raw[i]))
                i += 1
            else:
                values.append(raw[i])
                i += 1
        return cls(*values)


# Service requests (process monitor -> supervisor). Field order is the wire order.

@message(0x01)
@dataclass(frozen=True)
class Register(Message):
    inode: int
    SCHEMA = ("u64",)


@message(0x02)
@dataclass(frozen=True)
class Bind(Message):
    inode: int
    addr: OverlayAddr
    flags: int = 0  # BIND_REUSEPORT
    SCHEMA = ("u64", "addr", "u8")


BIND_REUSEPORT = 0x01


@message(0x03)
@dataclass(frozen=True)
class Listen(Message):
    inode: int
    backlog: int
    SCHEMA = ("u64", "u32")


@message(0x04)
@dataclass(frozen=True)
class Accept(Message):
    inode: int
    blocking: bool
    SCHEMA = ("u64", "u8")

    def __post_init__(self):
        object.__setattr__(self, "blocking", bool(self.blocking))


@message(0x05)
@dataclass(frozen=True)
class Connect(Message):
    inode: int
    dest: OverlayAddr
    blocking: bool
    SCHEMA = ("u64", "addr", "u8")

    def __post_init__(self):
        object.__setattr__(self, "blocking", bool(self.blocking))


@message(0x06)
@dataclass(frozen=True)
class NameLookup(Message):
    name: str
    SCHEMA = ("str",)


@message(0x07)
@dataclass(frozen=True)
class Uname(Message):
    SCHEMA = ()


@message(0x08)
@dataclass(frozen=True)
class PathRemap(Message):
    path: str
    SCHEMA = ("str",)


@message(0x09)
@dataclass(frozen=True)
class CloseNotify(Message):
    inode: int
    SCHEMA = ("u64",)


# Service responses. Each request kind K answers with kind K | 0x40.

@message(0x41)
@dataclass(frozen=True)
class RegisterResp(Message):
    status: Status
    SCHEMA = ("u8",)


@message(0x42)
@dataclass(frozen=True)
class BindResp(Message):
    status: Status
    addr: OverlayAddr = OverlayAddr("0.0.0.0", 0)
    SCHEMA = ("u8", "addr")


@message(0x43)
@dataclass(frozen=True)
class ListenResp(Message):
    status: Status
    SCHEMA = ("u8",)


@message(0x44)
@dataclass(frozen=True)
class AcceptResp(Message):
    """On OK the accepted stream travels as the frame's ancillary descriptor."""

    status: Status
    peer: OverlayAddr = OverlayAddr("0.0.0.0", 0)
    SCHEMA = ("u8", "addr")


@message(0x45)
@dataclass(frozen=True)
class ConnectResp(Message):
    """On OK the connected stream travels as the frame's ancillary descriptor."""

    status: Status
    local: OverlayAddr = OverlayAddr("0.0.0.0", 0)
    SCHEMA = ("u8", "addr")


@message(0x46)
@dataclass(frozen=True)
class NameLookupResp(Message):
    status: Status
    addrs: Tuple[str, ...] = ()
    SCHEMA = ("u8", "ips")


@message(0x47)
@dataclass(frozen=True)
class UnameResp(Message):
    status: Status
    nodename: str = ""
    SCHEMA = ("u8", "str")


@message(0x48)
@dataclass(frozen=True)
class PathRemapResp(Message):
    status: Status
    path: str = ""
    SCHEMA = ("u8", "str")


@message(0x49)
@dataclass(frozen=True)
class CloseNotifyResp(Message):
    status: Status
    SCHEMA = ("u8",)


REQUESTS = (Register, Bind, Listen, Accept, Connect, NameLookup, Uname, PathRemap, CloseNotify)
RESPONSE_FOR = {req: REGISTRY[req.KIND | 0x40] for req in REQUESTS}


# Control network (supervisor <-> supervisor).

@message(0x80)
@dataclass(frozen=True)
class JoinReq(Message):
    name: str  # empty: no name
    control: OverlayAddr
    SCHEMA = ("str", "addr")


@message(0x81)
@dataclass(frozen=True)
class JoinOk(Message):
    node_id: int
    overlay_ip: str
    cidr_prefix: int
    version: int
    records: Tuple[NodeRecord, ...]
    SCHEMA = ("u64", "ip", "u8", "u64", "records")


@message(0x82)
@dataclass(frozen=True)
class JoinReject(Message):
    status: Status
    reason: str = ""
    SCHEMA = ("u8", "str")


@message(0x83)
@dataclass(frozen=True)
class Update(Message):
    """One sequenced membership change issued by the seed."""

    seq: int
    kind: UpdateKind
    record: NodeRecord
    SCHEMA = ("u64", "u8", "record")

    def __post_init__(self):
        object.__setattr__(self, "kind", UpdateKind(self.kind))


@message(0x84)
@dataclass(frozen=True)
class Heartbeat(Message):
    node_id: int
    version: int
    SCHEMA = ("u64", "u64")


@message(0x85)
@dataclass(frozen=True)
class SnapshotReq(Message):
    node_id: int
    SCHEMA = ("u64",)


@message(0x86)
@dataclass(frozen=True)
class Snapshot(Message):
    version: int
    records: Tuple[NodeRecord, ...]
    SCHEMA = ("u64", "records")


@message(0x87)
@dataclass(frozen=True)
class PunchOffer(Message):
    nonce: int
    initiator: int
    responder: int
    initiator_ep: OverlayAddr
    dest: OverlayAddr  # overlay address the stream is for
    SCHEMA = ("u64", "u64", "u64", "addr", "addr")


@message(0x88)
@dataclass(frozen=True)
class PunchAnswer(Message):
    nonce: int
    status: Status
    responder_ep: OverlayAddr
    SCHEMA = ("u64", "u8", "addr")


@message(0x89)
@dataclass(frozen=True)
class TransportHello(Message):
    nonce: int
    mode: int  # MODE_*
    src: OverlayAddr
    dest: OverlayAddr
    target: int = 0  # relay target node id (MODE_RELAY only)
    SCHEMA = ("u64", "u8", "addr", "addr", "u64")


MODE_DIRECT = 1
MODE_PUNCH = 2
MODE_RELAY = 3


@message(0x8A)
@dataclass(frozen=True)
class TransportStatus(Message):
    status: Status
    SCHEMA = ("u8",)


@message(0x8B)
@dataclass(frozen=True)
class PunchSelect(Message):
    nonce: int
    selected: bool
    SCHEMA = ("u64", "u8")

    def __post_init__(self):
        object.__setattr__(self, "selected", bool(self.selected))


@message(0x8C)
@dataclass(frozen=True)
class NameReq(Message):
    node_id: int
    name: str
    SCHEMA = ("u64", "str")


@message(0x8D)
@dataclass(frozen=True)
class NameResp(Message):
    status: Status
    SCHEMA = ("u8",)


def _coerce_status(msg: Message) -> Message:
    if hasattr(msg, "status") and not isinstance(msg.status, Status):
        object.__setattr__(msg, "status", Status(msg.status))
    return msg


# -- framing ----------------------------------------------------------------

def encode_frame(msg: Message) -> bytes:
    body = msg.encode_body()
    if len(body) > FRAME_CAP:
        raise OversizeError(f"body of {len(body)} bytes exceeds the {FRAME_CAP} byte cap")
    return HEADER.pack(len(body) + 1, msg.KIND) + body


def encode_raw(kind: int, body: bytes) -> bytes:
    """Frame an already serialized body."""
    if len(body) > FRAME_CAP:
        raise OversizeError(f"body of {len(body)} bytes exceeds the {FRAME_CAP} byte cap")
    return HEADER.pack(len(body) + 1, kind) + body


def frame_length(prefix: bytes) -> Optional[int]:
    """Total frame size announced by ``prefix``, or None if under 4 bytes."""
    if len(prefix) < 4:
        return None
    (length,) = _U32.unpack_from(prefix)
    if length == 0 or length > FRAME_CAP + 1:
        raise ProtocolError(f"frame length {length} out of range")
    return 4 + length


def decode_frame(buf: Union[bytes, bytearray, memoryview]) -> Union[Tuple[Message, bytes], NeedMoreData]:
    """Decode one frame from the front of ``buf``.

    Returns ``(message, remaining)`` or :data:`NEED_MORE`.
    """
    buf = bytes(buf)
    total = frame_length(buf)
    if total is None or len(buf) < total:
        return NEED_MORE
    kind = buf[4]
    cls = REGISTRY.get(kind)
    if cls is None:
        raise ProtocolError(f"unknown message kind 0x{kind:02x}")
    try:
        msg = cls.decode_body(buf[5:total])
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"{cls.__name__}: {exc}") from None
    return _coerce_status(msg), buf[total:]


class FrameBuffer:
    """Incremental decoder; feed bytes, pop complete messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def pop(self) -> Optional[Message]:
        total = frame_length(self._buf)
        if total is None or len(self._buf) < total:
            return None
        out = decode_frame(self._buf[:total])
        del self._buf[:total]
        return out[0]

    def __len__(self):
        return len(self._buf)


# -- socket helpers ---------------------------------------------------------

def send_msg(sock: socket.socket, msg: Message, fd: Optional[int] = None) -> None:
    """Send one frame, optionally with a descriptor attached, on a blocking socket."""
    data = encode_frame(msg)
    if fd is None:
        sock.sendall(data)
        return
    anc = [(socket.SOL_SOCKET, socket.SCM_RIGHTS, array.array("i", [fd]).tobytes())]
    sent = sock.sendmsg([data], anc)
    if sent < len(data):
        sock.sendall(data[sent:])


def recv_exact(sock: socket.socket, n: int) -> bytes:
    out = bytearray()
    while len(out) < n:
        chunk = sock.recv(n - len(out))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        out += chunk
    return bytes(out)


def recv_msg(sock: socket.socket, with_fds: bool = False):
    """Read exactly one frame from a blocking socket without over-reading.

    With ``with_fds`` returns ``(message, [fds])``.
    """
    fds: List[int] = []
    if with_fds:
        data, anc, _flags, _addr = sock.recvmsg(4, socket.CMSG_SPACE(4 * 4))
        fds.extend(_fds_from_ancillary(anc))
        if not data:
            raise ConnectionError("peer closed")
        head = data + recv_exact(sock, 4 - len(data)) if len(data) < 4 else data
    else:
        head = recv_exact(sock, 4)
    total = frame_length(head)
    rest = recv_exact(sock, total - 4)
    msg, _ = decode_frame(head + rest)
    if with_fds:
        return msg, fds
    return msg


def _fds_from_ancillary(anc) -> List[int]:
    fds: List[int] = []
    for level, type_, data in anc:
        if level == socket.SOL_SOCKET and type_ == socket.SCM_RIGHTS:
            arr = array.array("i")
            arr.frombytes(data[: len(data) - (len(data) % arr.itemsize)])
            fds.extend(arr)
    return fds


def golden_instances() -> List[Message]:
    """One fixed instance of every registered variant, used for byte fixtures."""
    a = OverlayAddr("10.77.0.2", 8080)
    rec = NodeRecord(1, OverlayAddr("127.0.0.1", 7701), "10.77.0.2", "nginx-thrift", 2)
    rec0 = NodeRecord(0, OverlayAddr("127.0.0.1", 7700), "10.77.0.1", None, 1)
    return [
        Register(0x1122334455667788),
        Bind(42, OverlayAddr("0.0.0.0", 8080), BIND_REUSEPORT),
        Listen(42, 128),
        Accept(7, True),
        Connect(43, a, False),
        NameLookup("nginx-thrift"),
        Uname(),
        PathRemap("/etc/resolv.conf"),
        CloseNotify(42),
        RegisterResp(Status.OK),
        BindResp(Status.OK, a),
        ListenResp(Status.INVALID_STATE),
        AcceptResp(Status.OK, OverlayAddr("10.77.0.3", 40000)),
        ConnectResp(Status.CONN_REFUSED),
        NameLookupResp(Status.OK, ("10.77.0.2",)),
        UnameResp(Status.OK, "node-1"),
        PathRemapResp(Status.OK, "/tmp/boxer/resolv.conf"),
        CloseNotifyResp(Status.OK),
        JoinReq("zk-3", OverlayAddr("127.0.0.1", 7702)),
        JoinOk(1, "10.77.0.2", 16, 2, (rec0, rec)),
        JoinReject(Status.NAME_CONFLICT, "name zk-3 taken"),
        Update(2, UpdateKind.JOIN, rec),
        Heartbeat(1, 2),
        SnapshotReq(1),
        Snapshot(2, (rec0, rec)),
        PunchOffer(0xDEADBEEF, 1, 2, OverlayAddr("127.0.0.1", 50001), a),
        PunchAnswer(0xDEADBEEF, Status.OK, OverlayAddr("127.0.0.1", 50002)),
        TransportHello(0xDEADBEEF, MODE_RELAY, OverlayAddr("10.77.0.3", 0), a, 1),
        TransportStatus(Status.OK),
        PunchSelect(0xDEADBEEF, True),
        NameReq(1, "memcached-1"),
        NameResp(Status.OK),
    ]
