"""Value types shared by the wire protocol, the supervisor and the coordinator."""

from __future__ import annotations

import enum
import errno
import ipaddress
import socket
from dataclasses import dataclass
from typing import Optional

WILDCARD = "0.0.0.0"

# Source address the supervisor uses for signal connections. Nothing else
# on the node may originate connections from it.
SIGNAL_PEER_ADDR = "127.77.77.77"

DEFAULT_OVERLAY_CIDR = "10.77.0.0/16"


class Status(enum.IntEnum):
    """Result codes carried by every service response."""

    OK = 0
    WOULD_BLOCK = 1
    ADDR_IN_USE = 2
    INVALID_SOCKET = 3
    INVALID_STATE = 4
    INVALID_ADDRESS = 5
    CONN_REFUSED = 6
    HOST_UNREACHABLE = 7
    TIMEOUT = 8
    CLOSED = 9
    NOT_FOUND = 10
    PROTOCOL_ERROR = 11
    UNAVAILABLE = 12
    NAME_CONFLICT = 13
    EXHAUSTED = 14


# errno the process monitor reports for each status; kept in sync with
# status_errno() in shim.c.
STATUS_ERRNO = {
    Status.OK: 0,
    Status.WOULD_BLOCK: errno.EAGAIN,
    Status.ADDR_IN_USE: errno.EADDRINUSE,
    Status.INVALID_SOCKET: errno.ENOTSOCK,
    Status.INVALID_STATE: errno.EINVAL,
    Status.INVALID_ADDRESS: errno.EADDRNOTAVAIL,
    Status.CONN_REFUSED: errno.ECONNREFUSED,
    Status.HOST_UNREACHABLE: errno.EHOSTUNREACH,
    Status.TIMEOUT: errno.ETIMEDOUT,
    Status.CLOSED: errno.EINVAL,
    Status.NOT_FOUND: errno.ENOENT,
    Status.PROTOCOL_ERROR: errno.EPROTO,
    Status.UNAVAILABLE: errno.ECONNRESET,
    Status.NAME_CONFLICT: errno.EEXIST,
    Status.EXHAUSTED: errno.ENOSPC,
}


class BoxerError(Exception):
    """Error carrying a protocol status."""

    def __init__(self, status: Status, message: str = ""):
        super().__init__(message or status.name)
        self.status = Status(status)


@dataclass(frozen=True, order=True)
class OverlayAddr:
    host: str
    port: int

    def __post_init__(self):
        try:
            socket.inet_pton(socket.AF_INET, self.host)
        except (OSError, TypeError):
            raise ValueError(f"not an IPv4 address: {self.host!r}") from None
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")

    @property
    def is_wildcard(self) -> bool:
        return self.host == WILDCARD

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "OverlayAddr":
        host, _, port = text.rpartition(":")
        return cls(host, int(port))


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    control: OverlayAddr  # real address of the node's supervisor
    overlay_ip: str
    name: Optional[str] = None
    seq: int = 0

    @property
    def display_name(self) -> str:
        return self.name or "-"


class UpdateKind(enum.IntEnum):
    JOIN = 1
    LEAVE = 2
    NAME = 3


def overlay_ip_for(cidr: str, node_id: int) -> str:
    """Overlay address of ``node_id``: host part is node id + 1."""
    net = ipaddress.IPv4Network(cidr)
    host = node_id + 1
    # network and broadcast addresses are never handed out
    if host >= net.num_addresses - 1:
        raise BoxerError(Status.EXHAUSTED, f"{cidr} has no address for node {node_id}")
    return str(net.network_address + host)


def node_id_for(cidr: str, ip: str) -> Optional[int]:
    net = ipaddress.IPv4Network(cidr)
    addr = ipaddress.IPv4Address(ip)
    if addr not in net:
        return None
    host = int(addr) - int(net.network_address)
    if host < 1 or host >= net.num_addresses - 1:
        return None
    return host - 1


def in_cidr(cidr: str, ip: str) -> bool:
    try:
        return ipaddress.IPv4Address(ip) in ipaddress.IPv4Network(cidr)
    except ValueError:
        return False
