"""Exact-read framing over raw non-blocking sockets.

Sockets that end up in guest hands must never be read past the last
control frame, so these helpers only ever ask the kernel for the bytes
the current frame still needs.
"""

from __future__ import annotations

import asyncio
import socket
from typing import Optional, Tuple

from . import proto


async def recv_exact(sock: socket.socket, n: int) -> bytes:
    loop = asyncio.get_running_loop()
    out = bytearray()
    while len(out) < n:
        chunk = await loop.sock_recv(sock, n - len(out))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        out += chunk
    return bytes(out)


async def read_msg(sock: socket.socket) -> proto.Message:
    head = await recv_exact(sock, 4)
    total = proto.frame_length(head)
    rest = await recv_exact(sock, total - 4)
    msg, _ = proto.decode_frame(head + rest)
    return msg


async def write_msg(sock: socket.socket, msg: proto.Message) -> None:
    await asyncio.get_running_loop().sock_sendall(sock, proto.encode_frame(msg))


def send_now(sock: socket.socket, msg: proto.Message) -> bool:
    """Write a small frame without yielding; False if the kernel took less."""
    data = proto.encode_frame(msg)
    try:
        return sock.send(data) == len(data)
    except OSError:
        return False


async def dial(host: str, port: int, source: Optional[Tuple[str, int]] = None) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setblocking(False)
    try:
        if source is not None:
            sock.bind(source)
        await asyncio.get_running_loop().sock_connect(sock, (host, port))
    except BaseException:
        sock.close()
        raise
    return sock


def listener(host: str, port: int = 0, backlog: int = 64) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.setblocking(False)
    try:
        sock.bind((host, port))
        sock.listen(backlog)
    except BaseException:
        sock.close()
        raise
    return sock


async def splice(a: socket.socket, b: socket.socket, bufsize: int = 1 << 16) -> int:
    """Copy bytes both ways until both directions hit EOF; returns bytes moved."""
    loop = asyncio.get_running_loop()
    moved = 0

    async def pump(src: socket.socket, dst: socket.socket):
        nonlocal moved
        while True:
            data = await loop.sock_recv(src, bufsize)
            if not data:
                try:
                    dst.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                return
            await loop.sock_sendall(dst, data)
            moved += len(data)

    tasks = [asyncio.ensure_future(pump(a, b)), asyncio.ensure_future(pump(b, a))]
    try:
        # one side failing tears down both
        done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
        for t in done:
            t.exception()
    finally:
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        a.close()
        b.close()
    return moved
