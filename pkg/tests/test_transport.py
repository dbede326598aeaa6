"""Stream establishment between in-process supervisors."""

import asyncio
import hashlib
import random

import pytest

from boxer.netservice import TransportPolicy
from boxer.supervisor import NodeConfig, Supervisor
from boxer.types import OverlayAddr, Status

PORT = 8080


async def cluster(tmp_path, n, policy="direct", **ns_opts):
    local = OverlayAddr("127.0.0.1", 0)
    seed = Supervisor(NodeConfig(str(tmp_path / "n0"), listen=local, transport=TransportPolicy.parse("direct")))
    await seed.start()
    sups = [seed]
    for i in range(1, n):
        cfg = NodeConfig(str(tmp_path / f"n{i}"), seed=seed.control_addr, listen=local,
                         transport=TransportPolicy.parse(policy))
        sup = Supervisor(cfg, **ns_opts)
        await sup.start()
        sups.append(sup)
    for _ in range(200):
        if all(len(s.coord.members.records) == n for s in sups):
            return sups
        await asyncio.sleep(0.01)
    raise AssertionError("membership did not converge")


async def shutdown(sups):
    for s in reversed(sups):
        await s.stop()


def listen(sup, inode=1, port=PORT):
    layer = sup.ns.layer
    layer.register(inode, 1)
    status, addr = layer.bind(inode, OverlayAddr(sup.overlay_ip, port))
    assert status == Status.OK
    assert layer.listen(inode) == Status.OK
    return addr


def take(sup, inode=1):
    status, conn, peer = sup.ns.layer.accept(inode, blocking=False, pid=1)
    assert status == Status.OK, status
    conn.setblocking(False)
    return conn, peer


async def exchange(client, server, payload):
    loop = asyncio.get_running_loop()
    client.setblocking(False)
    await loop.sock_sendall(client, payload)
    got = bytearray()
    while len(got) < len(payload):
        chunk = await loop.sock_recv(server, 65536)
        assert chunk, "stream closed early"
        got += chunk
    await loop.sock_sendall(server, bytes(got))
    back = bytearray()
    while len(back) < len(payload):
        chunk = await loop.sock_recv(client, 65536)
        assert chunk
        back += chunk
    return hashlib.sha256(got).digest(), hashlib.sha256(back).digest()


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 60))


def test_direct_stream_carries_bytes_and_reports_peer(tmp_path):
    async def body():
        sups = await cluster(tmp_path, 2)
        try:
            dest = listen(sups[0])
            status, sock, local = await sups[1].ns.connect(dest)
            assert status == Status.OK
            conn, peer = take(sups[0])
            assert peer == local and peer.host == sups[1].overlay_ip
            want = hashlib.sha256(b"hello").digest()
            assert await exchange(sock, conn, b"hello") == (want, want)
            sock.close(), conn.close()
            assert sups[1].ns.transport.counters["direct"] == 1
        finally:
            await shutdown(sups)
    run(body())


@pytest.mark.parametrize("policy", ["direct", "punch", "proxy:0"])
def test_refusal_is_reported_without_a_stream(tmp_path, policy):
    async def body():
        sups = await cluster(tmp_path, 3, policy)
        try:
            status, sock, _ = await sups[2].ns.connect(OverlayAddr(sups[1].overlay_ip, 9))
            assert status == Status.CONN_REFUSED and sock is None
            status, _, _ = await sups[2].ns.connect(OverlayAddr("10.254.0.9", 9))
            assert status == Status.HOST_UNREACHABLE
        finally:
            await shutdown(sups)
    run(body())


@pytest.mark.parametrize("policy", ["punch", "proxy:0"])
def test_fifty_randomized_trials(tmp_path, policy):
    """Node 2 dials node 1; with proxy the seed (node 0) relays."""
    async def body():
        sups = await cluster(tmp_path, 3, policy)
        rng = random.Random(policy)
        try:
            dest = listen(sups[1])
            for _ in range(50):
                payload = rng.randbytes(rng.randint(1, 200_000))
                status, sock, local = await sups[2].ns.connect(dest)
                assert status == Status.OK
                conn, peer = take(sups[1])
                assert peer == local
                sent, echoed = await exchange(sock, conn, payload)
                assert sent == echoed == hashlib.sha256(payload).digest()
                sock.close(), conn.close()
            c = sups[2].ns.transport.counters
            if policy == "punch":
                assert c["punch_answers"] == 50 and sups[1].ns.transport.counters["punch_delivered"] == 50
            else:
                assert c["relayed"] == 50 and sups[0].ns.transport.counters["relay_spliced"] == 50
            assert sups[1].ns.layer.delivered == 50
        finally:
            await shutdown(sups)
    run(body())


def test_punch_double_success_delivers_once(tmp_path):
    # linger after the first verified stream so the crossing dial verifies too
    async def body():
        sups = await cluster(tmp_path, 2, "punch", punch_select_wait=0.2)
        try:
            dest = listen(sups[0])
            losers = 0
            for _ in range(5):
                status, sock, _ = await sups[1].ns.connect(dest)
                assert status == Status.OK
                conn, _ = take(sups[0])
                payload = b"x" * 1000
                want = hashlib.sha256(payload).digest()
                assert await exchange(sock, conn, payload) == (want, want)
                sock.close(), conn.close()
                await asyncio.sleep(0.4)
                # exactly one stream reached the queue
                assert sups[0].ns.layer.accept(1, blocking=False, pid=1)[0] == Status.WOULD_BLOCK
            c = sups[1].ns.transport.counters
            losers = c["punch_losers_closed"]
            assert c["punch_streams_verified"] == 5 + losers and losers >= 1
            assert sups[0].ns.transport.counters["punch_delivered"] == 5
            assert sups[0].ns.layer.delivered == 5
        finally:
            await shutdown(sups)
    run(body())


def test_relay_to_self_or_target_is_direct(tmp_path):
    async def body():
        sups = await cluster(tmp_path, 2, "proxy:0")
        try:
            dest = listen(sups[0])
            status, sock, _ = await sups[1].ns.connect(dest)
            assert status == Status.OK
            sock.close()
            take(sups[0])[0].close()
            c = sups[1].ns.transport.counters
            assert c["direct"] == 1 and c["relayed"] == 0
        finally:
            await shutdown(sups)
    run(body())
