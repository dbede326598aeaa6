import random

import pytest
from hypothesis import given, settings, strategies as st

from boxer.netservice.socketlayer import EPHEMERAL_PORTS, LISTENING, SocketLayer
from boxer.types import OverlayAddr, Status

IP = "10.77.0.2"
ADDR = OverlayAddr(IP, 8080)
PEER = OverlayAddr("10.77.0.3", 40000)


class Conn:
    closed = False

    def __init__(self, n):
        self.n = n

    def close(self):
        self.closed = True


def layer(**kw):
    signals = []
    sl = SocketLayer(IP, inject_signal=signals.append, pid_alive=lambda pid: pid > 0, **kw)
    sl.signals = signals
    return sl


def listening(sl, inode, addr=ADDR, reuse=False, native_port=None):
    sl.register(inode, 100 + inode)
    assert sl.bind(inode, addr, reuse=reuse)[0] == Status.OK
    assert sl.listen(inode, native_port=native_port) == Status.OK
    return sl.sockets[inode]


def test_bind_variants():
    sl = layer()
    sl.register(1, 10)
    assert sl.bind(1, ADDR) == (Status.OK, ADDR)
    sl.register(2, 10)
    status, got = sl.bind(2, OverlayAddr("0.0.0.0", 0))
    assert status == Status.OK and got.host == IP
    assert EPHEMERAL_PORTS[0] <= got.port <= EPHEMERAL_PORTS[1]
    sl.register(3, 10)
    assert sl.bind(3, OverlayAddr("10.77.0.9", 80))[0] == Status.INVALID_ADDRESS
    assert sl.bind(3, ADDR)[0] == Status.ADDR_IN_USE
    assert sl.bind(99, ADDR)[0] == Status.INVALID_SOCKET


def test_listen_rules_and_shared_queue():
    sl = layer()
    sl.register(1, 10)
    assert sl.listen(1) == Status.INVALID_STATE
    a = listening(sl, 2, reuse=True)
    assert len(sl.queues) == 1
    b = listening(sl, 3, reuse=True)
    assert len(sl.queues) == 1 and a.queue is b.queue
    assert sl.listen(2) == Status.OK and a.state == LISTENING
    assert sl.stats()["queues"][str(ADDR)]["listeners"] == [2, 3]


def test_nonblocking_accept_on_empty_queue():
    sl = layer()
    listening(sl, 1)
    assert sl.accept(1, blocking=False)[0] == Status.WOULD_BLOCK


def test_two_parked_waiters_each_get_one_connection():
    sl = layer()
    listening(sl, 1)
    got = []
    for pid in (1, 2):
        status, waiter, _ = sl.accept(1, True, pid, lambda s, c, p, pid=pid: got.append((pid, c)) or True)
        assert status is None and waiter is not None
    c1, c2 = Conn(1), Conn(2)
    assert sl.deliver(c1, ADDR, PEER) == Status.OK
    assert sl.deliver(c2, ADDR, PEER) == Status.OK
    assert got == [(1, c1), (2, c2)]
    assert not sl.queues[ADDR].ready and sl.signals == []


def test_delivery_without_waiter_queues_and_signals_once():
    sl = layer()
    rec = listening(sl, 1, native_port=5555)
    sl.deliver(Conn(1), ADDR, PEER)
    sl.deliver(Conn(2), ADDR, PEER)
    assert len(sl.queues[ADDR].ready) == 2
    # one outstanding signal per record
    assert sl.signals == [rec]
    status, conn, peer = sl.accept(1, False)
    assert status == Status.OK and conn.n == 1 and peer == PEER
    # still one queued: the next signal is armed again
    assert sl.signals == [rec, rec]


def test_refused_when_nothing_listens_or_queue_full():
    sl = layer(queue_cap=2)
    assert sl.deliver(Conn(0), ADDR, PEER) == Status.CONN_REFUSED
    listening(sl, 1)
    assert sl.deliver(Conn(1), ADDR, PEER) == Status.OK
    assert sl.deliver(Conn(2), ADDR, PEER) == Status.OK
    assert sl.deliver(Conn(3), ADDR, PEER) == Status.CONN_REFUSED
    assert sl.refused == 2


def test_close_wakes_parked_waiter_and_drops_queue():
    sl = layer()
    listening(sl, 1)
    out = []
    sl.accept(1, True, 101, lambda s, c, p: out.append(s) or True)
    queued = Conn(9)
    sl.register(2, 102)
    sl.bind(2, OverlayAddr(IP, 9090))
    sl.listen(2)
    sl.deliver(queued, OverlayAddr(IP, 9090), PEER)
    assert sl.close(1, 101) == Status.OK
    assert out == [Status.CLOSED] and ADDR not in sl.queues
    sl.close(2, 102)
    assert queued.closed and not sl.queues
    assert sl.close(1, 101) == Status.INVALID_SOCKET


def test_gone_waiter_passes_connection_on():
    sl = layer()
    listening(sl, 1)
    sl.accept(1, True, 1, lambda s, c, p: False)
    c = Conn(1)
    sl.deliver(c, ADDR, PEER)
    assert list(sl.queues[ADDR].ready) == [(c, PEER)]


def stress(seed, n=100, listeners=3):
    """n deliveries against n accepts in a random interleaving; returns delivery counts."""
    rng = random.Random(seed)
    sl = layer()
    inodes = list(range(1, listeners + 1))
    for i in inodes:
        listening(sl, i, reuse=True, native_port=6000 + i)
    received = {}

    def take(conn):
        received[conn.n] = received.get(conn.n, 0) + 1

    ops = ["d"] * n + ["a"] * n
    rng.shuffle(ops)
    pending = 0  # parked waiters still owed a connection
    sent = 0
    for op in ops:
        if op == "d":
            assert sl.deliver(Conn(sent), ADDR, PEER) == Status.OK
            sent += 1
        else:
            inode = rng.choice(inodes)
            status, x, _ = sl.accept(inode, rng.random() < 0.7, 100 + inode,
                                     lambda s, c, p: take(c) or True)
            if status == Status.OK:
                take(x)
            elif status is None:
                pending += 1
            else:
                assert status == Status.WOULD_BLOCK
                # a non-blocking miss retries later, like a guest after EAGAIN
                ops.append("a")
    # everything still queued is drained by late accepts
    while sl.queues[ADDR].ready:
        status, conn, _ = sl.accept(inodes[0], False)
        take(conn)
    return received, sent


@pytest.mark.parametrize("seed", range(5))
def test_exactly_once_stress_100x100(seed):
    received, sent = stress(seed)
    assert sent == 100
    assert sorted(received) == list(range(100))
    assert set(received.values()) == {1}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 60), st.integers(1, 4))
def test_exactly_once_property(seed, n, listeners):
    received, sent = stress(seed, n, listeners)
    assert sorted(received) == list(range(sent)) and set(received.values()) == {1}
