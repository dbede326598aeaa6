import random

from hypothesis import given, settings, strategies as st

from boxer.coord.membership import MembershipSet, event_line, hosts_text, snapshot_lines
from boxer.proto import Update
from boxer.types import NodeRecord, OverlayAddr, UpdateKind, overlay_ip_for

CIDR = "10.77.0.0/16"


def rec(node_id, name=None):
    return NodeRecord(node_id, OverlayAddr("127.0.0.1", 7700 + node_id), overlay_ip_for(CIDR, node_id), name)


def random_log(rng, length=20):
    """A valid seed-ordered log: joins, leaves and renames of live nodes."""
    live, next_id, log = {}, 0, []
    for seq in range(1, length + 1):
        choice = rng.random()
        if not live or choice < 0.5:
            r = rec(next_id, rng.choice([None, f"svc-{next_id}"]))
            live[next_id] = r
            next_id += 1
            log.append(Update(seq, UpdateKind.JOIN, r))
        elif choice < 0.75:
            nid = rng.choice(sorted(live))
            log.append(Update(seq, UpdateKind.LEAVE, live.pop(nid)))
        else:
            nid = rng.choice(sorted(live))
            live[nid] = NodeRecord(nid, live[nid].control, live[nid].overlay_ip, f"renamed-{seq}")
            log.append(Update(seq, UpdateKind.NAME, live[nid]))
    return log


def fold(log):
    """Independent in-order evaluation with plain dict operations."""
    state = {}
    for u in sorted(log, key=lambda u: u.seq):
        r = u.record
        if u.kind == UpdateKind.LEAVE:
            state.pop(r.node_id, None)
        else:
            state[r.node_id] = NodeRecord(r.node_id, r.control, r.overlay_ip, r.name, u.seq)
    return state


def test_hundred_permutations_of_a_twenty_update_log_agree():
    rng = random.Random(99)
    log = random_log(rng)
    reference = MembershipSet()
    for u in log:
        reference.apply(u)
    assert reference.records == fold(log) and reference.version == 20
    for _ in range(100):
        order = log[:]
        rng.shuffle(order)
        m = MembershipSet()
        for u in order:
            m.apply(u)
        assert not m.has_gap
        assert m.canonical_bytes() == reference.canonical_bytes()


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 30))
def test_any_delivery_order_with_duplicates_is_deterministic(rng, n):
    log = random_log(rng, n)
    order = log + [rng.choice(log) for _ in range(n // 2)]
    rng.shuffle(order)
    m = MembershipSet()
    for u in order:
        m.apply(u)
    assert m.version == n and m.records == fold(log)


def test_held_update_waits_for_its_predecessor():
    m = MembershipSet()
    a, b = Update(1, UpdateKind.JOIN, rec(0)), Update(2, UpdateKind.JOIN, rec(1, "zk-3"))
    assert m.apply(b) == [] and m.has_gap and m.gap_since is not None
    assert m.apply(a) == [a, b]
    assert not m.has_gap and m.version == 2
    assert m.apply(a) == [] and m.version == 2


def test_reset_keeps_newer_held_updates():
    m = MembershipSet()
    m.apply(Update(4, UpdateKind.JOIN, rec(3)))
    m.reset(3, [rec(0), rec(1), rec(2)])
    assert m.version == 4 and sorted(m.records) == [0, 1, 2, 3]


def test_resolution():
    m = MembershipSet()
    m.apply(Update(1, UpdateKind.JOIN, rec(0)))
    m.apply(Update(2, UpdateKind.JOIN, rec(3, "memcached-1")))
    assert m.resolve("node-0") == "10.77.0.1"
    assert m.resolve("memcached-1") == "10.77.0.4"
    assert m.resolve("node-3") == "10.77.0.4"
    assert m.resolve("memcached-1.") == "10.77.0.4"
    assert m.resolve("absent-name") is None
    assert m.resolve("node-9") is None


def test_hosts_file_lines_sorted_with_placeholder():
    m = MembershipSet()
    for seq, r in enumerate([rec(2, "c"), rec(0), rec(1, "b")], 1):
        m.apply(Update(seq, UpdateKind.JOIN, r))
    assert hosts_text(m) == "10.77.0.1 - 0\n10.77.0.2 b 1\n10.77.0.3 c 2\n"
    assert snapshot_lines(m)[0] == "EVENT join 0 10.77.0.1 -\n"
    assert event_line(UpdateKind.LEAVE, rec(1, "b")) == "EVENT leave 1 10.77.0.2 b\n"


def test_overlay_allocation_rule():
    assert overlay_ip_for(CIDR, 0) == "10.77.0.1"
    assert overlay_ip_for(CIDR, 1) == "10.77.0.2"
    assert overlay_ip_for("10.0.0.0/30", 1) == "10.0.0.2"
