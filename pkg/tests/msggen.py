"""Random instances of every wire message, driven by each class's schema."""

import random
import socket
import struct
from dataclasses import fields

from boxer import proto
from boxer.types import NodeRecord, OverlayAddr, Status, UpdateKind

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789-._/é水"


def rand_ip(rng):
    return socket.inet_ntoa(struct.pack("!I", rng.getrandbits(32)))


def rand_addr(rng):
    return OverlayAddr(rand_ip(rng), rng.randrange(0, 65536))


def rand_str(rng, lo=0, hi=40):
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(lo, hi)))


def rand_record(rng):
    name = rand_str(rng, 1, 20) if rng.random() < 0.7 else None
    return NodeRecord(rng.getrandbits(64), rand_addr(rng), rand_ip(rng), name, rng.getrandbits(64))


def rand_value(rng, kind, name):
    if kind == "u8":
        if name == "status":
            return rng.choice(list(Status))
        if name == "kind":
            return rng.choice(list(UpdateKind))
        if name in ("blocking", "selected"):
            return rng.random() < 0.5
        return rng.randrange(256)
    if kind in ("u16", "u32", "u64"):
        return rng.getrandbits({"u16": 16, "u32": 32, "u64": 64}[kind])
    if kind == "ip":
        return rand_ip(rng)
    if kind == "addr":
        return rand_addr(rng)
    if kind == "str":
        return rand_str(rng)
    if kind == "ips":
        return tuple(rand_ip(rng) for _ in range(rng.randint(0, 5)))
    if kind == "record":
        return rand_record(rng)
    if kind == "records":
        return tuple(rand_record(rng) for _ in range(rng.randint(0, 4)))
    raise AssertionError(kind)


def rand_message(rng, cls=None):
    cls = cls or rng.choice(sorted(proto.REGISTRY.values(), key=lambda c: c.KIND))
    names = [f.name for f in fields(cls)]
    return cls(*(rand_value(rng, k, n) for k, n in zip(cls.SCHEMA, names)))


def messages(count, seed=0):
    rng = random.Random(seed)
    return [rand_message(rng) for _ in range(count)]
