"""Sequenced membership state.

The seed stamps every change with a sequence number; each node applies
changes strictly in that order, holding early arrivals until the gap fills.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

from ..proto import Update, _put_record
from ..types import NodeRecord, UpdateKind

CANONICAL_NAME = re.compile(r"^node-(\d+)$")


@dataclass
class MembershipSet:
    version: int = 0
    records: Dict[int, NodeRecord] = field(default_factory=dict)
    pending: Dict[int, Update] = field(default_factory=dict)
    # monotonic time at which the oldest held update arrived
    gap_since: Optional[float] = None

    def apply(self, update: Update) -> List[Update]:
        """Apply ``update`` and any held successors; returns what got applied."""
        if update.seq <= self.version or update.seq in self.pending:
            return []
        self.pending[update.seq] = update
        applied = []
        while self.version + 1 in self.pending:
            nxt = self.pending.pop(self.version + 1)
            self._apply_one(nxt)
            applied.append(nxt)
        if self.pending:
            if self.gap_since is None or applied:
                self.gap_since = time.monotonic()
        else:
            self.gap_since = None
        return applied

    def _apply_one(self, update: Update) -> None:
        rec = replace(update.record, seq=update.seq)
        if update.kind == UpdateKind.LEAVE:
            self.records.pop(rec.node_id, None)
        else:
            self.records[rec.node_id] = rec
        self.version = update.seq

    def reset(self, version: int, records: Iterable[NodeRecord]) -> None:
        """Replace state with a seed snapshot, keeping any newer held updates."""
        self.version = version
        self.records = {r.node_id: r for r in records}
        stale = [s for s in self.pending if s <= version]
        for s in stale:
            del self.pending[s]
        held = sorted(self.pending.values(), key=lambda u: u.seq)
        self.pending = {}
        self.gap_since = None
        for u in held:
            self.apply(u)

    @property
    def has_gap(self) -> bool:
        return bool(self.pending)

    def sorted_records(self) -> List[NodeRecord]:
        return [self.records[k] for k in sorted(self.records)]

    def by_ip(self, ip: str) -> Optional[NodeRecord]:
        for rec in self.records.values():
            if rec.overlay_ip == ip:
                return rec
        return None

    def by_name(self, name: str) -> Optional[NodeRecord]:
        for rec in self.records.values():
            if rec.name == name:
                return rec
        return None

    def resolve(self, name: str) -> Optional[str]:
        """Overlay IP for a registered or canonical ``node-<id>`` name."""
        name = name.rstrip(".")
        rec = self.by_name(name)
        if rec is not None:
            return rec.overlay_ip
        m = CANONICAL_NAME.match(name)
        if m:
            rec = self.records.get(int(m.group(1)))
            if rec is not None:
                return rec.overlay_ip
        return None

    def canonical_bytes(self) -> bytes:
        """Order-independent serialization used to compare replicas."""
        out = bytearray(self.version.to_bytes(8, "big"))
        for rec in self.sorted_records():
            _put_record(rec, out)
        return bytes(out)


def hosts_text(members: MembershipSet) -> str:
    lines = [f"{r.overlay_ip} {r.display_name} {r.node_id}" for r in members.sorted_records()]
    return "".join(line + "\n" for line in lines)


def event_line(kind: UpdateKind, rec: NodeRecord) -> str:
    return f"EVENT {kind.name.lower()} {rec.node_id} {rec.overlay_ip} {rec.display_name}\n"


def snapshot_lines(members: MembershipSet) -> List[str]:
    return [event_line(UpdateKind.JOIN, r) for r in members.sorted_records()]
