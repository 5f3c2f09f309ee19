"""Cell registry and presence bookkeeping kept by coordination nodes.

The registry is the coordinator's authoritative view: member records,
liveness, last-reported usage, per-node instance metadata, and the
reservations of dispatched-but-not-yet-reported instances. The scheduler
reads node usage through ``scheduler_view``, which folds in exactly those
reservations a member's latest status report has not covered yet, so
resources are never double-counted and never double-booked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import DuplicateMember, RegistryBusy, UnknownMember
from .model import (
    GpuDevice,
    GpuInventory,
    InstanceRecord,
    NodeRecord,
    NodeRole,
    ResourceVector,
    canonical_json,
)


@dataclass
class Reservation:
    vector: ResourceVector
    gpu_id: Optional[str]
    unified: bool


@dataclass
class MemberState:
    record: NodeRecord
    active: bool = True
    last_seen: float = 0.0
    missed_pings: int = 0
    reported_instances: frozenset = frozenset()

    def entry(self) -> dict:
        return {"record": self.record.to_dict(), "active": self.active,
                "last_seen": self.last_seen}


class CellRegistry:
    """Members, deployments and reservations of one cell."""

    def __init__(self, coordinator: NodeRecord, now: float = 0.0):
        if coordinator.role is not NodeRole.COORDINATOR:
            raise ValueError("cell registry must be rooted at a coordinator")
        self.coordinator_id = coordinator.id
        self.members: dict[str, MemberState] = {}
        self.deployments: dict[str, list[InstanceRecord]] = {}
        self.busy: set[str] = set()
        self.reservations: dict[str, dict[str, Reservation]] = {}
        self.members[coordinator.id] = MemberState(record=coordinator, last_seen=now)
        self.deployments[coordinator.id] = []

    # --- membership ------------------------------------------------------------

    def size(self) -> int:
        return len(self.members)

    def add_member(self, record: NodeRecord, now: float) -> None:
        if record.id in self.busy:
            raise RegistryBusy(f"transfer in flight for {record.id!r}")
        if record.id in self.members:
            raise DuplicateMember(f"{record.id!r} already in cell "
                                  f"{self.coordinator_id!r}")
        self.members[record.id] = MemberState(
            record=record.with_cell(self.coordinator_id), last_seen=now)
        self.deployments[record.id] = []
        self.reservations.setdefault(record.id, {})

    def remove_member(self, node_id: str) -> None:
        if node_id not in self.members:
            raise UnknownMember(f"{node_id!r} not in cell {self.coordinator_id!r}")
        if node_id == self.coordinator_id:
            raise UnknownMember("coordinator cannot leave its own cell")
        del self.members[node_id]
        self.deployments.pop(node_id, None)
        self.reservations.pop(node_id, None)

    def discard_member(self, node_id: str) -> bool:
        """Idempotent removal used when finalizing transfers."""
        if node_id in self.members and node_id != self.coordinator_id:
            self.remove_member(node_id)
            return True
        return False

    # --- status ----------------------------------------------------------------

    def apply_status(self, node_id: str, usage: ResourceVector,
                     instances: list[InstanceRecord], now: float) -> None:
        state = self.members.get(node_id)
        if state is None:
            raise UnknownMember(f"status report from non-member {node_id!r}")
        state.record = state.record.with_usage(usage)
        state.last_seen = now
        state.missed_pings = 0
        state.active = True
        state.reported_instances = frozenset(i.instance_id for i in instances)
        self.deployments[node_id] = list(instances)
        # a reservation is covered once the member reports the instance;
        # reports of terminal states release it entirely
        held = self.reservations.setdefault(node_id, {})
        for record in instances:
            if record.status in ("stopped", "failed"):
                held.pop(record.instance_id, None)

    def apply_gpu_report(self, node_id: str, gpu: GpuInventory) -> None:
        state = self.members.get(node_id)
        if state is not None:
            state.record = state.record.with_gpu(gpu)

    def mark_missed(self, node_id: str, threshold: int) -> None:
        state = self.members.get(node_id)
        if state is None:
            return
        state.missed_pings += 1
        if state.missed_pings >= threshold:
            state.active = False

    # --- reservations -------------------------------------------------------------

    def reserve(self, node_id: str, record: InstanceRecord,
                vector: ResourceVector, gpu_id: Optional[str],
                unified: bool) -> None:
        self.reservations.setdefault(node_id, {})[record.instance_id] = Reservation(
            vector=vector, gpu_id=gpu_id, unified=unified)
        existing = self.deployments.setdefault(node_id, [])
        existing = [r for r in existing if r.instance_id != record.instance_id]
        existing.append(record)
        self.deployments[node_id] = existing

    def release(self, node_id: str, instance_ids: list[str]) -> None:
        held = self.reservations.get(node_id, {})
        for instance_id in instance_ids:
            held.pop(instance_id, None)
        self.deployments[node_id] = [
            r.with_status("stopped") if r.instance_id in instance_ids else r
            for r in self.deployments.get(node_id, [])
        ]

    def nodes_hosting(self, task_id: str) -> list[str]:
        return sorted(
            node_id for node_id, records in self.deployments.items()
            if any(r.task_id == task_id and r.status in ("building", "running")
                   for r in records))

    # --- views ---------------------------------------------------------------------

    def scheduler_view(self) -> list[NodeRecord]:
        """Member records with usage = last report + uncovered reservations."""
        view = []
        for node_id, state in self.members.items():
            record = state.record
            usage = record.usage
            gpu = record.gpu
            pending = {
                iid: r for iid, r in self.reservations.get(node_id, {}).items()
                if iid not in state.reported_instances
            }
            gpu_extra: dict[str, int] = {}
            for reservation in pending.values():
                r = reservation.vector
                if reservation.unified:
                    usage = usage + ResourceVector(r.cpu, r.mem + r.gmem, r.disk, 0)
                else:
                    usage = usage + r
                    if reservation.gpu_id is not None:
                        gpu_extra[reservation.gpu_id] = (
                            gpu_extra.get(reservation.gpu_id, 0) + r.gmem)
            if gpu_extra:
                gpu = GpuInventory(gpus=tuple(
                    GpuDevice(g.gpu_id, g.mem_capacity,
                              min(g.mem_used + gpu_extra.get(g.gpu_id, 0),
                                  g.mem_capacity))
                    for g in gpu.gpus), unified_memory=False)
            view.append(record.with_usage(usage).with_gpu(gpu))
        return view

    def snapshot(self) -> dict:
        """cell.query.ok payload."""
        return {
            "coordinator": self.coordinator_id,
            "members": [state.entry() for _, state in sorted(self.members.items())],
            "deployments": {
                node_id: [r.to_dict() for r in records]
                for node_id, records in sorted(self.deployments.items())
            },
        }

    def canonical(self) -> str:
        """Canonical byte form for registry-equality checks; liveness metadata
        (last_seen, missed pings, active flags) is observability state and
        deliberately excluded."""
        return canonical_json({
            "coordinator": self.coordinator_id,
            "members": {node_id: state.record.to_dict()
                        for node_id, state in self.members.items()},
            "deployments": {node_id: sorted((r.to_dict() for r in records),
                                            key=lambda r: r["instance_id"])
                            for node_id, records in self.deployments.items()
                            if records},
        })


@dataclass
class Announcement:
    node_id: str
    role: NodeRole
    control_endpoint: str
    registry_switch_endpoint: str
    cell_size: Optional[int]
    received_at: float

    @classmethod
    def from_payload(cls, payload: dict, now: float) -> "Announcement":
        return cls(
            node_id=payload["node_id"],
            role=NodeRole(payload["role"]),
            control_endpoint=payload["control_endpoint"],
            registry_switch_endpoint=payload["registry_switch_endpoint"],
            cell_size=payload.get("cell_size"),
            received_at=now,
        )


class AnnouncementCache:
    """Presence datagrams seen on the wire, expiring after missed intervals."""

    def __init__(self, expiry: float):
        self.expiry = expiry
        self._entries: dict[str, Announcement] = {}

    def update(self, announcement: Announcement) -> None:
        self._entries[announcement.node_id] = announcement

    def forget(self, node_id: str) -> None:
        self._entries.pop(node_id, None)

    def get(self, node_id: str, now: float) -> Optional[Announcement]:
        entry = self._entries.get(node_id)
        if entry is None or now - entry.received_at > self.expiry:
            return None
        return entry

    def coordinators(self, now: float, exclude: str = "") -> list[Announcement]:
        return sorted(
            (a for a in self._entries.values()
             if a.role is NodeRole.COORDINATOR and a.node_id != exclude
             and now - a.received_at <= self.expiry),
            key=lambda a: a.node_id)

    def all(self, now: float) -> list[Announcement]:
        return sorted(
            (a for a in self._entries.values()
             if now - a.received_at <= self.expiry),
            key=lambda a: a.node_id)
