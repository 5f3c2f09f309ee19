"""Node runtime: single-command enablement, cell formation, task dispatch.

A node is enabled as coordinator or primary at startup and can be
reassigned by relaunching with a different role. Coordinators multicast
presence, keep the cell registry, schedule submitted pipelines and fan out
deployments; primaries join a cell through one of three paths (explicit
coordinator address, smallest discovered cell, or independent operation
awaiting incorporation) and expose the registration-switch REST endpoint
used by the transfer protocol.

All registry mutations happen in synchronous sections on the runtime's
event loop, which serializes them into one command stream per node.
"""

from __future__ import annotations

import logging
import platform
import uuid
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import psutil

from .bus import Handler, HandlerRegistry, Message, send_request
from .deployment import (
    DeployAssignment,
    ExecutionBackend,
    FakeBackend,
    InstanceManager,
    ProcessBackend,
)
from .descriptor import SkillLibrary
from .errors import (
    AllJoinAttemptsFailed,
    CellError,
    DuplicateMember,
    InvalidInterface,
    PartialTermination,
    RegistryBusy,
    SchemaViolation,
    SwitchFailed,
    UnknownDestination,
    UnknownPrimary,
    UnknownTask,
)
from .membership import Announcement, AnnouncementCache, CellRegistry
from .model import (
    AllocationScheme,
    GpuInventory,
    InstanceRecord,
    NodeRecord,
    NodeRole,
    ResourceVector,
    TaskPipeline,
    format_endpoint,
)
from .runtime import Runtime
from .scheduler import SchedulerConfig, select_scored

logger = logging.getLogger(__name__)

ANNOUNCEMENT_BYTE_LIMIT = 512


def detect_arch() -> str:
    machine = platform.machine().lower()
    return {"x86_64": "amd64", "amd64": "amd64",
            "aarch64": "arm64", "arm64": "arm64"}.get(machine, machine)


def detect_capacity(path: str = "/") -> ResourceVector:
    return ResourceVector(
        cpu=(psutil.cpu_count(logical=True) or 1) * 1000,
        mem=int(psutil.virtual_memory().total),
        disk=int(psutil.disk_usage(path).total),
        gmem=0,
    )


def default_node_id() -> str:
    # stable across restarts of the same machine: derived from the MAC
    return f"node-{uuid.getnode():012x}"


@dataclass
class NodeConfig:
    role: NodeRole = NodeRole.PRIMARY
    node_id: Optional[str] = None
    bind_host: str = "127.0.0.1"
    control_port: int = 0
    registry_switch_port: int = 0
    gateway_port: Optional[int] = None
    coordinator_endpoint: Optional[str] = None
    arch: Optional[str] = None
    capacity: Optional[ResourceVector] = None
    base_usage: ResourceVector = dataclass_field(default_factory=ResourceVector)
    gpu: GpuInventory = dataclass_field(default_factory=GpuInventory)
    skills_dir: Optional[str] = None
    state_dir: str = "."
    presence_interval: float = 2.0
    announcement_expiry_intervals: int = 3
    liveness_interval: float = 5.0
    liveness_misses: int = 3
    status_sync_interval: float = 10.0
    discovery_window: float = 5.0
    request_timeout: float = 5.0
    depart_retry_interval: float = 2.0
    retention: float = 3600.0
    scheduler: SchedulerConfig = dataclass_field(default_factory=SchedulerConfig)

    @property
    def announcement_expiry(self) -> float:
        return self.presence_interval * self.announcement_expiry_intervals


class Node:
    def __init__(self, config: NodeConfig, runtime: Runtime,
                 backend: ExecutionBackend | None = None,
                 library: SkillLibrary | None = None):
        self.cfg = config
        self.rt = runtime
        self.id = config.node_id or default_node_id()
        self.role = config.role
        self.library = library or (
            SkillLibrary.from_directory(config.skills_dir)
            if config.skills_dir else SkillLibrary())
        self._backend = backend
        self.registry: Optional[CellRegistry] = None
        self.announcements = AnnouncementCache(config.announcement_expiry)
        self.cell: Optional[str] = None
        self.coordinator_endpoint: Optional[str] = None
        self.handlers = HandlerRegistry()
        self.manager: Optional[InstanceManager] = None
        self.record: Optional[NodeRecord] = None
        self._servers = []
        self._tasks = []
        self._switching = False
        self._announcing_identity = False
        self.running = False

    # ------------------------------------------------------------------ start

    async def start(self) -> "Node":
        cfg = self.cfg
        try:
            control = await self.rt.listen_stream(
                cfg.bind_host, cfg.control_port, self._on_control_request)
            switch = await self.rt.listen_http(
                cfg.bind_host, cfg.registry_switch_port, self._on_registry_switch)
        except OSError as exc:
            raise InvalidInterface(f"cannot bind {cfg.bind_host}: {exc}") from exc
        self._servers += [control, switch]
        if cfg.gateway_port is not None:
            gateway = await self.rt.listen_http(cfg.bind_host, cfg.gateway_port,
                                                self._on_gateway)
            self._servers.append(gateway)

        capacity = cfg.capacity or detect_capacity(cfg.state_dir)
        if cfg.gpu.gpus and capacity.gmem == 0:
            capacity = ResourceVector(capacity.cpu, capacity.mem, capacity.disk,
                                      sum(g.mem_capacity for g in cfg.gpu.gpus))
        self.record = NodeRecord(
            id=self.id,
            role=self.role,
            arch=cfg.arch or detect_arch(),
            control_endpoint=format_endpoint(control.host, control.port),
            registry_switch_endpoint=format_endpoint(switch.host, switch.port),
            capacity=capacity,
            usage=cfg.base_usage,
            gpu=cfg.gpu,
            cell=None,
        )
        backend = self._backend or ProcessBackend(cfg.state_dir)
        self.manager = InstanceManager(
            node_id=self.id, backend=backend, base_usage=cfg.base_usage,
            gpu=cfg.gpu, clock=self.rt.now, workdir_root=cfg.state_dir,
            retention=cfg.retention)

        self._wire_handlers()
        self.rt.multicast_join(self._on_datagram)
        self.running = True

        if self.role is NodeRole.COORDINATOR:
            self.registry = CellRegistry(self.record.with_cell(self.id),
                                         now=self.rt.now())
            self.cell = self.id
            self._spawn(self._presence_loop(), "presence")
            self._spawn(self._liveness_loop(), "liveness")
        else:
            self._spawn(self._join_procedure(), "join")
        self._spawn(self._status_loop(), "status")
        self.rt.log_event("node.start", id=self.id, role=self.role.value)
        return self

    async def stop(self) -> None:
        self.running = False
        for task in self._tasks:
            task.cancel()
        self._tasks.clear()
        for server in self._servers:
            server.close()
        self._servers.clear()
        if self.manager is not None:
            self.manager.stop_all()
        leave = getattr(self.rt, "leave_fabric", None)
        if leave is not None:
            leave()
        self.rt.log_event("node.stop", id=self.id)

    def _spawn(self, coro, name: str):
        self._tasks.append(self.rt.spawn(coro, f"{self.id}:{name}"))

    # --------------------------------------------------------------- wire glue

    async def _on_control_request(self, data: bytes) -> bytes:
        try:
            message = Message.decode(data)
        except SchemaViolation as exc:
            reject = Message.make("error.rejected", {
                "reason_code": exc.reason_code, "detail": exc.detail,
                "data": exc.data}, self.rt.new_msg_id())
            return reject.encode()
        response = await self.handlers.dispatch_or_reject(message)
        return response.encode()

    def _on_datagram(self, data: bytes) -> None:
        try:
            message = Message.decode(data)
        except SchemaViolation:
            return
        if message.msg_type != "node.announce":
            return
        payload = message.payload
        if payload["node_id"] == self.id:
            return
        self.announcements.update(Announcement.from_payload(payload, self.rt.now()))

    async def _send(self, endpoint: str, msg_type: str, payload: dict,
                    timeout: float | None = None) -> Message:
        message = Message.make(msg_type, payload, self.rt.new_msg_id())
        return await send_request(self.rt, endpoint, message,
                                  timeout or self.cfg.request_timeout)

    # ---------------------------------------------------------------- handlers

    def _wire_handlers(self) -> None:
        reg = self.handlers
        reg.register_handler(Handler("node.announce", "node.announce.ok",
                                     self._handle_announce))
        reg.register_handler(Handler("instance.status", "instance.status.ok",
                                     self._handle_status))
        reg.register_handler(Handler("task.terminate", "task.terminate.ok",
                                     self._handle_terminate))
        if self.role is NodeRole.COORDINATOR:
            reg.register_handler(Handler("cell.query", "cell.query.ok",
                                         self._handle_query))
            reg.register_handler(Handler("cell.join", "cell.join.ok",
                                         self._handle_join))
            reg.register_handler(Handler("cell.leave", "cell.leave.ok",
                                         self._handle_leave))
            reg.register_handler(Handler("cell.transfer", "cell.transfer.ok",
                                         self._handle_transfer))
            # submission runs as a two-stage pipeline: plan, then commit+dispatch
            reg.register_pipeline([
                Handler("task.submit", "task.plan", self._plan_submission),
                Handler("task.plan", "task.submit.ok", self._execute_plan),
            ])
        else:
            reg.register_handler(Handler("task.submit", "task.submit.ok",
                                         self._handle_deploy))

    async def _handle_announce(self, message: Message) -> Message:
        payload = message.payload
        if payload["node_id"] != self.id:
            self.announcements.update(
                Announcement.from_payload(payload, self.rt.now()))
        return message.reply("node.announce.ok", {})

    async def _handle_query(self, message: Message) -> Message:
        return message.reply("cell.query.ok", self.registry.snapshot())

    async def _handle_join(self, message: Message) -> Message:
        record = NodeRecord.from_dict(message.payload["record"])
        if record.role is NodeRole.COORDINATOR:
            raise SchemaViolation("coordinators cannot join a cell", "/record/role")
        self.registry.add_member(record, self.rt.now())
        self.rt.log_event("cell.join", member=record.id, size=self.registry.size())
        return message.reply("cell.join.ok", {
            "coordinator": self.id, "cell_size": self.registry.size()})

    async def _handle_leave(self, message: Message) -> Message:
        node_id = message.payload["node_id"]
        self.registry.remove_member(node_id)
        self.registry.busy.discard(node_id)
        self.announcements.forget(node_id)
        self.rt.log_event("cell.leave", member=node_id, size=self.registry.size())
        return message.reply("cell.leave.ok", {"node_id": node_id})

    async def _handle_status(self, message: Message) -> Message:
        payload = message.payload
        if "usage" in payload:
            if self.role is not NodeRole.COORDINATOR:
                raise SchemaViolation("status reports go to coordination nodes", "")
            self.registry.apply_status(
                payload["node_id"],
                ResourceVector.from_dict(payload["usage"]),
                [InstanceRecord.from_dict(r) for r in payload["instances"]],
                self.rt.now())
            self.registry.apply_gpu_report(
                payload["node_id"], GpuInventory.from_dict(payload["gpu"]))
            return message.reply("instance.status.ok",
                                 {"node_id": payload["node_id"]})
        self.manager.refresh()
        return message.reply("instance.status.ok", self._own_status_payload())

    def _own_status_payload(self) -> dict:
        return {
            "node_id": self.id,
            "usage": self.manager.usage().to_dict(),
            "gpu": self.manager.gpu_inventory().to_dict(),
            "instances": [r.to_dict() for r in self.manager.list_instances()],
        }

    # ------------------------------------------------------------ cell joining

    async def _join_procedure(self) -> None:
        if self.cfg.coordinator_endpoint:
            try:
                await self._join_via(self.cfg.coordinator_endpoint)
                return
            except CellError as exc:
                logger.warning("%s: direct join to %s failed (%s); "
                               "operating independently", self.id,
                               self.cfg.coordinator_endpoint, exc)
                self._start_identity_announcements()
                return
        await self.rt.sleep(self.cfg.discovery_window)
        discovered = self.announcements.coordinators(self.rt.now())
        if not discovered:
            self._start_identity_announcements()
            return
        try:
            await self.join_smallest_cell(discovered)
        except AllJoinAttemptsFailed as exc:
            logger.warning("%s: %s; operating independently", self.id, exc)
            self._start_identity_announcements()

    async def join_smallest_cell(self, discovered: list[Announcement]) -> str:
        """Join the coordinator reporting the smallest cell, re-querying sizes
        at join time; one rebalancing re-query pass runs on conflict."""
        candidates = [a for a in discovered if a.role is NodeRole.COORDINATOR]
        if not candidates:
            raise AllJoinAttemptsFailed("no coordinators discovered")
        for _attempt in range(2):
            sized = []
            for ann in sorted(candidates, key=lambda a: a.node_id):
                try:
                    response = await self._send(ann.control_endpoint, "cell.query", {})
                except CellError:
                    continue
                sized.append((len(response.payload["members"]), ann))
            for _size, ann in sorted(sized, key=lambda x: (x[0], x[1].node_id)):
                try:
                    await self._join_via(ann.control_endpoint)
                    return ann.node_id
                except CellError:
                    continue
        raise AllJoinAttemptsFailed(
            f"every candidate refused or was unreachable "
            f"({len(candidates)} tried)")

    async def _join_via(self, endpoint: str) -> str:
        try:
            response = await self._send(endpoint, "cell.join",
                                        {"record": self.record.to_dict()})
            coordinator = response.payload["coordinator"]
        except DuplicateMember:
            # a lost ack on a previous attempt: the coordinator already lists us
            response = await self._send(endpoint, "cell.query", {})
            coordinator = response.payload["coordinator"]
        self.cell = coordinator
        self.coordinator_endpoint = endpoint
        self.record = self.record.with_cell(coordinator)
        self._stop_identity_announcements()
        self.rt.log_event("joined", coordinator=coordinator)
        return coordinator

    def _start_identity_announcements(self) -> None:
        if not self._announcing_identity:
            self._announcing_identity = True
            self._spawn(self._identity_loop(), "identity")

    def _stop_identity_announcements(self) -> None:
        self._announcing_identity = False

    # --------------------------------------------------------------- transfers

    async def _handle_transfer(self, message: Message) -> Message:
        payload = message.payload
        primary_id, dest_id = payload["primary"], payload["dest"]
        now = self.rt.now()

        if primary_id not in self.registry.members:
            owner = await self._find_owner(primary_id)
            if owner is not None:
                forwarded = await self._send(owner, "cell.transfer", payload)
                return message.reply("cell.transfer.ok", forwarded.payload)
            announcement = self.announcements.get(primary_id, now)
            if announcement is None or announcement.role is not NodeRole.PRIMARY:
                raise UnknownPrimary(f"{primary_id!r} is not in any known cell "
                                     f"and not announcing independently")
            # incorporation of an independent primary: no source registry involved
            dest = self._resolve_destination(dest_id, now)
            await self._instruct_switch(primary_id,
                                        announcement.registry_switch_endpoint, dest)
            return message.reply("cell.transfer.ok", {
                "primary": primary_id, "source": None, "dest": dest_id})

        dest = self._resolve_destination(dest_id, now)
        if dest_id == self.id:
            return message.reply("cell.transfer.ok", {
                "primary": primary_id, "source": self.id, "dest": dest_id})
        if primary_id in self.registry.busy:
            raise RegistryBusy(f"transfer already in flight for {primary_id!r}")
        member = self.registry.members[primary_id]
        self.registry.busy.add(primary_id)
        try:
            await self._instruct_switch(
                primary_id, member.record.registry_switch_endpoint, dest)
        finally:
            self.registry.busy.discard(primary_id)
        # departure confirmation may have arrived already; finalize idempotently
        self.registry.discard_member(primary_id)
        self.announcements.forget(primary_id)
        self.rt.log_event("transfer.out", member=primary_id, dest=dest_id)
        return message.reply("cell.transfer.ok", {
            "primary": primary_id, "source": self.id, "dest": dest_id})

    def _resolve_destination(self, dest_id: str, now: float):
        if dest_id == self.id:
            return self.record
        announcement = self.announcements.get(dest_id, now)
        if announcement is None or announcement.role is not NodeRole.COORDINATOR:
            raise UnknownDestination(f"coordinator {dest_id!r} not known/alive")
        return announcement

    async def _instruct_switch(self, primary_id: str, switch_endpoint: str,
                               dest) -> None:
        from .model import parse_endpoint
        host, port = parse_endpoint(switch_endpoint)
        try:
            status, body = await self.rt.http_json(
                host, port, "PUT", "/registration",
                {"target_coordinator_endpoint": dest.control_endpoint},
                self.cfg.request_timeout)
        except CellError as exc:
            raise SwitchFailed(
                f"registration switch of {primary_id!r} did not complete: "
                f"{exc.detail or exc.reason_code}",
                {"outcome_unknown": exc.reason_code == "timeout"}) from exc
        if status == 409:
            raise RegistryBusy(f"{primary_id!r} is busy with another switch")
        if status != 200:
            raise SwitchFailed(
                f"{primary_id!r} could not register with the destination "
                f"(HTTP {status}: {body.get('error', '')})",
                {"status": status})

    async def _find_owner(self, primary_id: str) -> Optional[str]:
        for ann in self.announcements.coordinators(self.rt.now(), exclude=self.id):
            try:
                response = await self._send(ann.control_endpoint, "cell.query", {})
            except CellError:
                continue
            members = {m["record"]["id"] for m in response.payload["members"]}
            if primary_id in members:
                return ann.control_endpoint
        return None

    async def _on_registry_switch(self, method: str, path: str,
                                  body: dict | None) -> tuple[int, dict]:
        if path != "/registration":
            return 404, {"error": "unknown path"}
        if method != "PUT":
            return 405, {"error": "use PUT /registration"}
        if self.role is NodeRole.COORDINATOR:
            return 405, {"error": "coordination nodes do not switch registration"}
        if not body or "target_coordinator_endpoint" not in body:
            return 400, {"error": "target_coordinator_endpoint required"}
        if self._switching:
            return 409, {"error": "switch already in progress"}
        target = body["target_coordinator_endpoint"]
        self._switching = True
        try:
            previous_endpoint = self.coordinator_endpoint
            previous_cell = self.cell
            try:
                await self._join_via(target)
            except CellError as exc:
                return 502, {"error": f"target unreachable or refused: "
                                      f"{exc.reason_code}: {exc.detail}"}
            if previous_endpoint and previous_cell != self.cell:
                self._spawn(self._confirm_departure(previous_endpoint),
                            "depart-confirm")
            return 200, {"coordinator": self.cell}
        finally:
            self._switching = False

    async def _confirm_departure(self, old_endpoint: str) -> None:
        while self.running:
            try:
                await self._send(old_endpoint, "cell.leave",
                                 {"node_id": self.id,
                                  "reason": "registration-switch"})
                return
            except CellError as exc:
                if exc.reason_code == "unknown_member":
                    return  # the old coordinator already finalized our removal
                await self.rt.sleep(self.cfg.depart_retry_interval)

    async def leave_cell(self) -> None:
        """Primary-initiated departure: back to independent operation."""
        if self.coordinator_endpoint is None or self.role is NodeRole.COORDINATOR:
            return
        await self._send(self.coordinator_endpoint, "cell.leave",
                         {"node_id": self.id, "reason": "operator"})
        self.cell = None
        self.coordinator_endpoint = None
        self.record = self.record.with_cell(None)
        self._start_identity_announcements()

    # ---------------------------------------------------------- task submission

    async def _plan_submission(self, message: Message) -> Message:
        payload = message.payload
        if "pipeline" not in payload:
            raise SchemaViolation(
                "coordination nodes accept pipeline submissions; deployment "
                "assignments are dispatched to members", "/pipeline")
        pipeline = TaskPipeline.from_dict(payload["pipeline"])
        scored = select_scored(pipeline, self.registry.scheduler_view(),
                               self.library, self.cfg.scheduler)
        self.rt.log_event("scheduled", tasks=len(pipeline.tasks),
                          total=scored.total)
        return message.reply("task.plan", {
            "pipeline": payload["pipeline"],
            "scheme": scored.scheme.to_dict(),
            "total": scored.total,
        })

    async def _execute_plan(self, message: Message) -> Message:
        pipeline = TaskPipeline.from_dict(message.payload["pipeline"])
        scheme = AllocationScheme.from_dict(message.payload["scheme"])
        per_node: dict[str, list[DeployAssignment]] = {}
        for task, assignment in zip(pipeline.tasks, scheme.assignments):
            model = self.library.resolve_model(task)
            deployment = model.deployment(assignment.deployment_id)
            per_node.setdefault(assignment.node, []).append(DeployAssignment(
                task=task,
                deployment=deployment,
                engine_kind=model.engine_kind,
                entry=model.entry_point,
                checkpoint_ref=model.checkpoint_ref,
                gpu_id=assignment.gpu_id,
            ))

        instances: list[InstanceRecord] = []
        dispatched: list[str] = []
        try:
            for node_id, assignments in per_node.items():
                records = await self._dispatch_deployments(node_id, assignments)
                member = self.registry.members.get(node_id)
                unified = (member.record.gpu.unified_memory
                           if member is not None else False)
                for record, assignment in zip(records, assignments):
                    self.registry.reserve(node_id, record,
                                          assignment.deployment.request,
                                          assignment.gpu_id, unified)
                dispatched.append(node_id)
                instances.extend(records)
        except CellError:
            for node_id in dispatched:
                for task in pipeline.tasks:
                    try:
                        await self._terminate_on_node(node_id, task.task_id)
                    except CellError:
                        logger.warning("rollback of %s on %s incomplete",
                                       task.task_id, node_id)
            raise

        # answered after dispatch; per-instance status follows asynchronously
        task_order = {t.task_id: i for i, t in enumerate(pipeline.tasks)}
        instances.sort(key=lambda r: task_order.get(r.task_id, len(task_order)))
        return message.reply("task.submit.ok", {
            "scheme": message.payload["scheme"],
            "instances": [r.to_dict() for r in instances],
        })

    async def _dispatch_deployments(self, node_id: str,
                                    assignments: list[DeployAssignment]
                                    ) -> list[InstanceRecord]:
        if node_id == self.id:
            records = []
            try:
                for assignment in assignments:
                    records.append(self.manager.deploy(assignment))
            except CellError:
                for record in records:
                    self.manager.terminate_task(record.task_id)
                raise
            self._apply_own_status()
            return records
        member = self.registry.members[node_id]
        response = await self._send(member.record.control_endpoint, "task.submit", {
            "assignments": [a.to_dict() for a in assignments]})
        return [InstanceRecord.from_dict(r)
                for r in response.payload["instances"]]

    async def _handle_deploy(self, message: Message) -> Message:
        payload = message.payload
        if "assignments" not in payload:
            raise SchemaViolation(
                "primary nodes execute deployment assignments; submit "
                "pipelines to a coordination node", "/assignments")
        records = []
        try:
            for raw in payload["assignments"]:
                records.append(self.manager.deploy(DeployAssignment.from_dict(raw)))
        except CellError:
            for record in records:
                self.manager.terminate_task(record.task_id)
            raise
        self._spawn(self._push_status_once(), "status-push")
        return message.reply("task.submit.ok", {
            "instances": [r.to_dict() for r in records]})

    # ----------------------------------------------------------- task teardown

    async def _handle_terminate(self, message: Message) -> Message:
        task_id = message.payload["task_id"]
        if self.role is not NodeRole.COORDINATOR:
            stopped = self.manager.terminate_task(task_id)
            self._spawn(self._push_status_once(), "status-push")
            return message.reply("task.terminate.ok",
                                 {"task_id": task_id, "stopped": stopped})

        nodes = self.registry.nodes_hosting(task_id)
        if not nodes:
            raise UnknownTask(f"task {task_id!r} has no known instances")
        stopped_all: list[str] = []
        failed: list[dict] = []
        for node_id in nodes:
            try:
                stopped = await self._terminate_on_node(node_id, task_id)
            except CellError as exc:
                failed.append({"node": node_id, "reason": exc.reason_code})
                continue
            self.registry.release(node_id, stopped)
            stopped_all.extend(stopped)
        self.rt.log_event("terminated", task=task_id, stopped=len(stopped_all),
                          failed=len(failed))
        if failed:
            error = PartialTermination(task_id, failed)
            error.data["stopped"] = stopped_all
            raise error
        return message.reply("task.terminate.ok",
                             {"task_id": task_id, "stopped": stopped_all})

    async def _terminate_on_node(self, node_id: str, task_id: str) -> list[str]:
        if node_id == self.id:
            stopped = self.manager.terminate_task(task_id)
            self._apply_own_status()
            return stopped
        member = self.registry.members[node_id]
        response = await self._send(member.record.control_endpoint,
                                    "task.terminate", {"task_id": task_id})
        return response.payload["stopped"]

    # ------------------------------------------------------------- background

    def _announcement_payload(self) -> dict:
        payload = {
            "node_id": self.id,
            "role": self.role.value,
            "control_endpoint": self.record.control_endpoint,
            "registry_switch_endpoint": self.record.registry_switch_endpoint,
        }
        if self.role is NodeRole.COORDINATOR:
            payload["cell_size"] = self.registry.size()
        return payload

    def _emit_announcement(self) -> None:
        message = Message.make("node.announce", self._announcement_payload(),
                               self.rt.new_msg_id())
        data = message.encode()
        if len(data) > ANNOUNCEMENT_BYTE_LIMIT:
            logger.error("presence announcement exceeds %d bytes (%d); "
                         "shorten node id or endpoints",
                         ANNOUNCEMENT_BYTE_LIMIT, len(data))
        self.rt.multicast_send(data)

    async def _presence_loop(self) -> None:
        while self.running:
            self._emit_announcement()
            await self.rt.sleep(self.cfg.presence_interval)

    async def _identity_loop(self) -> None:
        while self.running and self._announcing_identity:
            self._emit_announcement()
            await self.rt.sleep(self.cfg.presence_interval)

    async def _liveness_loop(self) -> None:
        while self.running:
            await self.rt.sleep(self.cfg.liveness_interval)
            for node_id in sorted(self.registry.members):
                if node_id == self.id:
                    continue
                state = self.registry.members.get(node_id)
                if state is None:
                    continue
                try:
                    response = await self._send(
                        state.record.control_endpoint, "instance.status", {},
                        timeout=min(self.cfg.request_timeout,
                                    self.cfg.liveness_interval))
                except CellError:
                    self.registry.mark_missed(node_id, self.cfg.liveness_misses)
                    continue
                payload = response.payload
                if node_id not in self.registry.members:
                    continue  # member left while the ping was in flight
                self.registry.apply_status(
                    node_id,
                    ResourceVector.from_dict(payload["usage"]),
                    [InstanceRecord.from_dict(r) for r in payload["instances"]],
                    self.rt.now())
                self.registry.apply_gpu_report(
                    node_id, GpuInventory.from_dict(payload["gpu"]))

    async def _status_loop(self) -> None:
        while self.running:
            await self.rt.sleep(self.cfg.status_sync_interval)
            self.manager.refresh()
            if self.role is NodeRole.COORDINATOR:
                self._apply_own_status()
            else:
                await self._push_status()

    def _apply_own_status(self) -> None:
        self.registry.apply_status(self.id, self.manager.usage(),
                                   self.manager.list_instances(), self.rt.now())
        self.registry.apply_gpu_report(self.id, self.manager.gpu_inventory())

    async def _push_status(self) -> None:
        if self.coordinator_endpoint is None:
            return
        try:
            await self._send(self.coordinator_endpoint, "instance.status",
                             self._own_status_payload())
        except CellError as exc:
            logger.debug("%s: status push failed: %s", self.id, exc)

    async def _push_status_once(self) -> None:
        await self._push_status()

    # ---------------------------------------------------------------- gateway

    async def _on_gateway(self, method: str, path: str,
                          body: dict | None) -> tuple[int, dict]:
        if path == "/healthz" and method == "GET":
            return 200, {"node": self.id, "role": self.role.value}
        if path != "/rpc" or method != "POST":
            return 404, {"error": "POST /rpc or GET /healthz"}
        if not isinstance(body, dict):
            return 400, {"error": "JSON envelope body required"}
        try:
            message = Message.make(
                body["msg_type"], body.get("payload", {}),
                body.get("msg_id") or self.rt.new_msg_id())
        except (KeyError, TypeError) as exc:
            return 400, {"error": f"malformed envelope: {exc}"}
        except SchemaViolation as exc:
            return 400, {"error": exc.detail}
        response = await self.handlers.dispatch_or_reject(message)
        return 200, {"msg_type": response.msg_type, "msg_id": response.msg_id,
                     "payload": response.payload}


async def start_node(config: NodeConfig, runtime: Runtime,
                     backend: ExecutionBackend | None = None,
                     library: SkillLibrary | None = None) -> Node:
    """Enable this device as a cell node; the single-command entry point."""
    node = Node(config, runtime, backend=backend, library=library)
    await node.start()
    return node


__all__ = ["Node", "NodeConfig", "start_node", "detect_arch", "detect_capacity",
           "default_node_id", "FakeBackend"]
