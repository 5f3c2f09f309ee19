"""Core domain types: nodes, resources, skills, pipelines, allocations.

All types are immutable values after construction and safe to share across
concurrent readers. Resource units are integers throughout: CPU in
millicores, memory/disk/GPU memory in bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import SchemaViolation


class NodeRole(str, Enum):
    PRIMARY = "primary"
    COORDINATOR = "coordinator"


RESOURCE_KEYS = ("cpu", "mem", "disk", "gmem")


@dataclass(frozen=True)
class ResourceVector:
    """Non-negative (cpu, mem, disk, gmem) quantities with exact arithmetic."""

    cpu: int = 0
    mem: int = 0
    disk: int = 0
    gmem: int = 0

    def __post_init__(self):
        for key in RESOURCE_KEYS:
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool):
                raise SchemaViolation(f"resource {key} must be an integer", f"/{key}")
            if value < 0:
                raise SchemaViolation(f"resource {key} must be >= 0", f"/{key}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu + other.cpu, self.mem + other.mem,
                              self.disk + other.disk, self.gmem + other.gmem)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        out = (self.cpu - other.cpu, self.mem - other.mem,
               self.disk - other.disk, self.gmem - other.gmem)
        if min(out) < 0:
            raise ValueError(f"resource subtraction went negative: {self} - {other}")
        return ResourceVector(*out)

    def fits_within(self, other: "ResourceVector") -> bool:
        return (self.cpu <= other.cpu and self.mem <= other.mem
                and self.disk <= other.disk and self.gmem <= other.gmem)

    def get(self, key: str) -> int:
        return getattr(self, key)

    def to_dict(self) -> dict:
        return {"cpu": self.cpu, "mem": self.mem, "disk": self.disk, "gmem": self.gmem}

    @classmethod
    def from_dict(cls, data: dict) -> "ResourceVector":
        return cls(cpu=int(data.get("cpu", 0)), mem=int(data.get("mem", 0)),
                   disk=int(data.get("disk", 0)), gmem=int(data.get("gmem", 0)))

    @classmethod
    def zero(cls) -> "ResourceVector":
        return cls()


@dataclass(frozen=True)
class GpuDevice:
    gpu_id: str
    mem_capacity: int
    mem_used: int = 0

    def __post_init__(self):
        if not self.gpu_id:
            raise SchemaViolation("gpu_id must be non-empty", "/gpus/gpu_id")
        if self.mem_used > self.mem_capacity:
            raise SchemaViolation(
                f"gpu {self.gpu_id}: mem_used > mem_capacity", "/gpus/mem_used")

    @property
    def mem_free(self) -> int:
        return self.mem_capacity - self.mem_used


@dataclass(frozen=True)
class GpuInventory:
    """Discrete GPUs of a node, or the unified-memory marker.

    On a unified-memory node GPU demand draws from the node's main memory
    pool, so ``gpus`` must be empty.
    """

    gpus: tuple[GpuDevice, ...] = ()
    unified_memory: bool = False

    def __post_init__(self):
        if self.unified_memory and self.gpus:
            raise SchemaViolation(
                "unified-memory node must not list discrete GPUs", "/gpu/gpus")
        ids = [g.gpu_id for g in self.gpus]
        if len(set(ids)) != len(ids):
            raise SchemaViolation("duplicate gpu_id in inventory", "/gpu/gpus")

    def to_dict(self) -> dict:
        return {
            "gpus": [{"gpu_id": g.gpu_id, "mem_capacity": g.mem_capacity,
                      "mem_used": g.mem_used} for g in self.gpus],
            "unified_memory": self.unified_memory,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpuInventory":
        return cls(
            gpus=tuple(GpuDevice(g["gpu_id"], int(g["mem_capacity"]),
                                 int(g.get("mem_used", 0)))
                       for g in data.get("gpus", [])),
            unified_memory=bool(data.get("unified_memory", False)),
        )

    @classmethod
    def none(cls) -> "GpuInventory":
        return cls()


@dataclass(frozen=True)
class NodeRecord:
    """Identity, role, endpoints and resource state of one device."""

    id: str
    role: NodeRole
    arch: str
    control_endpoint: str
    registry_switch_endpoint: str
    capacity: ResourceVector
    usage: ResourceVector = field(default_factory=ResourceVector)
    gpu: GpuInventory = field(default_factory=GpuInventory)
    cell: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise SchemaViolation("node id must be non-empty", "/id")
        if not self.usage.fits_within(self.capacity):
            raise SchemaViolation(f"node {self.id}: usage exceeds capacity", "/usage")
        # Positive capacities keep every balance fraction well defined.
        for key in ("cpu", "mem", "disk"):
            if self.capacity.get(key) <= 0:
                raise SchemaViolation(
                    f"node {self.id}: capacity.{key} must be > 0", "/capacity")
        if not self.gpu.unified_memory:
            want = sum(g.mem_capacity for g in self.gpu.gpus)
            if self.capacity.gmem != want:
                raise SchemaViolation(
                    f"node {self.id}: capacity.gmem must equal sum of GPU capacities",
                    "/capacity/gmem")

    def with_usage(self, usage: ResourceVector) -> "NodeRecord":
        return NodeRecord(self.id, self.role, self.arch, self.control_endpoint,
                          self.registry_switch_endpoint, self.capacity, usage,
                          self.gpu, self.cell)

    def with_cell(self, cell: Optional[str]) -> "NodeRecord":
        return NodeRecord(self.id, self.role, self.arch, self.control_endpoint,
                          self.registry_switch_endpoint, self.capacity, self.usage,
                          self.gpu, cell)

    def with_gpu(self, gpu: GpuInventory) -> "NodeRecord":
        return NodeRecord(self.id, self.role, self.arch, self.control_endpoint,
                          self.registry_switch_endpoint, self.capacity, self.usage,
                          gpu, self.cell)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "role": self.role.value,
            "arch": self.arch,
            "control_endpoint": self.control_endpoint,
            "registry_switch_endpoint": self.registry_switch_endpoint,
            "capacity": self.capacity.to_dict(),
            "usage": self.usage.to_dict(),
            "gpu": self.gpu.to_dict(),
            "cell": self.cell,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NodeRecord":
        return cls(
            id=data["id"],
            role=NodeRole(data["role"]),
            arch=data["arch"],
            control_endpoint=data["control_endpoint"],
            registry_switch_endpoint=data["registry_switch_endpoint"],
            capacity=ResourceVector.from_dict(data["capacity"]),
            usage=ResourceVector.from_dict(data.get("usage", {})),
            gpu=GpuInventory.from_dict(data.get("gpu", {})),
            cell=data.get("cell"),
        )


# --- skill descriptor hierarchy ------------------------------------------

@dataclass(frozen=True)
class IoProtocol:
    direction: str  # "in" | "out"
    protocol_id: str
    payload_type: str

    def to_dict(self) -> dict:
        return {"direction": self.direction, "protocol_id": self.protocol_id,
                "payload_type": self.payload_type}


@dataclass(frozen=True)
class DeploymentOption:
    deployment_id: str
    base_image: str
    requires_gpu: bool
    supported_archs: tuple[str, ...]
    request: ResourceVector

    def __post_init__(self):
        if not self.supported_archs:
            raise SchemaViolation(
                f"deployment {self.deployment_id}: supported_archs must be non-empty",
                "/supported_archs")
        if self.requires_gpu != (self.request.gmem > 0):
            raise SchemaViolation(
                f"deployment {self.deployment_id}: requires_gpu must match gmem > 0",
                "/requires_gpu")

    def to_dict(self) -> dict:
        return {
            "deployment_id": self.deployment_id,
            "base_image": self.base_image,
            "requires_gpu": self.requires_gpu,
            "supported_archs": sorted(self.supported_archs),
            "request": self.request.to_dict(),
        }


@dataclass(frozen=True)
class ImplementationModel:
    model_name: str
    engine_kind: str  # "primitive" | "standalone"
    deployments: tuple[DeploymentOption, ...]
    checkpoint_ref: Optional[str] = None
    executor: Optional[str] = None      # primitive engines: executor id or import path
    command: Optional[tuple[str, ...]] = None  # standalone engines: argv to wrap

    def __post_init__(self):
        if not self.deployments:
            raise SchemaViolation(
                f"model {self.model_name}: at least one deployment option required",
                "/deployments")
        if self.engine_kind == "primitive" and not self.executor:
            raise SchemaViolation(
                f"model {self.model_name}: primitive engine requires an executor",
                "/executor")
        if self.engine_kind == "standalone" and not self.command:
            raise SchemaViolation(
                f"model {self.model_name}: standalone engine requires a command",
                "/command")

    @property
    def entry_point(self) -> str:
        """Launch entry baked into the deployment image (not a runtime param)."""
        if self.engine_kind == "primitive":
            return self.executor or ""
        return json.dumps(list(self.command or ()))

    def deployment(self, deployment_id: str) -> Optional[DeploymentOption]:
        for d in self.deployments:
            if d.deployment_id == deployment_id:
                return d
        return None

    def to_dict(self) -> dict:
        out = {
            "model_name": self.model_name,
            "engine_kind": self.engine_kind,
            "deployments": [d.to_dict() for d in self.deployments],
        }
        if self.checkpoint_ref is not None:
            out["checkpoint_ref"] = self.checkpoint_ref
        if self.executor is not None:
            out["executor"] = self.executor
        if self.command is not None:
            out["command"] = list(self.command)
        return out


@dataclass(frozen=True)
class SkillDescriptor:
    """Declarative description of one operation and its deployable variants."""

    operation_name: str
    io_protocols: tuple[IoProtocol, ...]
    models: tuple[ImplementationModel, ...]

    def __post_init__(self):
        if not self.operation_name:
            raise SchemaViolation("operation_name must be non-empty", "/operation_name")
        if not self.models:
            raise SchemaViolation("at least one implementation model required", "/models")

    def model(self, model_name: str) -> Optional[ImplementationModel]:
        for m in self.models:
            if m.model_name == model_name:
                return m
        return None

    def to_dict(self) -> dict:
        return {
            "operation_name": self.operation_name,
            "io_protocols": [p.to_dict() for p in self.io_protocols],
            "models": [m.to_dict() for m in self.models],
        }


# --- task pipeline and allocation ----------------------------------------

@dataclass(frozen=True)
class IoEndpoint:
    protocol_id: str
    address: str

    def to_dict(self) -> dict:
        return {"protocol_id": self.protocol_id, "address": self.address}

    @classmethod
    def from_dict(cls, data: dict) -> "IoEndpoint":
        return cls(data["protocol_id"], data["address"])


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    operation_name: str
    model_name: str
    input_endpoint: IoEndpoint
    output_endpoint: IoEndpoint
    deployment_preference: Optional[str] = None

    def to_dict(self) -> dict:
        out = {
            "task_id": self.task_id,
            "operation_name": self.operation_name,
            "model_name": self.model_name,
            "input": self.input_endpoint.to_dict(),
            "output": self.output_endpoint.to_dict(),
        }
        if self.deployment_preference is not None:
            out["deployment_preference"] = self.deployment_preference
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            task_id=data["task_id"],
            operation_name=data["operation_name"],
            model_name=data["model_name"],
            input_endpoint=IoEndpoint.from_dict(data["input"]),
            output_endpoint=IoEndpoint.from_dict(data["output"]),
            deployment_preference=data.get("deployment_preference"),
        )


@dataclass(frozen=True)
class TaskPipeline:
    """Ordered task request; order defines the in-pipeline precedence relation."""

    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise SchemaViolation("task_id values must be unique within a pipeline",
                                  "/tasks")

    def to_dict(self) -> dict:
        return {"tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, data: dict) -> "TaskPipeline":
        return cls(tasks=tuple(TaskSpec.from_dict(t) for t in data["tasks"]))


@dataclass(frozen=True)
class Assignment:
    task_id: str
    node: str
    deployment_id: str
    gpu_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "node": self.node,
                "deployment_id": self.deployment_id, "gpu_id": self.gpu_id}

    @classmethod
    def from_dict(cls, data: dict) -> "Assignment":
        return cls(data["task_id"], data["node"], data["deployment_id"],
                   data.get("gpu_id"))


@dataclass(frozen=True)
class AllocationScheme:
    """Complete task -> (deployment, node[, gpu]) mapping, in pipeline order."""

    assignments: tuple[Assignment, ...]

    def to_dict(self) -> dict:
        return {"assignments": [a.to_dict() for a in self.assignments]}

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationScheme":
        return cls(tuple(Assignment.from_dict(a) for a in data["assignments"]))


INSTANCE_STATUSES = ("building", "running", "stopped", "failed")


@dataclass(frozen=True)
class InstanceRecord:
    task_id: str
    instance_id: str
    image_id: str
    node: str
    params: tuple[tuple[str, str], ...] = ()
    status: str = "building"

    def __post_init__(self):
        if self.status not in INSTANCE_STATUSES:
            raise SchemaViolation(f"invalid instance status {self.status!r}", "/status")

    def with_status(self, status: str) -> "InstanceRecord":
        return InstanceRecord(self.task_id, self.instance_id, self.image_id,
                              self.node, self.params, status)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "instance_id": self.instance_id,
            "image_id": self.image_id,
            "node": self.node,
            "params": dict(self.params),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceRecord":
        return cls(
            task_id=data["task_id"],
            instance_id=data["instance_id"],
            image_id=data["image_id"],
            node=data["node"],
            params=tuple(sorted(data.get("params", {}).items())),
            status=data.get("status", "building"),
        )


def canonical_json(value) -> str:
    """Canonical form used for hashing and byte-level comparisons."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise SchemaViolation(f"malformed endpoint {endpoint!r}", "/endpoint")
    return host, int(port)


def format_endpoint(host: str, port: int) -> str:
    return f"{host}:{port}"
