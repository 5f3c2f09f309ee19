"""Scenario harness: many nodes on one virtual fabric, scripted or driven
imperatively from tests.

``SimWorld`` is the imperative surface; ``run_scenario`` executes a JSON
script (see the schema in the module docstring of ``load_script``) and
returns the event trace plus final registry snapshots. Identical seed and
script produce byte-identical traces.
"""

from __future__ import annotations

import json

from ..bus import Message, send_request
from ..deployment import FakeBackend
from ..descriptor import SkillLibrary, descriptor_from_dict
from ..errors import CellError, ScriptError
from ..model import GpuInventory, NodeRole, ResourceVector, canonical_json
from ..node import Node, NodeConfig
from .fabric import LatencyModel, SimFabric

GIB = 1024 ** 3

DEFAULT_CAPACITY = ResourceVector(cpu=4000, mem=8 * GIB, disk=32 * GIB)


class SimWorld:
    """A fabric plus the nodes living on it."""

    def __init__(self, seed: int = 0, latency: LatencyModel | None = None,
                 drop_rate: float = 0.0, trace: bool = False,
                 defaults: dict | None = None):
        self.fabric = SimFabric(seed=seed, latency=latency,
                                drop_rate=drop_rate, trace=trace)
        self.kernel = self.fabric.kernel
        self.nodes: dict[str, Node] = {}
        self.defaults = defaults or {}
        self._operator = self.fabric.runtime("operator")

    # --- node management ---------------------------------------------------

    def _config(self, name: str, role: NodeRole, runtime, **overrides) -> NodeConfig:
        merged = {
            "presence_interval": 2.0,
            "liveness_interval": 5.0,
            "status_sync_interval": 10.0,
            "discovery_window": 5.0,
            "request_timeout": 3.0,
            "capacity": DEFAULT_CAPACITY,
        }
        merged.update(self.defaults)
        merged.update(overrides)
        return NodeConfig(role=role, node_id=name, bind_host=runtime.address,
                          **merged)

    def add_node(self, name: str, role: NodeRole, library: SkillLibrary | None = None,
                 backend=None, **overrides) -> Node:
        runtime = self.fabric.runtime(name)
        config = self._config(name, role, runtime, **overrides)
        node = Node(config, runtime, backend=backend or FakeBackend(),
                    library=library)
        self.nodes[name] = node
        self.kernel.spawn(node.start(), f"start-{name}")
        self.kernel.run_until(self.kernel.now)  # let the listeners come up
        return node

    def add_coordinator(self, name: str, **overrides) -> Node:
        return self.add_node(name, NodeRole.COORDINATOR, **overrides)

    def add_primary(self, name: str, coordinator: str | None = None,
                    **overrides) -> Node:
        if coordinator is not None:
            overrides.setdefault("coordinator_endpoint",
                                 self.nodes[coordinator].record.control_endpoint)
        return self.add_node(name, NodeRole.PRIMARY, **overrides)

    def stop_node(self, name: str) -> None:
        node = self.nodes[name]
        self.kernel.spawn(node.stop(), f"stop-{name}")
        self.kernel.run_until(self.kernel.now)

    # --- time --------------------------------------------------------------

    def run(self, duration: float) -> None:
        self.kernel.run_for(duration)

    def run_until_true(self, predicate, max_time: float = 30.0) -> bool:
        deadline = self.kernel.now + max_time
        while not predicate():
            if self.kernel.now >= deadline or not self.kernel.step():
                return predicate()
        return True

    # --- operator actions ----------------------------------------------------

    def request(self, endpoint: str, msg_type: str, payload: dict,
                timeout: float = 5.0, max_time: float = 60.0) -> Message:
        """Issue one operator request and run the sim until it resolves."""
        box: dict = {}

        async def go():
            message = Message.make(msg_type, payload, self._operator.new_msg_id())
            try:
                box["ok"] = await send_request(self._operator, endpoint, message,
                                               timeout)
            except Exception as exc:
                box["err"] = exc

        self.kernel.spawn(go(), "operator-request")
        self.run_until_true(lambda: bool(box), max_time)
        if "err" in box:
            raise box["err"]
        if "ok" not in box:
            raise TimeoutError(f"operator request {msg_type} never resolved")
        return box["ok"]

    def request_to(self, node_name: str, msg_type: str, payload: dict,
                   **kw) -> Message:
        return self.request(self.nodes[node_name].record.control_endpoint,
                            msg_type, payload, **kw)

    def call(self, coro, max_time: float = 60.0):
        """Run an arbitrary coroutine inside the sim to completion."""
        box: dict = {}

        async def go():
            try:
                box["ok"] = await coro
            except Exception as exc:
                box["err"] = exc

        self.kernel.spawn(go(), "world-call")
        self.run_until_true(lambda: bool(box), max_time)
        if "err" in box:
            raise box["err"]
        if "ok" not in box:
            raise TimeoutError("call never resolved")
        return box["ok"]

    # --- inspection --------------------------------------------------------------

    def registry(self, name: str):
        return self.nodes[name].registry

    def coordinators(self) -> list[Node]:
        return [n for n in self.nodes.values()
                if n.role is NodeRole.COORDINATOR and n.running]

    def cell_sizes(self) -> dict[str, int]:
        return {n.id: n.registry.size() for n in self.coordinators()}

    def owners_of(self, primary_id: str) -> list[str]:
        return [n.id for n in self.coordinators()
                if primary_id in n.registry.members and n.id != primary_id]

    def canonical_registries(self) -> dict[str, str]:
        return {n.id: n.registry.canonical() for n in self.coordinators()}

    def counters(self) -> dict:
        return {name: {"sent": c.sent, "received": c.received}
                for name, c in self.fabric.counters.items()}


def _parse_resources(data: dict | None) -> ResourceVector | None:
    return ResourceVector.from_dict(data) if data else None


def load_script(source: str | bytes | dict) -> dict:
    """Validate a scenario script.

    Shape: {"seed": int, "latency": {...}, "drop_rate": float,
    "defaults": {...}, "library": [descriptor...], "nodes": [{"id", "role",
    "capacity"?, "gpu"?, "coordinator"?, "at"?}...], "events": [{"at", "op",
    ...}...], "run_until": float}. Ops: start, stop, transfer, submit,
    terminate, partition, heal.
    """
    if isinstance(source, (str, bytes)):
        try:
            script = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ScriptError(f"scenario is not valid JSON: {exc}") from exc
    else:
        script = source
    if not isinstance(script, dict) or "nodes" not in script:
        raise ScriptError("scenario must be an object with a nodes list")
    declared = set()
    for node in script["nodes"]:
        if "id" not in node or "role" not in node:
            raise ScriptError("every node needs id and role")
        if node["role"] not in ("coordinator", "primary"):
            raise ScriptError(f"unknown role {node['role']!r}")
        if node["id"] in declared:
            raise ScriptError(f"duplicate node id {node['id']!r}")
        declared.add(node["id"])
    known_ops = {"start", "stop", "transfer", "submit", "terminate",
                 "partition", "heal"}
    for event in script.get("events", []):
        op = event.get("op")
        if op not in known_ops:
            raise ScriptError(f"unknown op {op!r}")
        if "at" not in event:
            raise ScriptError(f"event {op!r} needs an 'at' time")
        for key in ("node", "primary", "dest", "via", "to"):
            if key in event and event[key] not in declared:
                raise ScriptError(f"event references undeclared node "
                                  f"{event[key]!r}")
        for key in ("a", "b"):
            if key in event:
                unknown = set(event[key]) - declared
                if unknown:
                    raise ScriptError(f"partition references undeclared "
                                      f"nodes {sorted(unknown)}")
    return script


def _latency_from(script: dict) -> LatencyModel | None:
    spec = script.get("latency")
    if not spec:
        return None
    if spec.get("model") == "fixed":
        return LatencyModel.fixed(float(spec["value"]))
    return LatencyModel.uniform(float(spec["min"]), float(spec["max"]))


def run_scenario(source: str | bytes | dict, seed: int | None = None,
                 trace: bool = True) -> dict:
    """Execute a scenario script; returns trace, registries and counters."""
    script = load_script(source)
    world = SimWorld(
        seed=seed if seed is not None else int(script.get("seed", 0)),
        latency=_latency_from(script),
        drop_rate=float(script.get("drop_rate", 0.0)),
        trace=trace,
        defaults=script.get("defaults", {}),
    )
    library = SkillLibrary([descriptor_from_dict(d)
                            for d in script.get("library", [])])
    declared = {n["id"]: n for n in script["nodes"]}
    partitions: list[int] = []
    results: list[dict] = []

    def start(spec: dict) -> None:
        overrides: dict = {}
        if spec.get("capacity"):
            overrides["capacity"] = _parse_resources(spec["capacity"])
        if spec.get("gpu"):
            overrides["gpu"] = GpuInventory.from_dict(spec["gpu"])
        role = NodeRole(spec["role"])
        if role is NodeRole.COORDINATOR:
            world.add_node(spec["id"], role, library=library, **overrides)
        else:
            if spec.get("coordinator"):
                target = world.nodes.get(spec["coordinator"])
                if target is not None and target.record is not None:
                    overrides["coordinator_endpoint"] = target.record.control_endpoint
            world.add_node(spec["id"], role, **overrides)

    def operate(event: dict) -> None:
        op = event["op"]
        try:
            if op == "start":
                start(declared[event["node"]])
            elif op == "stop":
                world.stop_node(event["node"])
            elif op == "transfer":
                world.request_to(event.get("via") or event["dest"],
                                 "cell.transfer",
                                 {"primary": event["primary"],
                                  "dest": event["dest"]})
            elif op == "submit":
                world.request_to(event["to"], "task.submit",
                                 {"pipeline": event["pipeline"]})
            elif op == "terminate":
                world.request_to(event["to"], "task.terminate",
                                 {"task_id": event["task"]})
            elif op == "partition":
                partitions.append(world.fabric.add_partition(event["a"],
                                                             event["b"]))
            elif op == "heal":
                if partitions:
                    world.fabric.heal_partition(partitions.pop())
            results.append({"at": event["at"], "op": op, "ok": True})
        except CellError as exc:
            results.append({"at": event["at"], "op": op, "ok": False,
                            "error": exc.reason_code})

    events = sorted(script.get("events", []), key=lambda e: (e["at"],))
    auto_start = [n for n in script["nodes"] if "at" not in n]
    for spec in auto_start:
        start(spec)
    for event in events:
        world.run(max(0.0, event["at"] - world.kernel.now))
        operate(event)
    horizon = float(script.get("run_until",
                               (events[-1]["at"] + 5.0) if events else 10.0))
    world.run(max(0.0, horizon - world.kernel.now))

    return {
        "trace": world.fabric.trace,
        "events": results,
        "registries": {n.id: n.registry.snapshot()
                       for n in world.coordinators()},
        "canonical": world.canonical_registries(),
        "cell_sizes": world.cell_sizes(),
        "counters": world.counters(),
        "virtual_time": world.kernel.now,
        "task_errors": [(name, repr(exc))
                        for name, exc in world.kernel.task_errors],
    }


def trace_to_ndjson(trace: list[dict]) -> str:
    return "\n".join(canonical_json(event) for event in trace) + "\n"


def formation_scenario(n_coordinators: int, n_primaries: int,
                       seed: int = 0) -> dict:
    """Batch formation: coordinators first, primaries join by discovery."""
    nodes = [{"id": f"c{i}", "role": "coordinator"}
             for i in range(n_coordinators)]
    events = []
    for i in range(n_primaries):
        nodes.append({"id": f"p{i}", "role": "primary", "at": 0.0})
        # sequential joins: spaced wider than the discovery window
        events.append({"at": 0.5 + 3.0 * i, "op": "start", "node": f"p{i}"})
    horizon = 0.5 + 3.0 * n_primaries + 3.0
    return {"seed": seed, "nodes": nodes, "events": events,
            "run_until": horizon,
            "defaults": {"discovery_window": 2.5}}
