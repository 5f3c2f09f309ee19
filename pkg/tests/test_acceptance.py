"""Acceptance criteria, one test per criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the PASS line
each criterion prints. The membership fuzz is the long pole (~2 min for
its ten thousand sequences); everything else finishes in seconds.
"""

import asyncio
import json
import random
import socket
import time

import pytest

from cellkit.bus import Handler, HandlerRegistry, Message, send_request
from cellkit.deployment import DeployAssignment, InstanceManager, ProcessBackend
from cellkit.descriptor import SkillLibrary, descriptor_from_dict
from cellkit.instance_io import load_instance
from cellkit.model import (
    DeploymentOption,
    GpuInventory,
    IoEndpoint,
    NodeRole,
    ResourceVector,
    TaskSpec,
)
from cellkit.node import NodeConfig, start_node
from cellkit.runtime_real import RealRuntime
from cellkit.scheduler import score_scheme
from cellkit.simnet import LatencyModel, SimWorld, formation_scenario, run_scenario

from fuzz import run_membership_fuzz
from gen import random_instance
from oracle import oracle_best
from test_scheduler import deployment, instance, node, operation, task
from test_scheduler_oracle import run_selection, scale_instance

GIB = 1024 ** 3


def ok(name: str, detail: str = "") -> None:
    print(f"PASS {name}" + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------- scheduler

N_ORACLE_INSTANCES = 1000


def test_scheduler_oracle_equivalence_and_constraint_soundness():
    """Criteria 1+2: winner equals the exhaustive evaluator's (score within
    1e-9, exact scheme under the tie-break); every returned scheme satisfies
    all three cumulative constraint families in exact integers."""
    started = time.perf_counter()
    rng = random.Random(20250809)
    feasible = violations = 0
    for i in range(N_ORACLE_INSTANCES):
        inst = random_instance(rng)
        expected = oracle_best(inst)
        actual = run_selection(inst)
        if expected is None:
            assert actual is None, f"instance {i}: oracle found nothing, " \
                                   f"scheduler found {actual}"
            continue
        assert actual is not None, f"instance {i}: scheduler found nothing"
        exp_assignments, exp_total = expected
        assert abs(actual.total - exp_total) <= 1e-9, f"instance {i}"
        got = [a.to_dict() for a in actual.scheme.assignments]
        assert got == exp_assignments, f"instance {i}: tie-break disagreement"
        feasible += 1
        if _violates_constraints(inst, got):
            violations += 1
    elapsed = time.perf_counter() - started
    assert violations == 0
    assert elapsed < 60.0, f"oracle run took {elapsed:.1f}s"
    ok("scheduler-oracle-equivalence",
       f"{N_ORACLE_INSTANCES} instances, {feasible} feasible, {elapsed:.1f}s")
    ok("constraint-soundness", f"0 violations across {feasible} schemes")


def _violates_constraints(inst, assignments) -> bool:
    """Independent integer re-check of the three constraint families."""
    nodes = {n["id"]: n for n in inst["nodes"]}
    deployments = {}
    for desc in inst["library"]:
        for model in desc["models"]:
            for dep in model["deployments"]:
                deployments[(desc["operation_name"], model["model_name"],
                             dep["deployment_id"])] = dep
    tasks = {t["task_id"]: t for t in inst["pipeline"]["tasks"]}
    per_node = {}
    per_gpu = {}
    for a in assignments:
        t = tasks[a["task_id"]]
        dep = deployments[(t["operation_name"], t["model_name"],
                           a["deployment_id"])]
        req = dep["request"]
        sums = per_node.setdefault(a["node"], {"cpu": 0, "mem": 0, "disk": 0,
                                               "pool": 0})
        sums["cpu"] += req["cpu"]
        sums["mem"] += req["mem"]
        sums["disk"] += req["disk"]
        sums["pool"] += req["mem"] + req.get("gmem", 0)
        if a["gpu_id"] is not None:
            key = (a["node"], a["gpu_id"])
            per_gpu[key] = per_gpu.get(key, 0) + req.get("gmem", 0)
    for node_id, sums in per_node.items():
        record = nodes[node_id]
        free = {k: record["capacity"][k] - record["usage"][k]
                for k in ("cpu", "mem", "disk")}
        if (sums["cpu"] > free["cpu"] or sums["mem"] > free["mem"]
                or sums["disk"] > free["disk"]):
            return True
        if record["gpu"]["unified_memory"] and sums["pool"] > free["mem"]:
            return True
    for (node_id, gpu_id), used in per_gpu.items():
        device = next(g for g in nodes[node_id]["gpu"]["gpus"]
                      if g["gpu_id"] == gpu_id)
        if used > device["mem_capacity"] - device["mem_used"]:
            return True
    return False


def test_hyperparameter_defaults():
    """Criterion 3: the GPU bonus is exactly -0.01/n with fractions equalized,
    and the load term enters with weight alpha = 0.1 (hand computation,
    1e-12)."""
    # GPU-vs-CPU pair with every fraction equalized, n = 2
    gpu_node = node("a", cpu=4000, mem=4 * GIB, disk=4 * GIB,
                    gpus=({"gpu_id": "gpu0", "mem_capacity": 4 * GIB,
                           "mem_used": 0},))
    inst = instance(
        [gpu_node],
        [operation("dual", deployment("cpu", 1000, GIB, GIB),
                   deployment("gpu", 1000, GIB, GIB, gmem=GIB)),
         operation("fixed", deployment("cpu", 1500, GIB + GIB // 2,
                                       GIB + GIB // 2))],
        [task("t1", "dual"), task("t2", "fixed")])
    pipeline, nodes, library, config = load_instance(json.dumps(inst))
    from cellkit.model import AllocationScheme, Assignment
    via_cpu = score_scheme(pipeline, nodes, library, AllocationScheme(
        (Assignment("t1", "a", "cpu"), Assignment("t2", "a", "cpu"))), config)
    via_gpu = score_scheme(pipeline, nodes, library, AllocationScheme(
        (Assignment("t1", "a", "gpu", "gpu0"), Assignment("t2", "a", "cpu"))),
        config)
    assert via_gpu.total - via_cpu.total == -0.01 / 2

    # alpha: stacking vs spreading over unequal nodes, hand-computed
    inst2 = instance(
        [node("x", cpu=4000, mem=4 * GIB, disk=4 * GIB),
         node("y", cpu=8000, mem=8 * GIB, disk=8 * GIB)],
        [operation("op1", deployment("cpu", 1000, GIB, GIB)),
         operation("op2", deployment("cpu", 1000, GIB, GIB))],
        [task("t1", "op1"), task("t2", "op2")])
    pipeline2, nodes2, library2, config2 = load_instance(json.dumps(inst2))
    stacked = score_scheme(pipeline2, nodes2, library2, AllocationScheme(
        (Assignment("t1", "x", "cpu"), Assignment("t2", "x", "cpu"))), config2)
    spread = score_scheme(pipeline2, nodes2, library2, AllocationScheme(
        (Assignment("t1", "x", "cpu"), Assignment("t2", "y", "cpu"))), config2)
    # all fractions equal in both schemes -> fraction terms are exactly 0;
    # spreading loads x at 0.25 and y at 0.125: variance 0.0625^2 = 0.00390625
    assert stacked.total == 0.0
    hand = 0.1 * 0.00390625
    assert abs(spread.total - hand) < 1e-12
    assert abs((spread.total - stacked.total) - hand) < 1e-12
    ok("hyperparameter-defaults",
       f"beta step {via_gpu.total - via_cpu.total}, alpha step {spread.total}")


@pytest.mark.parametrize("k", [2, 10, 1000])
def test_uniform_scaling_invariance(k):
    """Criterion 4: scaling every capacity/usage/request by k changes no
    total by more than 1e-9 and never changes the argmin scheme."""
    rng = random.Random(4242 + k)
    compared = 0
    for _ in range(120):
        inst = random_instance(rng)
        base = run_selection(inst)
        scaled = run_selection(scale_instance(inst, k))
        if base is None:
            assert scaled is None
            continue
        assert scaled is not None
        assert abs(base.total - scaled.total) <= 1e-9
        assert base.scheme == scaled.scheme
        compared += 1
    assert compared > 30
    ok(f"uniform-scaling-invariance[k={k}]", f"{compared} instances")


# --------------------------------------------------------------- membership

def test_size_balanced_formation():
    """Criterion 5: 3 coordinators + 12 sequential primaries end within
    max-min <= 1, across 100 seeds, in under 10 seconds."""
    started = time.perf_counter()
    for seed in range(100):
        result = run_scenario(formation_scenario(3, 12, seed=seed), trace=False)
        sizes = sorted(result["cell_sizes"].values())
        assert sum(sizes) == 15, (seed, sizes)
        assert sizes[-1] - sizes[0] <= 1, (seed, sizes)
        assert not result["task_errors"], (seed, result["task_errors"])
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"formation run took {elapsed:.1f}s"
    ok("size-balanced-formation", f"100 seeds, {elapsed:.1f}s")


FUZZ_SEQUENCES = 10_000


def test_membership_safety_fuzz():
    """Criterion 6: ten thousand randomized join/leave/transfer/partition
    sequences; at every quiescent checkpoint each primary is in exactly the
    registry the acknowledged history predicts, and definitively failed
    transfers leave both registries byte-identical."""
    started = time.perf_counter()
    violations = []
    for seed in range(FUZZ_SEQUENCES):
        violations += run_membership_fuzz(seed)
        if violations:
            break
    elapsed = time.perf_counter() - started
    assert violations == [], violations[:10]
    ok("membership-safety", f"{FUZZ_SEQUENCES} sequences, {elapsed:.0f}s")


# ---------------------------------------------------------------- deployment

def test_image_cache_reuse(tmp_path):
    """Criterion 7: same skill twice -> one build, one reuse; changed base
    image -> second build. Under one second on the process backend."""
    started = time.perf_counter()
    manager = InstanceManager("n1", ProcessBackend(str(tmp_path)),
                              ResourceVector(), GpuInventory(),
                              clock=time.time, workdir_root=str(tmp_path))

    def make_assignment(task_id, base_image, port):
        return DeployAssignment(
            task=TaskSpec(task_id, "relay", "m",
                          IoEndpoint("tcp-lines", f"127.0.0.1:{port}"),
                          IoEndpoint("tcp-lines", f"127.0.0.1:{port + 1}")),
            deployment=DeploymentOption("cpu", base_image, False, ("amd64",),
                                        ResourceVector(100, GIB // 4, GIB // 4)),
            engine_kind="primitive", entry="identity")

    manager.deploy(make_assignment("t1", "images/base", 19471))
    manager.deploy(make_assignment("t2", "images/base", 19481))
    assert (manager.cache.build_counter, manager.cache.reuse_counter) == (1, 1)
    manager.deploy(make_assignment("t3", "images/base-v2", 19491))
    assert manager.cache.build_counter == 2
    elapsed = time.perf_counter() - started
    manager.stop_all()
    assert elapsed < 1.0, f"cache exercise took {elapsed:.2f}s"
    ok("image-cache-reuse", f"builds=2 reuses=1 in {elapsed:.2f}s")


# -------------------------------------------------------------- end to end

E2E_PORTS = (19411, 19412, 19413)
E2E_ITEMS = 100


def test_end_to_end_walkthrough(tmp_path):
    """Criterion 8: coordinator + 2 primaries on real sockets; a 2-task
    identity pipeline over tcp-lines relays 100 items in order; termination
    returns resource bookkeeping to baseline. Under 30 seconds."""
    started = time.perf_counter()
    library = SkillLibrary([descriptor_from_dict({
        "operation_name": "relay",
        "io_protocols": [
            {"direction": "in", "protocol_id": "tcp-lines",
             "payload_type": "json"},
            {"direction": "out", "protocol_id": "tcp-lines",
             "payload_type": "json"},
        ],
        "models": [{
            "model_name": "m", "engine_kind": "primitive",
            "executor": "identity",
            "deployments": [{
                "deployment_id": "cpu", "base_image": "images/relay",
                "requires_gpu": False, "supported_archs": ["amd64"],
                "request": {"cpu": 500, "mem": GIB // 4, "disk": GIB // 4,
                            "gmem": 0},
            }],
        }],
    })])
    in_port, mid_port, out_port = E2E_PORTS
    pipeline = {"tasks": [
        {"task_id": "t1", "operation_name": "relay", "model_name": "m",
         "input": {"protocol_id": "tcp-lines",
                   "address": f"127.0.0.1:{in_port}"},
         "output": {"protocol_id": "tcp-lines",
                    "address": f"127.0.0.1:{mid_port}"}},
        {"task_id": "t2", "operation_name": "relay", "model_name": "m",
         "input": {"protocol_id": "tcp-lines",
                   "address": f"127.0.0.1:{mid_port}"},
         "output": {"protocol_id": "tcp-lines",
                    "address": f"127.0.0.1:{out_port}"}},
    ]}

    async def scenario():
        def config(name, role, **kw):
            return NodeConfig(
                role=role, node_id=name, bind_host="127.0.0.1", arch="amd64",
                capacity=ResourceVector(4000, 8 * GIB, 32 * GIB),
                state_dir=str(tmp_path / name),
                presence_interval=1.0, liveness_interval=0.5,
                status_sync_interval=0.5, **kw)

        rts = [RealRuntime() for _ in range(3)]
        coordinator = await start_node(
            config("c0", NodeRole.COORDINATOR), rts[0],
            backend=ProcessBackend(str(tmp_path / "c0")), library=library)
        primaries = [
            await start_node(
                config(f"p{i}", NodeRole.PRIMARY,
                       coordinator_endpoint=coordinator.record.control_endpoint),
                rts[i], backend=ProcessBackend(str(tmp_path / f"p{i}")))
            for i in (1, 2)]
        endpoint = coordinator.record.control_endpoint
        operator = RealRuntime()

        async def request(msg_type, payload, timeout=30.0):
            message = Message.make(msg_type, payload, operator.new_msg_id())
            return await send_request(operator, endpoint, message, timeout)

        try:
            # (2)-(4): cell formed with three members
            for _ in range(100):
                if len(coordinator.registry.members) == 3:
                    break
                await asyncio.sleep(0.05)
            snapshot = (await request("cell.query", {})).payload
            assert len(snapshot["members"]) == 3
            baseline = {m["record"]["id"]: m["record"]["usage"]
                        for m in snapshot["members"]}

            # (5): operator submits the two-task pipeline
            submit = (await request("task.submit", {"pipeline": pipeline})).payload
            assert len(submit["instances"]) == 2

            # (6): instances deployed; feed items through the data plane
            collector = socket.create_server(("127.0.0.1", out_port))
            collector.settimeout(20.0)
            feeder = None
            deadline = time.monotonic() + 15.0
            while True:
                try:
                    feeder = socket.create_connection(("127.0.0.1", in_port),
                                                      timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise
                    await asyncio.sleep(0.1)
            for i in range(E2E_ITEMS):
                feeder.sendall(json.dumps({"n": i}).encode() + b"\n")
            feeder.close()

            conn, _ = collector.accept()
            conn.settimeout(20.0)
            received = []
            buffer = b""
            while len(received) < E2E_ITEMS:
                chunk = await asyncio.get_event_loop().run_in_executor(
                    None, conn.recv, 65536)
                if not chunk:
                    break
                buffer += chunk
                *lines, buffer = buffer.split(b"\n")
                received.extend(json.loads(l) for l in lines if l.strip())
            conn.close()
            collector.close()
            assert received == [{"n": i} for i in range(E2E_ITEMS)]

            # teardown: terminate and verify bookkeeping returns to baseline
            for task_id in ("t1", "t2"):
                await request("task.terminate", {"task_id": task_id})
            for _ in range(100):
                snapshot = (await request("cell.query", {})).payload
                usage = {m["record"]["id"]: m["record"]["usage"]
                         for m in snapshot["members"]}
                if usage == baseline:
                    break
                await asyncio.sleep(0.1)
            assert usage == baseline
            statuses = {r["status"]
                        for records in snapshot["deployments"].values()
                        for r in records}
            assert statuses <= {"stopped"}
        finally:
            for node_obj in [coordinator] + primaries:
                await node_obj.stop()
            for rt in rts + [operator]:
                rt.close()

    asyncio.run(scenario())
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"end-to-end took {elapsed:.1f}s"
    ok("end-to-end-walkthrough",
       f"{E2E_ITEMS} items in order, baseline restored, {elapsed:.1f}s")


# ------------------------------------------------------------- message bus

def test_dispatch_precedence_property():
    """Criterion 9: pipeline > dedicated > reject for every message type,
    over randomized registries."""
    rng = random.Random(90210)
    types = ["cell.query", "cell.join", "cell.leave", "cell.transfer",
             "node.announce", "instance.status", "task.submit",
             "task.terminate"]
    checked = 0
    for _ in range(300):
        registry = HandlerRegistry()
        dedicated = set(rng.sample(types, rng.randint(0, len(types))))
        pipelines = set(rng.sample(types, rng.randint(0, len(types))))
        for t in dedicated:
            registry.register_handler(Handler(
                t, "node.announce.ok",
                lambda m: m.reply("node.announce.ok", {})))
        for t in pipelines:
            registry.register_pipeline([Handler(
                t, "node.announce.ok",
                lambda m: m.reply("node.announce.ok", {}))])
        for t in types:
            kind, _ = registry.resolve(t)
            if t in pipelines:
                assert kind == "pipeline"
            elif t in dedicated:
                assert kind == "dedicated"
            else:
                assert kind is None  # dispatch rejects with NoHandler
            checked += 1
    ok("dispatch-precedence", f"{checked} (registry, type) pairs")


# --------------------------------------------- overhead substitute criterion

def test_steady_state_message_bound():
    """Desk-scale substitute for the hardware overhead measurements: in a
    6-node cell idling for 600 virtual seconds, every node's control-message
    count stays within (presence^-1 + liveness^-1 + status-sync^-1) x 600 x 6,
    and the coordinator handles at most 5x any primary's traffic."""
    presence, liveness, status_sync = 2.0, 5.0, 10.0
    world = SimWorld(seed=77, latency=LatencyModel.uniform(0.002, 0.02),
                     defaults={"presence_interval": presence,
                               "liveness_interval": liveness,
                               "status_sync_interval": status_sync,
                               "discovery_window": 2.5,
                               "request_timeout": 2.0})
    world.add_coordinator("c0")
    world.run(0.2)
    primaries = [world.add_primary(f"p{i}", coordinator="c0")
                 for i in range(5)]
    world.run_until_true(lambda: all(p.cell == "c0" for p in primaries), 15.0)
    for counter in world.fabric.counters.values():  # measure steady state only
        counter.sent = counter.received = 0
    world.run(600.0)

    totals = {name: c.sent + c.received
              for name, c in world.fabric.counters.items()
              if name != "operator"}
    per_interval = 1 / presence + 1 / liveness + 1 / status_sync
    bound = per_interval * 600.0 * 6
    for name, total in totals.items():
        assert total <= bound, (name, total, bound)
    coordinator_total = totals["c0"]
    primary_max = max(totals[f"p{i}"] for i in range(5))
    assert coordinator_total <= 5 * primary_max, (coordinator_total,
                                                  primary_max)
    ok("steady-state-message-bound",
       f"max node {max(totals.values()):.0f} <= {bound:.0f}, "
       f"coordinator/primary ratio "
       f"{coordinator_total / primary_max:.2f} <= 5")
