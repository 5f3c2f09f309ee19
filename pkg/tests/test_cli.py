"""CLI surface: sched score oracle harness, sim run, live-cell commands."""

import asyncio
import json
import threading

import pytest
from click.testing import CliRunner

from cellkit.cli import main, parse_capacity, parse_size
from cellkit.deployment import FakeBackend
from cellkit.descriptor import SkillLibrary, descriptor_from_dict
from cellkit.model import NodeRole, ResourceVector
from cellkit.node import NodeConfig, start_node
from cellkit.runtime_real import RealRuntime
from cellkit.simnet import formation_scenario

from test_deployment import library_doc, pipeline_doc

GIB = 1024 ** 3


def invoke(*args, **kw):
    # click >= 8.2 captures stderr separately by default
    return CliRunner().invoke(main, args, **kw)


class TestParsers:
    def test_sizes(self):
        assert parse_size("512") == 512
        assert parse_size("2Ki") == 2048
        assert parse_size("1Gi") == GIB
        assert parse_size("3g") == 3 * 10 ** 9

    def test_capacity(self):
        vec = parse_capacity("cpu=4000,mem=8Gi,disk=32Gi")
        assert vec == ResourceVector(4000, 8 * GIB, 32 * GIB, 0)


def write_instance(tmp_path, feasible=True):
    instance = {
        "config": {"alpha": 0.1, "beta_gpu": -0.01},
        "nodes": [{
            "id": "n1", "role": "primary", "arch": "amd64",
            "control_endpoint": "10.0.0.1:1",
            "registry_switch_endpoint": "10.0.0.1:2",
            "capacity": {"cpu": 4000, "mem": 4 * GIB, "disk": 4 * GIB, "gmem": 0},
            "usage": {"cpu": 0, "mem": 0, "disk": 0, "gmem": 0},
            "gpu": {"gpus": [], "unified_memory": False},
            "cell": None,
        }],
        "library": [library_doc(gmem=0 if feasible else GIB)],
        "pipeline": pipeline_doc(1),
    }
    path = tmp_path / "instance.json"
    path.write_text(json.dumps(instance))
    return path


class TestSchedScore:
    def test_winner_breakdown(self, tmp_path):
        result = invoke("sched", "score", str(write_instance(tmp_path)))
        assert result.exit_code == 0, result.output
        assert "total=" in result.output
        assert "t0 -> n1/cpu" in result.output

    def test_all_schemes_json(self, tmp_path):
        result = invoke("sched", "score", str(write_instance(tmp_path)),
                        "--all", "--json")
        assert result.exit_code == 0
        schemes = json.loads(result.output)["schemes"]
        assert len(schemes) == 1
        assert schemes[0]["per_task"][0]["fractions"]["cpu"] == 0.125

    def test_infeasible_exits_4(self, tmp_path):
        result = invoke("sched", "score", str(write_instance(tmp_path,
                                                             feasible=False)))
        assert result.exit_code == 4

    def test_usage_error_exits_2(self):
        result = invoke("sched", "score", "/does/not/exist.json")
        assert result.exit_code == 2


class TestSimRun:
    def test_scenario_summary_and_trace(self, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps(formation_scenario(2, 3, seed=5)))
        trace_a = tmp_path / "a.ndjson"
        trace_b = tmp_path / "b.ndjson"
        first = invoke("sim", "run", str(scenario), "--trace", str(trace_a))
        second = invoke("sim", "run", str(scenario), "--trace", str(trace_b))
        assert first.exit_code == 0, first.output
        assert "cell size" in first.output
        assert trace_a.read_bytes() == trace_b.read_bytes()

    def test_seed_override_changes_trace(self, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps(formation_scenario(2, 3, seed=5)))
        trace_a = tmp_path / "a.ndjson"
        trace_b = tmp_path / "b.ndjson"
        invoke("sim", "run", str(scenario), "--trace", str(trace_a))
        invoke("sim", "run", str(scenario), "--seed", "99",
               "--trace", str(trace_b))
        assert trace_a.read_bytes() != trace_b.read_bytes()

    def test_bad_scenario_exits_2(self, tmp_path):
        scenario = tmp_path / "bad.json"
        scenario.write_text("{broken")
        result = invoke("sim", "run", str(scenario))
        assert result.exit_code == 2


@pytest.fixture(scope="module")
def live_cell():
    """A coordinator + 1 primary on real loopback sockets, FakeBackend."""
    loop = asyncio.new_event_loop()
    thread = threading.Thread(target=loop.run_forever, daemon=True)
    thread.start()
    library = SkillLibrary([descriptor_from_dict(library_doc())])
    nodes = []

    async def build():
        coordinator = await start_node(NodeConfig(
            role=NodeRole.COORDINATOR, node_id="c0", bind_host="127.0.0.1",
            arch="amd64", capacity=ResourceVector(4000, 8 * GIB, 32 * GIB),
            presence_interval=0.5, liveness_interval=0.5,
            status_sync_interval=0.5,
        ), RealRuntime(), backend=FakeBackend(), library=library)
        primary = await start_node(NodeConfig(
            role=NodeRole.PRIMARY, node_id="p1", bind_host="127.0.0.1",
            arch="amd64", capacity=ResourceVector(4000, 8 * GIB, 32 * GIB),
            coordinator_endpoint=coordinator.record.control_endpoint,
            presence_interval=0.5, liveness_interval=0.5,
            status_sync_interval=0.5,
        ), RealRuntime(), backend=FakeBackend())
        nodes.extend([coordinator, primary])
        for _ in range(100):
            if coordinator.registry.size() == 2:
                break
            await asyncio.sleep(0.05)
        assert coordinator.registry.size() == 2
        return coordinator.record.control_endpoint

    endpoint = asyncio.run_coroutine_threadsafe(build(), loop).result(20)
    yield endpoint

    async def teardown():
        for node in nodes:
            await node.stop()

    asyncio.run_coroutine_threadsafe(teardown(), loop).result(20)
    loop.call_soon_threadsafe(loop.stop)
    thread.join(5)


class TestLiveCommands:
    def test_cell_show(self, live_cell):
        result = invoke("cell", "show", "--coordinator", live_cell)
        assert result.exit_code == 0, result.output
        assert "c0" in result.output and "p1" in result.output

    def test_cell_show_json_is_exact_wire_payload(self, live_cell):
        result = invoke("cell", "show", "--coordinator", live_cell, "--json")
        payload = json.loads(result.output)
        assert payload["coordinator"] == "c0"
        assert {m["record"]["id"] for m in payload["members"]} == {"c0", "p1"}

    def test_submit_then_status_then_terminate(self, live_cell, tmp_path):
        pipeline = tmp_path / "pipeline.json"
        pipeline.write_text(json.dumps(pipeline_doc(2)))
        result = invoke("task", "submit", str(pipeline),
                        "--coordinator", live_cell, "--json")
        assert result.exit_code == 0, result.stderr
        payload = json.loads(result.output)
        assert len(payload["scheme"]["assignments"]) == 2

        status = invoke("task", "status", "--coordinator", live_cell)
        assert status.exit_code == 0
        assert "running" in status.output

        for task_id in {a["task_id"] for a in payload["scheme"]["assignments"]}:
            done = invoke("task", "terminate", task_id,
                          "--coordinator", live_cell)
            assert done.exit_code == 0, done.stderr

        second = invoke("task", "terminate", "t0", "--coordinator", live_cell)
        assert second.exit_code == 4  # UnknownTask after cleanup

    def test_unreachable_coordinator_exits_3(self):
        result = invoke("cell", "show", "--coordinator", "127.0.0.1:1")
        assert result.exit_code == 3

    def test_missing_target_is_usage_error(self):
        result = invoke("cell", "show")
        assert result.exit_code == 2


class TestNodeStartStop:
    def test_foreground_node_with_pidfile_lifecycle(self, tmp_path):
        import subprocess
        import sys
        import time as time_mod

        state_dir = tmp_path / "state"
        proc = subprocess.Popen(
            [sys.executable, "-m", "cellkit.cli", "node", "start",
             "--coordinator", "--node-id", "cli-c0",
             "--interface", "127.0.0.1", "--control-port", "0",
             "--switch-port", "0", "--state-dir", str(state_dir),
             "--capacity", "cpu=2000,mem=2Gi,disk=8Gi"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        try:
            pidfile = state_dir / "node.pid"
            deadline = time_mod.monotonic() + 15
            while time_mod.monotonic() < deadline and not pidfile.exists():
                time_mod.sleep(0.1)
            assert pidfile.exists(), proc.stdout.read() if proc.poll() else ""

            result = invoke("node", "stop", "--state-dir", str(state_dir))
            assert result.exit_code == 0, result.output
            assert proc.wait(10) == 0
        finally:
            if proc.poll() is None:
                proc.kill()

    def test_stop_without_pidfile_exits_3(self, tmp_path):
        result = invoke("node", "stop", "--state-dir", str(tmp_path))
        assert result.exit_code == 3