"""Operator command line: enable nodes, inspect cells, move members,
submit and terminate task pipelines, run simulations, score instances.

Exit codes: 0 success, 2 usage error, 3 connectivity failure,
4 rejected by the coordination node.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import sys
import time

import click

from . import __version__
from .bus import Message, send_request
from .errors import CellError, ConnectionRefused, RequestTimeout
from .instance_io import load_instance
from .model import (
    GpuDevice,
    GpuInventory,
    NodeRole,
    ResourceVector,
    canonical_json,
    parse_endpoint,
)
from .node import NodeConfig, start_node
from .runtime_real import DEFAULT_MULTICAST_GROUP, DEFAULT_MULTICAST_PORT, RealRuntime
from .scheduler import score_all, select_scored
from .simnet import run_scenario, trace_to_ndjson

EXIT_CONNECTIVITY = 3
EXIT_REJECTED = 4

_SIZE_SUFFIXES = {"k": 1000, "ki": 1024, "m": 1000 ** 2, "mi": 1024 ** 2,
                  "g": 1000 ** 3, "gi": 1024 ** 3, "t": 1000 ** 4,
                  "ti": 1024 ** 4}


def parse_size(text: str) -> int:
    text = text.strip().lower()
    for suffix in sorted(_SIZE_SUFFIXES, key=len, reverse=True):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * _SIZE_SUFFIXES[suffix])
    return int(text)


def parse_capacity(text: str) -> ResourceVector:
    parts = dict(item.split("=", 1) for item in text.split(",") if item)
    return ResourceVector(
        cpu=int(parts.get("cpu", 0)),
        mem=parse_size(parts.get("mem", "0")),
        disk=parse_size(parts.get("disk", "0")),
        gmem=parse_size(parts.get("gmem", "0")),
    )


def client_call(msg_type: str, payload: dict, coordinator: str | None,
                gateway: str | None, timeout: float = 10.0) -> Message:
    """One request over framed TCP, or over the HTTP gateway with --gateway."""

    async def go() -> Message:
        rt = RealRuntime()
        if gateway:
            target = gateway.removeprefix("http://").rstrip("/")
            host, port = parse_endpoint(target)
            message = Message.make(msg_type, payload, rt.new_msg_id())
            status, body = await rt.http_json(host, port, "POST", "/rpc", {
                "msg_type": message.msg_type, "msg_id": message.msg_id,
                "payload": message.payload}, timeout)
            if status != 200:
                raise ConnectionRefused(f"gateway answered HTTP {status}: {body}")
            return Message.make(body["msg_type"], body["payload"],
                                body["msg_id"]).raise_if_rejected()
        message = Message.make(msg_type, payload, rt.new_msg_id())
        return await send_request(rt, coordinator, message, timeout)

    try:
        return asyncio.run(go())
    except (ConnectionRefused, RequestTimeout) as exc:
        click.echo(f"error: {exc.detail or exc}", err=True)
        sys.exit(EXIT_CONNECTIVITY)
    except CellError as exc:
        click.echo(f"rejected: {exc.reason_code}: {exc.detail}", err=True)
        if exc.data:
            click.echo(canonical_json(exc.data), err=True)
        sys.exit(EXIT_REJECTED)


def emit(payload: dict, as_json: bool, human) -> None:
    if as_json:
        click.echo(canonical_json(payload))
    else:
        human(payload)


def table(rows: list[list[str]], headers: list[str]) -> None:
    widths = [max(len(str(r[i])) for r in rows + [headers])
              for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    click.echo(fmt.format(*headers))
    click.echo(fmt.format(*("-" * w for w in widths)))
    for row in rows:
        click.echo(fmt.format(*(str(c) for c in row)))


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# --------------------------------------------------------------------- node

@main.group()
def node() -> None:
    """Enable or control this device as a cell node."""


@node.command("start")
@click.option("--coordinator", "as_coordinator", is_flag=True,
              help="enable as a coordination node")
@click.option("--coordinator-address", default=None, metavar="HOST:PORT",
              help="register directly with this coordination node")
@click.option("--interface", default="127.0.0.1", metavar="ADDR",
              help="bind address for inter-node communication")
@click.option("--node-id", default=None)
@click.option("--control-port", default=4100, show_default=True)
@click.option("--switch-port", default=4180, show_default=True)
@click.option("--gateway-port", default=None, type=int,
              help="expose the browser-facing HTTP /rpc gateway")
@click.option("--skills-dir", default=None, type=click.Path(exists=True))
@click.option("--state-dir", default="./cellkit-state", show_default=True)
@click.option("--capacity", default=None,
              metavar="cpu=4000,mem=8Gi,disk=32Gi",
              help="override detected capacity")
@click.option("--gpu", "gpus", multiple=True, metavar="ID:MEM",
              help="declare a discrete GPU (repeatable)")
@click.option("--unified-memory", is_flag=True,
              help="GPU shares the main memory pool")
@click.option("--multicast-group", default=DEFAULT_MULTICAST_GROUP,
              show_default=True)
@click.option("--multicast-port", default=DEFAULT_MULTICAST_PORT,
              show_default=True)
def node_start(as_coordinator, coordinator_address, interface, node_id,
               control_port, switch_port, gateway_port, skills_dir, state_dir,
               capacity, gpus, unified_memory, multicast_group, multicast_port):
    """Run a node in the foreground until SIGINT/SIGTERM."""
    devices = tuple(
        GpuDevice(gpu_id=item.split(":", 1)[0],
                  mem_capacity=parse_size(item.split(":", 1)[1]))
        for item in gpus)
    config = NodeConfig(
        role=NodeRole.COORDINATOR if as_coordinator else NodeRole.PRIMARY,
        node_id=node_id,
        bind_host=interface,
        control_port=control_port,
        registry_switch_port=switch_port,
        gateway_port=gateway_port,
        coordinator_endpoint=coordinator_address,
        capacity=parse_capacity(capacity) if capacity else None,
        gpu=GpuInventory(gpus=devices, unified_memory=unified_memory),
        skills_dir=skills_dir,
        state_dir=state_dir,
    )
    os.makedirs(state_dir, exist_ok=True)

    async def run() -> None:
        rt = RealRuntime(bind_host=interface, multicast_group=multicast_group,
                         multicast_port=multicast_port)
        running = await start_node(config, rt)
        with open(os.path.join(state_dir, "node.pid"), "w") as fh:
            fh.write(str(os.getpid()))
        click.echo(f"{running.role.value} node {running.id} on "
                   f"{running.record.control_endpoint} "
                   f"(registry switch {running.record.registry_switch_endpoint})")
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await running.stop()
        rt.close()

    try:
        asyncio.run(run())
    except CellError as exc:
        click.echo(f"error: {exc.reason_code}: {exc.detail}", err=True)
        sys.exit(2)
    finally:
        try:
            os.unlink(os.path.join(state_dir, "node.pid"))
        except OSError:
            pass


def _process_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    try:
        # a zombie awaiting its parent's reap counts as exited
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().rsplit(")", 1)[-1].split()[0] != "Z"
    except OSError:
        return True


@node.command("stop")
@click.option("--state-dir", default="./cellkit-state", show_default=True)
@click.option("--wait", default=10.0, show_default=True)
def node_stop(state_dir, wait):
    """Stop the node whose pidfile lives in --state-dir."""
    pidfile = os.path.join(state_dir, "node.pid")
    try:
        pid = int(open(pidfile).read().strip())
    except (OSError, ValueError):
        click.echo(f"no running node recorded in {state_dir}", err=True)
        sys.exit(EXIT_CONNECTIVITY)
    if not _process_alive(pid):
        click.echo("process already gone")
        return
    os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + wait
    while time.monotonic() < deadline:
        if not _process_alive(pid):
            click.echo(f"node (pid {pid}) stopped")
            return
        time.sleep(0.1)
    click.echo(f"pid {pid} still running after {wait}s", err=True)
    sys.exit(1)


@node.command("transfer")
@click.argument("primary")
@click.option("--dest", required=True, help="destination coordinator node id")
@click.option("--via", default=None, metavar="HOST:PORT",
              help="coordination node to send the request to")
@click.option("--gateway", default=None, metavar="URL")
@click.option("--json", "as_json", is_flag=True)
def node_transfer(primary, dest, via, gateway, as_json):
    """Move PRIMARY into the cell of coordinator --dest."""
    if not via and not gateway:
        raise click.UsageError("--via or --gateway required")
    response = client_call("cell.transfer", {"primary": primary, "dest": dest},
                           via, gateway, timeout=30.0)
    emit(response.payload, as_json, lambda p: click.echo(
        f"{p['primary']}: {p['source'] or '(independent)'} -> {p['dest']}"))


# --------------------------------------------------------------------- cell

@main.group()
def cell() -> None:
    """Inspect cells."""


@cell.command("show")
@click.option("--coordinator", default=None, metavar="HOST:PORT")
@click.option("--gateway", default=None, metavar="URL")
@click.option("--json", "as_json", is_flag=True,
              help="emit the exact cell.query.ok wire payload")
def cell_show(coordinator, gateway, as_json):
    if not coordinator and not gateway:
        raise click.UsageError("--coordinator or --gateway required")
    response = client_call("cell.query", {}, coordinator, gateway)

    def human(payload):
        rows = []
        for member in payload["members"]:
            record = member["record"]
            usage, cap = record["usage"], record["capacity"]
            rows.append([
                record["id"], record["role"], record["arch"],
                record["control_endpoint"],
                "yes" if member["active"] else "no",
                f"{usage['cpu']}/{cap['cpu']}m",
                f"{usage['mem'] // 2**20}/{cap['mem'] // 2**20}Mi",
                str(len(payload["deployments"].get(record["id"], []))),
            ])
        click.echo(f"cell of {payload['coordinator']}:")
        table(rows, ["node", "role", "arch", "endpoint", "active",
                     "cpu", "mem", "instances"])

    emit(response.payload, as_json, human)


@cell.command("list")
@click.option("--interface", default="127.0.0.1")
@click.option("--window", default=5.0, show_default=True,
              help="seconds to listen for presence announcements")
@click.option("--multicast-group", default=DEFAULT_MULTICAST_GROUP)
@click.option("--multicast-port", default=DEFAULT_MULTICAST_PORT)
@click.option("--json", "as_json", is_flag=True)
def cell_list(interface, window, multicast_group, multicast_port, as_json):
    """Discover coordinators (and independent primaries) via multicast."""
    seen: dict[str, dict] = {}

    async def listen() -> None:
        rt = RealRuntime(bind_host=interface, multicast_group=multicast_group,
                         multicast_port=multicast_port)

        def on_datagram(data: bytes) -> None:
            try:
                message = Message.decode(data)
            except CellError:
                return
            if message.msg_type == "node.announce":
                seen[message.payload["node_id"]] = message.payload

        rt.multicast_join(on_datagram)
        await asyncio.sleep(window)
        rt.close()

    try:
        asyncio.run(listen())
    except OSError as exc:
        click.echo(f"multicast unavailable on {interface}: {exc}", err=True)
        sys.exit(EXIT_CONNECTIVITY)
    payload = {"announcements": [seen[k] for k in sorted(seen)]}
    emit(payload, as_json, lambda p: table(
        [[a["node_id"], a["role"], a.get("cell_size", "-"),
          a["control_endpoint"]] for a in p["announcements"]],
        ["node", "role", "cell size", "endpoint"]))


# --------------------------------------------------------------------- task

@main.group()
def task() -> None:
    """Submit, terminate and inspect task pipelines."""


@task.command("submit")
@click.argument("pipeline_file", type=click.File("r"))
@click.option("--coordinator", default=None, metavar="HOST:PORT")
@click.option("--gateway", default=None, metavar="URL")
@click.option("--json", "as_json", is_flag=True)
def task_submit(pipeline_file, coordinator, gateway, as_json):
    """Submit the pipeline described by PIPELINE_FILE ({"tasks": [...]})."""
    if not coordinator and not gateway:
        raise click.UsageError("--coordinator or --gateway required")
    try:
        pipeline = json.load(pipeline_file)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"pipeline file is not valid JSON: {exc}")
    response = client_call("task.submit", {"pipeline": pipeline},
                           coordinator, gateway, timeout=60.0)

    def human(payload):
        rows = [[a["task_id"], a["node"], a["deployment_id"],
                 a["gpu_id"] or "-"]
                for a in payload["scheme"]["assignments"]]
        table(rows, ["task", "node", "deployment", "gpu"])
        click.echo("instances: " + ", ".join(
            f"{r['instance_id']} ({r['status']})"
            for r in payload["instances"]))

    emit(response.payload, as_json, human)


@task.command("terminate")
@click.argument("task_id")
@click.option("--coordinator", default=None, metavar="HOST:PORT")
@click.option("--gateway", default=None, metavar="URL")
@click.option("--json", "as_json", is_flag=True)
def task_terminate(task_id, coordinator, gateway, as_json):
    if not coordinator and not gateway:
        raise click.UsageError("--coordinator or --gateway required")
    response = client_call("task.terminate", {"task_id": task_id},
                           coordinator, gateway, timeout=60.0)
    emit(response.payload, as_json, lambda p: click.echo(
        f"stopped {len(p['stopped'])} instance(s): {', '.join(p['stopped'])}"))


@task.command("status")
@click.option("--task", "task_id", default=None, help="filter by task id")
@click.option("--coordinator", default=None, metavar="HOST:PORT")
@click.option("--gateway", default=None, metavar="URL")
@click.option("--json", "as_json", is_flag=True)
def task_status(task_id, coordinator, gateway, as_json):
    if not coordinator and not gateway:
        raise click.UsageError("--coordinator or --gateway required")
    response = client_call("cell.query", {}, coordinator, gateway)
    instances = [
        record
        for records in response.payload["deployments"].values()
        for record in records
        if task_id is None or record["task_id"] == task_id
    ]
    payload = {"instances": instances}
    emit(payload, as_json, lambda p: table(
        [[r["task_id"], r["instance_id"], r["node"], r["status"]]
         for r in p["instances"]],
        ["task", "instance", "node", "status"]))


# ---------------------------------------------------------------------- sim

@main.group()
def sim() -> None:
    """Deterministic multi-node simulation."""


@sim.command("serve")
@click.option("--seed", default=7, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--base-port", default=8800, show_default=True)
@click.option("--time-factor", default=20.0, show_default=True,
              help="virtual seconds per wall second while serving")
def sim_serve(seed, host, base_port, time_factor):
    """Serve the demo world's coordinators over real HTTP gateways."""
    from .simnet.bridge import SimGatewayBridge, demo_world

    async def run() -> None:
        bridge = SimGatewayBridge(demo_world(seed=seed),
                                  time_factor=time_factor)
        bound = await bridge.serve(host=host, base_port=base_port)
        for coordinator_id, port in bound:
            click.echo(f"READY {coordinator_id} http://{host}:{port}")
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        bridge.close()

    asyncio.run(run())


@sim.command("run")
@click.argument("scenario_file", type=click.File("rb"))
@click.option("--seed", default=None, type=int)
@click.option("--trace", "trace_file", default=None, type=click.Path(),
              help="write the newline-delimited JSON event trace here")
@click.option("--json", "as_json", is_flag=True)
def sim_run(scenario_file, seed, trace_file, as_json):
    """Execute a scenario script on the simulated fabric."""
    try:
        result = run_scenario(scenario_file.read(), seed=seed)
    except CellError as exc:
        click.echo(f"error: {exc.reason_code}: {exc.detail}", err=True)
        sys.exit(2)
    if trace_file:
        with open(trace_file, "w") as fh:
            fh.write(trace_to_ndjson(result["trace"]))
    summary = {
        "virtual_time": result["virtual_time"],
        "cell_sizes": result["cell_sizes"],
        "events": result["events"],
        "counters": result["counters"],
        "task_errors": result["task_errors"],
    }
    if as_json:
        click.echo(canonical_json(summary))
    else:
        click.echo(f"virtual time: {summary['virtual_time']:.3f}s")
        table([[c, s] for c, s in sorted(summary["cell_sizes"].items())],
              ["coordinator", "cell size"])
        for event in summary["events"]:
            status = "ok" if event["ok"] else f"error={event['error']}"
            click.echo(f"  t={event['at']:<8} {event['op']:<10} {status}")
        if summary["task_errors"]:
            click.echo(f"task errors: {summary['task_errors']}", err=True)
            sys.exit(1)


# --------------------------------------------------------------------- sched

@main.command("sched")
@click.argument("action", type=click.Choice(["score"]))
@click.argument("instance_file", type=click.File("rb"))
@click.option("--all", "show_all", is_flag=True,
              help="print every feasible scheme, not only the winner")
@click.option("--json", "as_json", is_flag=True)
def sched_cmd(action, instance_file, show_all, as_json):
    """Score a scheduling instance file (debug/oracle surface)."""
    try:
        pipeline, nodes, library, config = load_instance(instance_file.read())
        if show_all:
            scored = score_all(pipeline, nodes, library, config)
        else:
            scored = [select_scored(pipeline, nodes, library, config)]
    except CellError as exc:
        click.echo(f"error: {exc.reason_code}: {exc.detail}", err=True)
        sys.exit(EXIT_REJECTED)
    if as_json:
        click.echo(canonical_json({"schemes": [s.to_dict() for s in scored]}))
        return
    for rank, scheme in enumerate(scored):
        beta_sum = sum(t.beta for t in scheme.per_task)
        click.echo(f"#{rank}  total={scheme.total:.9f}  "
                   f"fraction_term={scheme.fraction_variance_term:.9f}  "
                   f"load_term={scheme.load_variance_term:.9f}  "
                   f"beta={beta_sum:+.3f}")
        for t in scheme.per_task:
            fractions = " ".join(f"{k}={v:.4f}" for k, v in t.fractions.items())
            click.echo(f"    {t.task_id} -> {t.node}/{t.deployment_id}"
                       f"{'/' + t.gpu_id if t.gpu_id else ''}  "
                       f"var={t.variance:.9f}  {fractions}")


if __name__ == "__main__":
    main()
