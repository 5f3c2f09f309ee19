"""Real HTTP gateways backed by a simulated cell world.

Each coordinator in the world gets a real ``POST /rpc`` endpoint with the
exact semantics of the node-embedded gateway, so browser consoles and the
CLI's ``--gateway`` mode work unchanged against a fully simulated fabric.
Virtual time advances with wall time (scaled by ``time_factor``) whenever a
request arrives, which keeps status syncs and liveness flowing while the
world stays deterministic for a given seed and request sequence.
"""

from __future__ import annotations

import logging
import time

from ..bus import Message
from ..errors import CellError, SchemaViolation
from ..model import NodeRole
from ..runtime_real import RealRuntime
from .scenario import SimWorld

logger = logging.getLogger(__name__)

MAX_ADVANCE = 60.0  # virtual seconds granted per request


class SimGatewayBridge:
    def __init__(self, world: SimWorld, time_factor: float = 20.0):
        self.world = world
        self.time_factor = time_factor
        self._last_wall = time.monotonic()
        self._servers = []
        self._runtime = RealRuntime()

    def _advance(self) -> None:
        now = time.monotonic()
        elapsed = (now - self._last_wall) * self.time_factor
        self._last_wall = now
        self.world.run(min(elapsed, MAX_ADVANCE))

    def _handler_for(self, node):
        async def handler(method: str, path: str, body):
            self._advance()
            if path == "/healthz" and method == "GET":
                return 200, {"node": node.id, "role": node.role.value,
                             "virtual_time": self.world.kernel.now}
            if path != "/rpc" or method != "POST":
                return 404, {"error": "POST /rpc or GET /healthz"}
            if not isinstance(body, dict):
                return 400, {"error": "JSON envelope body required"}
            try:
                msg_type = body["msg_type"]
                payload = body.get("payload", {})
                msg_id = body.get("msg_id") or "bridge-" + str(id(body))
                Message.make(msg_type, payload, msg_id)
            except (KeyError, TypeError) as exc:
                return 400, {"error": f"malformed envelope: {exc}"}
            except SchemaViolation as exc:
                return 400, {"error": exc.detail}
            try:
                response = self.world.request_to(node.id, msg_type, payload,
                                                 timeout=10.0, max_time=120.0)
            except CellError as exc:
                return 200, {"msg_type": "error.rejected", "msg_id": msg_id,
                             "payload": {"reason_code": exc.reason_code,
                                         "detail": exc.detail,
                                         "data": exc.data}}
            return 200, {"msg_type": response.msg_type, "msg_id": msg_id,
                         "payload": response.payload}

        return handler

    async def serve(self, host: str = "127.0.0.1",
                    base_port: int = 8800) -> list[tuple[str, int]]:
        """Bind one gateway per coordinator; returns (coordinator_id, port)."""
        bound = []
        index = 0
        for node in sorted(self.world.nodes.values(), key=lambda n: n.id):
            if node.role is not NodeRole.COORDINATOR or not node.running:
                continue
            want = 0 if base_port == 0 else base_port + index
            server = await self._runtime.listen_http(host, want,
                                                     self._handler_for(node))
            self._servers.append(server)
            bound.append((node.id, server.port))
            index += 1
        return bound

    def close(self) -> None:
        for server in self._servers:
            server.close()
        self._runtime.close()


def demo_world(seed: int = 7) -> SimWorld:
    """Two cells, four primaries, one skill: the console development world."""
    from ..descriptor import SkillLibrary, descriptor_from_dict

    GIB = 1024 ** 3
    library = SkillLibrary([descriptor_from_dict({
        "operation_name": "echo-transform",
        "io_protocols": [
            {"direction": "in", "protocol_id": "tcp-lines",
             "payload_type": "json"},
            {"direction": "out", "protocol_id": "tcp-lines",
             "payload_type": "json"},
        ],
        "models": [{
            "model_name": "annotate", "engine_kind": "primitive",
            "executor": "echo-transform",
            "deployments": [{
                "deployment_id": "cpu", "base_image": "images/echo",
                "requires_gpu": False, "supported_archs": ["amd64", "arm64"],
                "request": {"cpu": 500, "mem": GIB // 2, "disk": GIB // 4,
                            "gmem": 0},
            }],
        }],
    })])
    world = SimWorld(seed=seed, defaults={
        "presence_interval": 2.0, "liveness_interval": 5.0,
        "status_sync_interval": 5.0, "discovery_window": 2.5,
        "request_timeout": 3.0})
    world.add_coordinator("cell-a", library=library, arch="amd64")
    world.add_coordinator("cell-b", library=library, arch="amd64")
    world.run(0.3)
    for i, home in enumerate(["cell-a", "cell-a", "cell-b", "cell-b"]):
        world.add_primary(f"worker-{i}", coordinator=home, arch="amd64")
    world.run(3.0)
    return world
