"""Virtual network fabric: per-node runtimes over the discrete-event kernel.

Stream and HTTP requests are reliable-but-delayed (latency drawn from the
seeded model per leg); multicast datagrams suffer the configured drop rate
per receiver; partitions silently block traffic between the two groups,
losing in-flight responses the way a severed connection would.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConnectionRefused, PortInUse, RequestTimeout
from ..runtime import DatagramHandler, HttpHandler, Runtime, ServerHandle, StreamHandler, TaskHandle
from .kernel import SimFuture, SimKernel, SimTask


@dataclass(frozen=True)
class LatencyModel:
    """fixed(v): lo == hi; uniform: sampled per delivery leg."""

    lo: float = 0.005
    hi: float = 0.03

    @classmethod
    def fixed(cls, value: float) -> "LatencyModel":
        return cls(value, value)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "LatencyModel":
        return cls(lo, hi)

    def sample(self, rng) -> float:
        if self.hi <= self.lo:
            return self.lo
        return rng.uniform(self.lo, self.hi)


@dataclass
class Partition:
    pid: int
    group_a: frozenset
    group_b: frozenset

    def blocks(self, x: str, y: str) -> bool:
        return ((x in self.group_a and y in self.group_b)
                or (x in self.group_b and y in self.group_a))


@dataclass
class NodeCounters:
    sent: int = 0
    received: int = 0


class _SimTaskHandle(TaskHandle):
    def __init__(self, task: SimTask):
        self._task = task

    def cancel(self) -> None:
        self._task.cancel()


class _SimServer(ServerHandle):
    def __init__(self, host_obj: "_Host", port: int, kind: str, handler):
        self._host_obj = host_obj
        self.host = host_obj.address
        self.port = port
        self.kind = kind
        self.handler = handler

    def close(self) -> None:
        self._host_obj.listeners.pop(self.port, None)


@dataclass
class _Host:
    name: str
    address: str
    runtime: "SimRuntime"
    listeners: dict = field(default_factory=dict)  # port -> _SimServer
    datagram_handlers: list = field(default_factory=list)
    next_port: int = 40000


class SimFabric:
    def __init__(self, seed: int = 0, latency: LatencyModel | None = None,
                 drop_rate: float = 0.0, trace: bool = False):
        self.kernel = SimKernel(seed)
        self.latency = latency or LatencyModel()
        self.drop_rate = drop_rate
        self.tracing = trace
        self.trace: list[dict] = []
        self.hosts: dict[str, _Host] = {}       # address -> host
        self.by_name: dict[str, _Host] = {}
        self.counters: dict[str, NodeCounters] = {}
        self.partitions: dict[int, Partition] = {}
        self._next_partition = 0
        self._next_host = 1

    # --- topology ----------------------------------------------------------

    def runtime(self, name: str) -> "SimRuntime":
        if name in self.by_name:
            raise ValueError(f"node name {name!r} already on fabric")
        address = f"10.0.0.{self._next_host}"
        self._next_host += 1
        rt = SimRuntime(self, name, address)
        host = _Host(name=name, address=address, runtime=rt)
        self.hosts[address] = host
        self.by_name[name] = host
        self.counters[name] = NodeCounters()
        return rt

    def add_partition(self, group_a, group_b) -> int:
        pid = self._next_partition
        self._next_partition += 1
        self.partitions[pid] = Partition(pid, frozenset(group_a), frozenset(group_b))
        self.record("partition", id=pid, a=sorted(group_a), b=sorted(group_b))
        return pid

    def heal_partition(self, pid: int) -> None:
        if self.partitions.pop(pid, None) is not None:
            self.record("heal", id=pid)

    def heal_all(self) -> None:
        for pid in list(self.partitions):
            self.heal_partition(pid)

    def partitioned(self, name_a: str, name_b: str) -> bool:
        return any(p.blocks(name_a, name_b) for p in self.partitions.values())

    def record(self, kind: str, **fields) -> None:
        if self.tracing:
            self.trace.append({"t": round(self.kernel.now, 6), "kind": kind, **fields})

    # --- stream / http requests ---------------------------------------------

    def request(self, src: "SimRuntime", host: str, port: int, data: bytes,
                timeout: float, kind: str = "stream") -> SimFuture:
        fut = SimFuture()
        kernel = self.kernel
        self.counters[src.name].sent += 1

        def expire():
            fut.set_exception(RequestTimeout(
                f"no response from {host}:{port} within {timeout}s"))

        timeout_timer = kernel.call_later(timeout, expire)

        target = self.hosts.get(host)
        delay = self.latency.sample(kernel.rng)
        if (target is None or self.partitioned(src.name, target.name)):
            kernel.call_later(min(delay, timeout), fut.set_exception,
                              ConnectionRefused(f"{host}:{port} unreachable"))
            return fut
        kernel.call_later(delay, self._deliver_request, src, target, port,
                          data, fut, kind, timeout_timer)
        return fut

    def _deliver_request(self, src, target: _Host, port: int, data, fut: SimFuture,
                         kind: str, timeout_timer) -> None:
        if fut.done():
            return
        listener = target.listeners.get(port)
        if (listener is None or listener.kind != kind
                or self.partitioned(src.name, target.name)):
            fut.set_exception(ConnectionRefused(
                f"{target.address}:{port} refused connection"))
            return
        self.counters[target.name].received += 1
        self.kernel.spawn(self._serve(src, target, listener, data, fut, timeout_timer),
                          name=f"serve-{target.name}:{port}")

    async def _serve(self, src, target: _Host, listener: _SimServer, data,
                     fut: SimFuture, timeout_timer) -> None:
        try:
            if listener.kind == "stream":
                response = await listener.handler(data)
            else:
                method, path, body = data
                response = await listener.handler(method, path, body)
        except Exception as exc:
            response = None
            error = exc
        else:
            error = None
        self.counters[target.name].sent += 1
        delay = self.latency.sample(self.kernel.rng)

        def finish():
            if fut.done():
                return
            if self.partitioned(src.name, target.name):
                return  # response lost; requester times out
            self.counters[src.name].received += 1
            timeout_timer.cancel()
            if error is not None:
                fut.set_exception(ConnectionRefused(
                    f"peer handler failed: {error!r}"))
            else:
                fut.set_result(response)

        self.kernel.call_later(delay, finish)

    # --- multicast ------------------------------------------------------------

    def multicast(self, src: "SimRuntime", data: bytes) -> None:
        self.counters[src.name].sent += 1
        self.record("multicast", src=src.name, size=len(data))
        for host in self.hosts.values():
            for handler in list(host.datagram_handlers):
                if self.partitioned(src.name, host.name):
                    continue
                if self.drop_rate > 0 and self.kernel.rng.random() < self.drop_rate:
                    self.record("drop", src=src.name, dst=host.name)
                    continue
                delay = self.latency.sample(self.kernel.rng)
                self.kernel.call_later(delay, self._deliver_datagram, host,
                                       handler, data)

    def _deliver_datagram(self, host: _Host, handler: DatagramHandler,
                          data: bytes) -> None:
        if handler not in host.datagram_handlers:
            return  # listener left the group
        self.counters[host.name].received += 1
        handler(data)

    # --- convenience ------------------------------------------------------------

    def settle(self, duration: float = 2.0) -> None:
        self.kernel.run_for(duration)


class SimRuntime(Runtime):
    def __init__(self, fabric: SimFabric, name: str, address: str):
        self.fabric = fabric
        self.name = name
        self.address = address
        self._msg_seq = 0

    def now(self) -> float:
        return self.fabric.kernel.now

    def new_msg_id(self) -> str:
        # deterministic per node: replay equality depends on it
        self._msg_seq += 1
        return f"{self.address}-{self._msg_seq:08d}"

    def spawn(self, coro, name: str = "") -> TaskHandle:
        return _SimTaskHandle(self.fabric.kernel.spawn(coro, name or self.name))

    async def sleep(self, delay: float) -> None:
        await self.fabric.kernel.sleep(delay)

    async def request_bytes(self, host: str, port: int, data: bytes,
                            timeout: float) -> bytes:
        return await self.fabric.request(self, host, port, data, timeout, "stream")

    async def http_json(self, host: str, port: int, method: str, path: str,
                        body: dict | None, timeout: float) -> tuple[int, dict]:
        result = await self.fabric.request(self, host, port,
                                           (method, path, body), timeout, "http")
        return result

    async def listen_stream(self, host: str, port: int,
                            handler: StreamHandler) -> ServerHandle:
        return self._listen(port, "stream", handler)

    async def listen_http(self, host: str, port: int,
                          handler: HttpHandler) -> ServerHandle:
        return self._listen(port, "http", self._wrap_http(handler))

    def _wrap_http(self, handler: HttpHandler):
        async def serve(method, path, body):
            try:
                return await handler(method, path, body)
            except Exception as exc:
                return 500, {"error": repr(exc)}
        return serve

    def _listen(self, port: int, kind: str, handler) -> ServerHandle:
        host_obj = self.fabric.by_name[self.name]
        if port == 0:
            port = host_obj.next_port
            host_obj.next_port += 1
        elif port in host_obj.listeners:
            raise PortInUse(f"{self.address}:{port} already bound")
        server = _SimServer(host_obj, port, kind, handler)
        host_obj.listeners[port] = server
        return server

    def multicast_join(self, handler: DatagramHandler) -> None:
        self.fabric.by_name[self.name].datagram_handlers.append(handler)

    def multicast_send(self, data: bytes) -> None:
        self.fabric.multicast(self, data)

    def log_event(self, kind: str, **fields) -> None:
        self.fabric.record(kind, node=self.name, **fields)

    def leave_fabric(self) -> None:
        """Tear down listeners and group memberships when the node stops."""
        host_obj = self.fabric.by_name[self.name]
        host_obj.listeners.clear()
        host_obj.datagram_handlers.clear()
