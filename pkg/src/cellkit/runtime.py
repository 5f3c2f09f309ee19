"""Transport/scheduling interface that node logic is written against.

Two implementations exist: the asyncio-based socket runtime in
``runtime_real`` and the deterministic virtual fabric in ``simnet``. Node
code must obtain time, sleeps, ids, sockets and multicast exclusively
through this interface so the exact same protocol logic runs under both.

Registry state is only ever mutated from synchronous sections between
awaits; with both runtimes driving all node logic on a single event loop,
that gives each node one serialized stream of state-changing commands.
"""

from __future__ import annotations

import abc
from typing import Awaitable, Callable

StreamHandler = Callable[[bytes], Awaitable[bytes]]
HttpHandler = Callable[[str, str, "dict | None"], Awaitable[tuple[int, dict]]]
DatagramHandler = Callable[[bytes], None]


class ServerHandle(abc.ABC):
    host: str
    port: int

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    @abc.abstractmethod
    def close(self) -> None: ...


class TaskHandle(abc.ABC):
    @abc.abstractmethod
    def cancel(self) -> None: ...


class Runtime(abc.ABC):
    """Per-node access to clocks, identifiers, links and listeners."""

    @abc.abstractmethod
    def now(self) -> float: ...

    @abc.abstractmethod
    def new_msg_id(self) -> str: ...

    @abc.abstractmethod
    def spawn(self, coro, name: str = "") -> TaskHandle: ...

    @abc.abstractmethod
    async def sleep(self, delay: float) -> None: ...

    @abc.abstractmethod
    async def request_bytes(self, host: str, port: int, data: bytes,
                            timeout: float) -> bytes: ...

    @abc.abstractmethod
    async def http_json(self, host: str, port: int, method: str, path: str,
                        body: dict | None, timeout: float) -> tuple[int, dict]: ...

    @abc.abstractmethod
    async def listen_stream(self, host: str, port: int,
                            handler: StreamHandler) -> ServerHandle: ...

    @abc.abstractmethod
    async def listen_http(self, host: str, port: int,
                          handler: HttpHandler) -> ServerHandle: ...

    @abc.abstractmethod
    def multicast_join(self, handler: DatagramHandler) -> None: ...

    @abc.abstractmethod
    def multicast_send(self, data: bytes) -> None: ...

    def log_event(self, kind: str, **fields) -> None:
        """Optional trace hook; the simulated fabric records these."""
