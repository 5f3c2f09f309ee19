"""asyncio socket runtime: framed TCP, a minimal HTTP/1.1 server/client,
and UDP multicast presence.

Stream requests and responses travel as a 4-byte big-endian length prefix
followed by the UTF-8 JSON envelope. The HTTP pieces implement just enough
of HTTP/1.1 (content-length bodies, connection: close) for the
registration-switch API and the browser-facing /rpc gateway, CORS included.
"""

from __future__ import annotations

import asyncio
import errno
import json
import logging
import secrets
import socket
import struct
import time

from .errors import ConnectionRefused, PortInUse, RequestTimeout
from .runtime import DatagramHandler, HttpHandler, Runtime, ServerHandle, StreamHandler, TaskHandle

logger = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 4 * 1024 * 1024
DEFAULT_MULTICAST_GROUP = "239.77.7.1"
DEFAULT_MULTICAST_PORT = 7707


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    header = await reader.readexactly(FRAME_HEADER.size)
    (length,) = FRAME_HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    return await reader.readexactly(length)


def frame(data: bytes) -> bytes:
    return FRAME_HEADER.pack(len(data)) + data


class _AsyncioTask(TaskHandle):
    def __init__(self, task: asyncio.Task):
        self._task = task

    def cancel(self) -> None:
        self._task.cancel()


class _AsyncioServer(ServerHandle):
    def __init__(self, server: asyncio.base_events.Server, host: str, port: int):
        self._server = server
        self.host = host
        self.port = port

    def close(self) -> None:
        self._server.close()


class _MulticastProtocol(asyncio.DatagramProtocol):
    def __init__(self, owner: "RealRuntime"):
        self._owner = owner

    def datagram_received(self, data: bytes, addr) -> None:
        for handler in list(self._owner._datagram_handlers):
            try:
                handler(data)
            except Exception:
                logger.exception("multicast handler failed")


class RealRuntime(Runtime):
    def __init__(self, bind_host: str = "127.0.0.1",
                 multicast_group: str = DEFAULT_MULTICAST_GROUP,
                 multicast_port: int = DEFAULT_MULTICAST_PORT):
        self.bind_host = bind_host
        self.multicast_group = multicast_group
        self.multicast_port = multicast_port
        self._datagram_handlers: list[DatagramHandler] = []
        self._recv_transport = None
        self._send_sock: socket.socket | None = None
        self._tasks: set[asyncio.Task] = set()

    # --- time / ids -----------------------------------------------------

    def now(self) -> float:
        return time.time()

    def new_msg_id(self) -> str:
        return secrets.token_hex(16)

    # --- task scheduling ------------------------------------------------

    def spawn(self, coro, name: str = "") -> TaskHandle:
        task = asyncio.get_running_loop().create_task(coro, name=name or None)
        self._tasks.add(task)
        task.add_done_callback(self._reap)
        return _AsyncioTask(task)

    def _reap(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            logger.error("background task %s failed", task.get_name(),
                         exc_info=task.exception())

    async def sleep(self, delay: float) -> None:
        await asyncio.sleep(delay)

    # --- framed stream request/response ----------------------------------

    async def request_bytes(self, host: str, port: int, data: bytes,
                            timeout: float) -> bytes:
        try:
            return await asyncio.wait_for(self._request(host, port, data), timeout)
        except asyncio.TimeoutError:
            raise RequestTimeout(f"no response from {host}:{port} "
                                 f"within {timeout}s") from None
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(f"{host}:{port} refused connection") from exc
        except OSError as exc:
            raise ConnectionRefused(f"{host}:{port} unreachable: {exc}") from exc

    async def _request(self, host: str, port: int, data: bytes) -> bytes:
        reader, writer = await asyncio.open_connection(host, port)
        try:
            writer.write(frame(data))
            await writer.drain()
            return await read_frame(reader)
        finally:
            writer.close()

    async def listen_stream(self, host: str, port: int,
                            handler: StreamHandler) -> ServerHandle:
        async def on_connection(reader: asyncio.StreamReader,
                                writer: asyncio.StreamWriter) -> None:
            try:
                while True:
                    try:
                        request = await read_frame(reader)
                    except (asyncio.IncompleteReadError, ConnectionResetError):
                        return
                    response = await handler(request)
                    writer.write(frame(response))
                    await writer.drain()
            except Exception:
                logger.exception("stream connection handler failed")
            finally:
                writer.close()

        try:
            server = await asyncio.start_server(on_connection, host, port)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"{host}:{port} already bound") from exc
            raise
        bound_port = server.sockets[0].getsockname()[1]
        return _AsyncioServer(server, host, bound_port)

    # --- minimal HTTP ------------------------------------------------------

    async def http_json(self, host: str, port: int, method: str, path: str,
                        body: dict | None, timeout: float) -> tuple[int, dict]:
        try:
            return await asyncio.wait_for(
                self._http_request(host, port, method, path, body), timeout)
        except asyncio.TimeoutError:
            raise RequestTimeout(f"no HTTP response from {host}:{port} "
                                 f"within {timeout}s") from None
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(f"{host}:{port} refused connection") from exc
        except OSError as exc:
            raise ConnectionRefused(f"{host}:{port} unreachable: {exc}") from exc

    async def _http_request(self, host, port, method, path, body):
        reader, writer = await asyncio.open_connection(host, port)
        try:
            payload = b"" if body is None else json.dumps(body).encode("utf-8")
            head = (f"{method} {path} HTTP/1.1\r\n"
                    f"Host: {host}:{port}\r\n"
                    f"Content-Type: application/json\r\n"
                    f"Content-Length: {len(payload)}\r\n"
                    f"Connection: close\r\n\r\n")
            writer.write(head.encode("ascii") + payload)
            await writer.drain()

            status_line = await reader.readline()
            parts = status_line.decode("ascii", "replace").split(" ", 2)
            status = int(parts[1]) if len(parts) >= 2 and parts[1].isdigit() else 502
            content_length = 0
            while True:
                line = await reader.readline()
                if line in (b"\r\n", b"\n", b""):
                    break
                name, _, value = line.decode("ascii", "replace").partition(":")
                if name.strip().lower() == "content-length":
                    content_length = int(value.strip())
            raw = await reader.readexactly(content_length) if content_length else b""
            data = json.loads(raw.decode("utf-8")) if raw else {}
            return status, data
        finally:
            writer.close()

    async def listen_http(self, host: str, port: int,
                          handler: HttpHandler) -> ServerHandle:
        async def on_connection(reader: asyncio.StreamReader,
                                writer: asyncio.StreamWriter) -> None:
            try:
                request_line = await reader.readline()
                if not request_line:
                    return
                parts = request_line.decode("ascii", "replace").split(" ")
                if len(parts) < 2:
                    return
                method, path = parts[0].upper(), parts[1]
                content_length = 0
                while True:
                    line = await reader.readline()
                    if line in (b"\r\n", b"\n", b""):
                        break
                    name, _, value = line.decode("ascii", "replace").partition(":")
                    if name.strip().lower() == "content-length":
                        content_length = int(value.strip())
                body = None
                if content_length:
                    raw = await reader.readexactly(content_length)
                    try:
                        body = json.loads(raw.decode("utf-8"))
                    except (UnicodeDecodeError, json.JSONDecodeError):
                        writer.write(_http_response(400, {"error": "invalid JSON body"}))
                        await writer.drain()
                        return
                if method == "OPTIONS":
                    writer.write(_http_response(204, None))
                    await writer.drain()
                    return
                status, response = await handler(method, path, body)
                writer.write(_http_response(status, response))
                await writer.drain()
            except Exception:
                logger.exception("http connection handler failed")
            finally:
                writer.close()

        try:
            server = await asyncio.start_server(on_connection, host, port)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"{host}:{port} already bound") from exc
            raise
        bound_port = server.sockets[0].getsockname()[1]
        return _AsyncioServer(server, host, bound_port)

    # --- multicast ---------------------------------------------------------

    def multicast_join(self, handler: DatagramHandler) -> None:
        self._datagram_handlers.append(handler)
        if self._recv_transport is None:
            asyncio.get_running_loop().create_task(self._open_multicast())

    async def _open_multicast(self) -> None:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM,
                                 socket.IPPROTO_UDP)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            if hasattr(socket, "SO_REUSEPORT"):
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
            sock.bind(("", self.multicast_port))
            membership = (socket.inet_aton(self.multicast_group)
                          + socket.inet_aton(self.bind_host))
            sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP,
                            membership)
            loop = asyncio.get_running_loop()
            transport, _ = await loop.create_datagram_endpoint(
                lambda: _MulticastProtocol(self), sock=sock)
            self._recv_transport = transport
        except OSError as exc:
            # discovery degrades gracefully; direct joins keep working
            logger.warning("multicast receive unavailable on %s: %s",
                           self.bind_host, exc)

    def multicast_send(self, data: bytes) -> None:
        try:
            if self._send_sock is None:
                sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM,
                                     socket.IPPROTO_UDP)
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
                sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF,
                                socket.inet_aton(self.bind_host))
                self._send_sock = sock
            self._send_sock.sendto(data,
                                   (self.multicast_group, self.multicast_port))
        except OSError as exc:
            logger.debug("multicast send failed: %s", exc)

    # --- shutdown ------------------------------------------------------------

    def close(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        if self._recv_transport is not None:
            self._recv_transport.close()
            self._recv_transport = None
        if self._send_sock is not None:
            self._send_sock.close()
            self._send_sock = None


def _http_response(status: int, body: dict | None) -> bytes:
    reasons = {200: "OK", 204: "No Content", 400: "Bad Request", 404: "Not Found",
               405: "Method Not Allowed", 409: "Conflict", 500: "Internal Server Error",
               502: "Bad Gateway"}
    payload = b"" if body is None else json.dumps(body).encode("utf-8")
    head = (f"HTTP/1.1 {status} {reasons.get(status, 'Status')}\r\n"
            f"Content-Type: application/json\r\n"
            f"Content-Length: {len(payload)}\r\n"
            f"Access-Control-Allow-Origin: *\r\n"
            f"Access-Control-Allow-Methods: GET, POST, PUT, OPTIONS\r\n"
            f"Access-Control-Allow-Headers: Content-Type\r\n"
            f"Connection: close\r\n\r\n")
    return head.encode("ascii") + payload
