"""Skill execution runtime.

Two engine kinds mirror the skill model's dual path: the primitive engine
drives a continuous input-process-output loop around a user executor with
pluggable protocol handlers, and the standalone engine wraps an existing
executable unmodified, passing configuration through environment
variables.

Payloads are JSON values carried newline-delimited. Two reference protocol
handlers ship: ``tcp-lines`` (input side listens, output side connects)
and ``file`` (input tails, output appends). Handlers are interchangeable:
identical payloads through either produce identical outputs.
"""

from __future__ import annotations

import importlib
import json
import logging
import os
import signal
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import DuplicateExecutor, EarlyExit, LaunchFailed, UnknownExecutor, UnknownProtocol
from .model import IoEndpoint, parse_endpoint

logger = logging.getLogger(__name__)

FAILURE_THRESHOLD = 5  # consecutive process() errors before the instance fails
POLL_INTERVAL = 0.05
PARAM_PREFIX = "CELL_"


# --- executors -------------------------------------------------------------

class Executor:
    """User processing logic: one process() call per item, release() on stop."""

    def process(self, payload):
        raise NotImplementedError

    def release(self) -> None:
        pass


class IdentityExecutor(Executor):
    def __init__(self, params: dict | None = None):
        pass

    def process(self, payload):
        return payload


class EchoTransformExecutor(Executor):
    """Sample skill: wraps each item with a tag and a sequence number."""

    def __init__(self, params: dict | None = None):
        params = params or {}
        self._tag = params.get("CELL_TAG", params.get("CELL_TASK_ID", "echo"))
        self._seq = 0

    def process(self, payload):
        self._seq += 1
        return {"item": payload, "tag": self._tag, "seq": self._seq}


class ExecutorRegistry:
    def __init__(self):
        self._factories: dict[str, Callable] = {}

    def register(self, executor_id: str, factory: Callable) -> None:
        if executor_id in self._factories:
            raise DuplicateExecutor(f"executor {executor_id!r} already registered")
        self._factories[executor_id] = factory

    def create(self, executor_id: str, params: dict | None = None) -> Executor:
        factory = self._factories.get(executor_id)
        if factory is None and ":" in executor_id:
            module_name, _, attr = executor_id.partition(":")
            try:
                factory = getattr(importlib.import_module(module_name), attr)
            except (ImportError, AttributeError) as exc:
                raise UnknownExecutor(
                    f"cannot import executor {executor_id!r}: {exc}") from exc
        if factory is None:
            raise UnknownExecutor(f"executor {executor_id!r} not registered")
        return factory(params or {})


def builtin_executors() -> ExecutorRegistry:
    registry = ExecutorRegistry()
    registry.register("identity", IdentityExecutor)
    registry.register("echo-transform", EchoTransformExecutor)
    return registry


# --- protocol handlers -------------------------------------------------------

class InputHandler:
    def open(self, address: str) -> None: ...

    def read(self, stop: threading.Event):
        """Next payload, or None when nothing arrived within the poll window."""
        raise NotImplementedError

    def close(self) -> None: ...


class OutputHandler:
    def open(self, address: str) -> None: ...

    def publish(self, payload, stop: threading.Event) -> bool:
        """True once delivered; False when stopping before delivery succeeded."""
        raise NotImplementedError

    def close(self) -> None: ...


class TcpLinesInput(InputHandler):
    """Listens at the input address; peers connect and stream JSON lines."""

    def open(self, address: str) -> None:
        host, port = parse_endpoint(address)
        self._server = socket.create_server((host, port))
        self._server.settimeout(POLL_INTERVAL)
        self._conn: socket.socket | None = None
        self._buffer = b""
        self._lines: list[bytes] = []

    def read(self, stop: threading.Event):
        if self._lines:
            return json.loads(self._lines.pop(0))
        if self._conn is None:
            try:
                self._conn, _ = self._server.accept()
                self._conn.settimeout(POLL_INTERVAL)
            except socket.timeout:
                return None
        try:
            chunk = self._conn.recv(65536)
        except socket.timeout:
            return None
        except OSError:
            chunk = b""
        if not chunk:
            self._conn.close()
            self._conn = None
            return None
        self._buffer += chunk
        *lines, self._buffer = self._buffer.split(b"\n")
        self._lines.extend(line for line in lines if line.strip())
        return json.loads(self._lines.pop(0)) if self._lines else None

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
        self._server.close()


class TcpLinesOutput(OutputHandler):
    """Connects to the downstream address, retrying with backoff."""

    def open(self, address: str) -> None:
        self._address = parse_endpoint(address)
        self._sock: socket.socket | None = None

    def _connect(self, stop: threading.Event) -> bool:
        backoff = 0.05
        while not stop.is_set():
            try:
                self._sock = socket.create_connection(self._address, timeout=1.0)
                return True
            except OSError:
                time.sleep(backoff)
                backoff = min(backoff * 2, 1.0)
        return False

    def publish(self, payload, stop: threading.Event) -> bool:
        line = json.dumps(payload, separators=(",", ":")).encode() + b"\n"
        while not stop.is_set():
            if self._sock is None and not self._connect(stop):
                return False
            try:
                self._sock.sendall(line)
                return True
            except OSError:
                self._sock.close()
                self._sock = None
        return False

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()


class FileInput(InputHandler):
    """Tails a newline-delimited JSON file from the beginning."""

    def open(self, address: str) -> None:
        self._path = address
        self._fh = None

    def read(self, stop: threading.Event):
        if self._fh is None:
            if not os.path.exists(self._path):
                time.sleep(POLL_INTERVAL)
                return None
            self._fh = open(self._path, "r", encoding="utf-8")
        where = self._fh.tell()
        line = self._fh.readline()
        if not line.endswith("\n"):
            self._fh.seek(where)
            time.sleep(POLL_INTERVAL)
            return None
        if not line.strip():
            return None
        return json.loads(line)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


class FileOutput(OutputHandler):
    def open(self, address: str) -> None:
        self._fh = open(address, "a", encoding="utf-8")

    def publish(self, payload, stop: threading.Event) -> bool:
        self._fh.write(json.dumps(payload, separators=(",", ":")) + "\n")
        self._fh.flush()
        return True

    def close(self) -> None:
        self._fh.close()


class ProtocolRegistry:
    def __init__(self):
        self._inputs: dict[str, Callable[[], InputHandler]] = {}
        self._outputs: dict[str, Callable[[], OutputHandler]] = {}

    def register_input(self, protocol_id: str, factory) -> None:
        self._inputs[protocol_id] = factory

    def register_output(self, protocol_id: str, factory) -> None:
        self._outputs[protocol_id] = factory

    def create_input(self, protocol_id: str) -> InputHandler:
        try:
            return self._inputs[protocol_id]()
        except KeyError:
            raise UnknownProtocol(f"no input handler for {protocol_id!r}") from None

    def create_output(self, protocol_id: str) -> OutputHandler:
        try:
            return self._outputs[protocol_id]()
        except KeyError:
            raise UnknownProtocol(f"no output handler for {protocol_id!r}") from None


def default_protocols() -> ProtocolRegistry:
    registry = ProtocolRegistry()
    registry.register_input("tcp-lines", TcpLinesInput)
    registry.register_output("tcp-lines", TcpLinesOutput)
    registry.register_input("file", FileInput)
    registry.register_output("file", FileOutput)
    return registry


# --- engine bindings ----------------------------------------------------------

@dataclass(frozen=True)
class EngineBinding:
    engine_kind: str  # "primitive" | "standalone"
    input_endpoint: Optional[IoEndpoint]
    output_endpoint: Optional[IoEndpoint]
    executor_id: str  # executor name/import path, or JSON argv for standalone
    params: dict = field(default_factory=dict)


class PrimitiveInstance:
    """One continuous input-process-output loop on its own thread."""

    def __init__(self, binding: EngineBinding,
                 protocols: ProtocolRegistry | None = None,
                 executors: ExecutorRegistry | None = None,
                 failure_threshold: int = FAILURE_THRESHOLD,
                 input_handler: InputHandler | None = None,
                 output_handler: OutputHandler | None = None):
        protocols = protocols or default_protocols()
        executors = executors or builtin_executors()
        self.binding = binding
        self._executor = executors.create(binding.executor_id, binding.params)
        self._input = input_handler or protocols.create_input(
            binding.input_endpoint.protocol_id)
        self._output = output_handler or protocols.create_output(
            binding.output_endpoint.protocol_id)
        self._threshold = failure_threshold
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"skill-{binding.params.get('CELL_INSTANCE_ID', 'loop')}")
        self._released = False
        self.status = "building"
        self.processed = 0
        self.failures = 0
        self.input_errors = 0
        self._consecutive = 0

    def start(self) -> "PrimitiveInstance":
        if self.binding.input_endpoint is not None:
            self._input.open(self.binding.input_endpoint.address)
        if self.binding.output_endpoint is not None:
            self._output.open(self.binding.output_endpoint.address)
        self.status = "running"
        self._thread.start()
        return self

    def _run(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    item = self._input.read(self._stop)
                except Exception:
                    self.input_errors += 1
                    logger.exception("input handler failed; retrying")
                    time.sleep(POLL_INTERVAL)
                    continue
                if item is None:
                    continue
                try:
                    result = self._executor.process(item)
                except Exception:
                    self.failures += 1
                    self._consecutive += 1
                    logger.exception("executor failed on item %d", self.processed)
                    if self._consecutive >= self._threshold:
                        self.status = "failed"
                        return
                    continue
                self._consecutive = 0
                if self._output.publish(result, self._stop):
                    self.processed += 1
        finally:
            self._release_once()
            self._input.close()
            self._output.close()
            if self.status == "running":
                self.status = "stopped"

    def _release_once(self) -> None:
        if not self._released:
            self._released = True
            try:
                self._executor.release()
            except Exception:
                logger.exception("executor release failed")

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        self._thread.join(timeout)

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)


def run_primitive_loop(binding: EngineBinding, **kwargs) -> PrimitiveInstance:
    return PrimitiveInstance(binding, **kwargs).start()


class StandaloneInstance:
    """Wraps an external program; endpoints pass through as environment."""

    def __init__(self, command: list[str], params: dict,
                 workdir: str | None = None, grace_period: float = 0.2):
        self.command = command
        self.params = params
        self.workdir = workdir
        self.grace_period = grace_period
        self.status = "building"
        self._proc: subprocess.Popen | None = None

    def start(self) -> "StandaloneInstance":
        env = dict(os.environ)
        env.update(self.params)
        try:
            self._proc = subprocess.Popen(self.command, env=env, cwd=self.workdir)
        except OSError as exc:
            self.status = "failed"
            raise LaunchFailed(f"cannot launch {self.command!r}: {exc}") from exc
        deadline = time.monotonic() + self.grace_period
        while time.monotonic() < deadline:
            code = self._proc.poll()
            if code is not None:
                if code != 0:
                    self.status = "failed"
                    raise EarlyExit(f"{self.command[0]} exited {code} during grace period")
                self.status = "stopped"
                return self
            time.sleep(0.01)
        self.status = "running"
        return self

    def poll(self) -> str:
        if self._proc is not None and self.status == "running":
            code = self._proc.poll()
            if code is not None:
                self.status = "stopped" if code == 0 else "failed"
        return self.status

    def stop(self, timeout: float = 5.0) -> None:
        if self._proc is None or self._proc.poll() is not None:
            self.poll()
            if self.status == "running":
                self.status = "stopped"
            return
        self._proc.send_signal(signal.SIGTERM)
        try:
            self._proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self.status = "stopped"


def run_standalone(command: list[str], params: dict,
                   workdir: str | None = None, **kwargs) -> StandaloneInstance:
    return StandaloneInstance(command, params, workdir, **kwargs).start()
