"""Per-node instance lifecycle: images, launches, bookkeeping.

Images are resolved through a content-addressed cache keyed by the
canonical (base_image, engine_kind, entry) subset of the descriptor;
runtime parameters are injected through CELL_* environment variables and
never influence the key, so re-deployments with different endpoints reuse
the cached image.

The execution backend is pluggable: the reference ``ProcessBackend``
launches OS processes in per-instance working directories (a simulated
container), ``FakeBackend`` backs unit tests and the simulated fabric, and
``ContainerBackend`` shells out to a container runtime when one exists.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import BuildFailed, LaunchFailed
from .model import (
    DeploymentOption,
    GpuInventory,
    InstanceRecord,
    ResourceVector,
    TaskSpec,
    canonical_json,
)

logger = logging.getLogger(__name__)

STOP_GRACE = 5.0
DEFAULT_RETENTION = 3600.0


@dataclass(frozen=True)
class ImageSpec:
    """The image-identity subset of a deployment: parameters excluded."""

    base_image: str
    engine_kind: str
    entry: str

    def cache_key(self) -> str:
        return hashlib.sha256(canonical_json({
            "base_image": self.base_image,
            "engine_kind": self.engine_kind,
            "entry": self.entry,
        }).encode("utf-8")).hexdigest()


@dataclass
class ImageCache:
    entries: dict = field(default_factory=dict)  # cache_key -> (image_id, built_at)
    build_counter: int = 0
    reuse_counter: int = 0

    def resolve(self, spec: ImageSpec, backend: "ExecutionBackend",
                now: float) -> str:
        key = spec.cache_key()
        hit = self.entries.get(key)
        if hit is not None:
            self.reuse_counter += 1
            return hit[0]
        image_id = backend.build_image(spec)
        self.build_counter += 1
        self.entries[key] = (image_id, now)
        return image_id


class BackendHandle:
    def poll(self) -> str:  # running | stopped | failed
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError


class ExecutionBackend:
    def build_image(self, spec: ImageSpec) -> str:
        raise NotImplementedError

    def launch(self, image_id: str, spec: ImageSpec, env: dict,
               workdir: str) -> BackendHandle:
        raise NotImplementedError


class _ProcessHandle(BackendHandle):
    def __init__(self, proc: subprocess.Popen, log_fh):
        self._proc = proc
        self._log_fh = log_fh

    def poll(self) -> str:
        code = self._proc.poll()
        if code is None:
            return "running"
        if self._log_fh is not None and not self._log_fh.closed:
            self._log_fh.close()
        return "stopped" if code == 0 else "failed"

    def stop(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(STOP_GRACE)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._log_fh is not None and not self._log_fh.closed:
            self._log_fh.close()


class ProcessBackend(ExecutionBackend):
    """Launches skill instances as engine-runner OS processes."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(os.path.join(root, "images"), exist_ok=True)
        os.makedirs(os.path.join(root, "instances"), exist_ok=True)

    def build_image(self, spec: ImageSpec) -> str:
        image_id = "img-" + spec.cache_key()[:12]
        image_dir = os.path.join(self.root, "images", image_id)
        try:
            os.makedirs(image_dir, exist_ok=True)
            with open(os.path.join(image_dir, "image.json"), "w") as fh:
                json.dump({"base_image": spec.base_image,
                           "engine_kind": spec.engine_kind,
                           "entry": spec.entry}, fh, indent=2)
        except OSError as exc:
            raise BuildFailed(f"cannot materialize image {image_id}: {exc}") from exc
        return image_id

    def launch(self, image_id: str, spec: ImageSpec, env: dict,
               workdir: str) -> BackendHandle:
        os.makedirs(workdir, exist_ok=True)
        with open(os.path.join(workdir, "params.json"), "w") as fh:
            json.dump(env, fh, indent=2, sort_keys=True)
        log_fh = open(os.path.join(workdir, "instance.log"), "ab")
        full_env = {**os.environ, **env, "CELL_IMAGE_ID": image_id}
        try:
            proc = subprocess.Popen(
                [sys.executable, "-m", "cellkit.engine_runner"],
                env=full_env, cwd=workdir, stdout=log_fh, stderr=log_fh)
        except OSError as exc:
            log_fh.close()
            raise LaunchFailed(f"cannot start instance process: {exc}") from exc
        return _ProcessHandle(proc, log_fh)


class _FakeHandle(BackendHandle):
    def __init__(self):
        self.status = "running"
        self.stopped = False

    def poll(self) -> str:
        return self.status

    def stop(self) -> None:
        self.stopped = True
        if self.status == "running":
            self.status = "stopped"


class FakeBackend(ExecutionBackend):
    """Records builds/launches without running anything."""

    def __init__(self, fail_build: bool = False, fail_launch: bool = False):
        self.builds: list[ImageSpec] = []
        self.launches: list[tuple[str, dict, str]] = []
        self.handles: list[_FakeHandle] = []
        self.fail_build = fail_build
        self.fail_launch = fail_launch

    def build_image(self, spec: ImageSpec) -> str:
        if self.fail_build:
            raise BuildFailed("scripted build failure")
        self.builds.append(spec)
        return "img-" + spec.cache_key()[:12]

    def launch(self, image_id: str, spec: ImageSpec, env: dict,
               workdir: str) -> BackendHandle:
        if self.fail_launch:
            raise LaunchFailed("scripted launch failure")
        self.launches.append((image_id, env, workdir))
        handle = _FakeHandle()
        self.handles.append(handle)
        return handle


class ContainerBackend(ExecutionBackend):
    """Thin adapter over a container runtime CLI; not exercised in CI."""

    def __init__(self, runtime_cli: str = "docker", root: str = "."):
        self.cli = runtime_cli
        self.root = root

    def build_image(self, spec: ImageSpec) -> str:
        context = os.path.join(self.root, "ctx-" + spec.cache_key()[:12])
        os.makedirs(context, exist_ok=True)
        dockerfile = (f"FROM {spec.base_image}\n"
                      f"ENV CELL_ENGINE={spec.engine_kind}\n"
                      f'ENV CELL_ENTRY={json.dumps(spec.entry)}\n'
                      f'CMD ["python3", "-m", "cellkit.engine_runner"]\n')
        with open(os.path.join(context, "Dockerfile"), "w") as fh:
            fh.write(dockerfile)
        tag = "cellkit/" + spec.cache_key()[:12]
        result = subprocess.run([self.cli, "build", "-q", "-t", tag, context],
                                capture_output=True, text=True)
        if result.returncode != 0:
            raise BuildFailed(result.stderr.strip())
        return tag

    def launch(self, image_id: str, spec: ImageSpec, env: dict,
               workdir: str) -> BackendHandle:
        args = [self.cli, "run", "-d"]
        for key, value in env.items():
            args += ["-e", f"{key}={value}"]
        args.append(image_id)
        result = subprocess.run(args, capture_output=True, text=True)
        if result.returncode != 0:
            raise LaunchFailed(result.stderr.strip())
        return _ContainerHandle(self.cli, result.stdout.strip())


class _ContainerHandle(BackendHandle):
    def __init__(self, cli: str, container_id: str):
        self.cli = cli
        self.container_id = container_id

    def poll(self) -> str:
        result = subprocess.run(
            [self.cli, "inspect", "-f", "{{.State.Status}} {{.State.ExitCode}}",
             self.container_id], capture_output=True, text=True)
        if result.returncode != 0:
            return "failed"
        state, _, code = result.stdout.strip().partition(" ")
        if state == "running":
            return "running"
        return "stopped" if code == "0" else "failed"

    def stop(self) -> None:
        subprocess.run([self.cli, "rm", "-f", self.container_id],
                       capture_output=True)


# --- deploy assignments (wire form) -------------------------------------------

@dataclass(frozen=True)
class DeployAssignment:
    task: TaskSpec
    deployment: DeploymentOption
    engine_kind: str
    entry: str
    checkpoint_ref: Optional[str] = None
    gpu_id: Optional[str] = None
    params: tuple = ()

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "deployment": self.deployment.to_dict(),
            "engine_kind": self.engine_kind,
            "entry": self.entry,
            "checkpoint_ref": self.checkpoint_ref,
            "gpu_id": self.gpu_id,
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DeployAssignment":
        dep = data["deployment"]
        return cls(
            task=TaskSpec.from_dict(data["task"]),
            deployment=DeploymentOption(
                deployment_id=dep["deployment_id"],
                base_image=dep["base_image"],
                requires_gpu=dep["requires_gpu"],
                supported_archs=tuple(dep["supported_archs"]),
                request=ResourceVector.from_dict(dep["request"]),
            ),
            engine_kind=data["engine_kind"],
            entry=data["entry"],
            checkpoint_ref=data.get("checkpoint_ref"),
            gpu_id=data.get("gpu_id"),
            params=tuple(sorted(data.get("params", {}).items())),
        )


def assignment_env(assignment: DeployAssignment, instance_id: str) -> dict:
    task = assignment.task
    env = {
        "CELL_ENGINE": assignment.engine_kind,
        "CELL_ENTRY": assignment.entry,
        "CELL_INPUT_PROTO": task.input_endpoint.protocol_id,
        "CELL_INPUT_ADDR": task.input_endpoint.address,
        "CELL_OUTPUT_PROTO": task.output_endpoint.protocol_id,
        "CELL_OUTPUT_ADDR": task.output_endpoint.address,
        "CELL_TASK_ID": task.task_id,
        "CELL_INSTANCE_ID": instance_id,
    }
    if assignment.checkpoint_ref:
        env["CELL_CHECKPOINT"] = assignment.checkpoint_ref
    if assignment.gpu_id:
        env["CELL_GPU_ID"] = assignment.gpu_id
    for key, value in assignment.params:
        if not key.startswith("CELL_"):
            key = "CELL_" + key.upper().replace("-", "_")
        env[key] = value
    return env


@dataclass
class _LocalInstance:
    record: InstanceRecord
    reservation: ResourceVector
    gpu_id: Optional[str]
    unified: bool
    handle: BackendHandle
    stopped_at: Optional[float] = None


class InstanceManager:
    """Local instance registry plus resource bookkeeping for one node.

    Usage reported upstream is base usage plus the reservations of every
    live (building/running) instance; reservations are released only once
    termination completes, never at the stop signal.
    """

    def __init__(self, node_id: str, backend: ExecutionBackend,
                 base_usage: ResourceVector, gpu: GpuInventory,
                 clock: Callable[[], float], workdir_root: str = "",
                 retention: float = DEFAULT_RETENTION):
        self.node_id = node_id
        self.backend = backend
        self.base_usage = base_usage
        self.base_gpu = gpu
        self.clock = clock
        self.workdir_root = workdir_root
        self.retention = retention
        self.cache = ImageCache()
        self._instances: dict[str, _LocalInstance] = {}
        self._seq = 0

    # --- lifecycle -----------------------------------------------------------

    def deploy(self, assignment: DeployAssignment) -> InstanceRecord:
        spec = ImageSpec(assignment.deployment.base_image,
                         assignment.engine_kind, assignment.entry)
        image_id = self.cache.resolve(spec, self.backend, self.clock())
        self._seq += 1
        instance_id = f"{self.node_id}-i{self._seq}"
        env = assignment_env(assignment, instance_id)
        workdir = os.path.join(self.workdir_root or ".", "instances", instance_id)
        handle = self.backend.launch(image_id, spec, env, workdir)
        record = InstanceRecord(
            task_id=assignment.task.task_id,
            instance_id=instance_id,
            image_id=image_id,
            node=self.node_id,
            params=tuple(sorted(env.items())),
            status="running",
        )
        self._instances[instance_id] = _LocalInstance(
            record=record,
            reservation=assignment.deployment.request,
            gpu_id=assignment.gpu_id,
            unified=self.base_gpu.unified_memory,
            handle=handle,
        )
        return record

    def terminate_task(self, task_id: str) -> list[str]:
        """Stop every local instance of the task; returns stopped instance ids."""
        stopped = []
        for instance in list(self._instances.values()):
            if instance.record.task_id != task_id:
                continue
            if instance.record.status in ("building", "running"):
                instance.handle.stop()
                instance.record = instance.record.with_status("stopped")
                instance.stopped_at = self.clock()
            stopped.append(instance.record.instance_id)
        return stopped

    def stop_all(self) -> None:
        for instance in self._instances.values():
            if instance.record.status in ("building", "running"):
                instance.handle.stop()
                instance.record = instance.record.with_status("stopped")
                instance.stopped_at = self.clock()

    def refresh(self) -> bool:
        """Poll backend handles and GC old terminal records; True if changed."""
        changed = False
        now = self.clock()
        for instance_id, instance in list(self._instances.items()):
            if instance.record.status in ("building", "running"):
                status = instance.handle.poll()
                if status != instance.record.status:
                    instance.record = instance.record.with_status(status)
                    if status in ("stopped", "failed"):
                        instance.stopped_at = now
                    changed = True
            if (instance.stopped_at is not None
                    and now - instance.stopped_at > self.retention):
                del self._instances[instance_id]
                changed = True
        return changed

    # --- views ----------------------------------------------------------------

    def list_instances(self) -> list[InstanceRecord]:
        return [i.record for i in self._instances.values()]

    def records_for(self, task_id: str) -> list[InstanceRecord]:
        return [i.record for i in self._instances.values()
                if i.record.task_id == task_id]

    def usage(self) -> ResourceVector:
        total = self.base_usage
        for instance in self._instances.values():
            if instance.record.status not in ("building", "running"):
                continue
            r = instance.reservation
            if instance.unified:
                total = total + ResourceVector(r.cpu, r.mem + r.gmem, r.disk, 0)
            else:
                total = total + r
        return total

    def gpu_inventory(self) -> GpuInventory:
        if self.base_gpu.unified_memory or not self.base_gpu.gpus:
            return self.base_gpu
        extra: dict[str, int] = {}
        for instance in self._instances.values():
            if (instance.record.status in ("building", "running")
                    and instance.gpu_id is not None):
                extra[instance.gpu_id] = (extra.get(instance.gpu_id, 0)
                                          + instance.reservation.gmem)
        devices = tuple(
            type(g)(g.gpu_id, g.mem_capacity, g.mem_used + extra.get(g.gpu_id, 0))
            for g in self.base_gpu.gpus)
        return GpuInventory(gpus=devices, unified_memory=False)


def cleanup_workdirs(root: str) -> None:
    shutil.rmtree(os.path.join(root, "instances"), ignore_errors=True)
