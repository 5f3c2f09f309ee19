"""Skill-descriptor document handling and the in-memory skill library.

The JSON schema shipped in ``schemas/skill.descriptor.json`` is the single
source of truth for the document format; unknown fields are rejected.
Canonical serialization (sorted keys, compact separators) is what image
cache keys are derived from.
"""

from __future__ import annotations

import json
from importlib import resources

import jsonschema

from .errors import DuplicateName, SchemaViolation, UnknownModel, UnknownOperation, UnknownPreference
from .model import (
    DeploymentOption,
    ImplementationModel,
    IoProtocol,
    ResourceVector,
    SkillDescriptor,
    TaskSpec,
    canonical_json,
)


def _load_schema(name: str) -> dict:
    with resources.files("cellkit.schemas").joinpath(name).open("r") as fh:
        return json.load(fh)


_DESCRIPTOR_VALIDATOR = jsonschema.Draft202012Validator(_load_schema("skill.descriptor.json"))


def parse_skill_descriptor(document: bytes | str) -> SkillDescriptor:
    """Parse and validate a descriptor document.

    Raises SchemaViolation with a JSON-pointer-style path on structural
    problems, DuplicateName when model or deployment ids collide.
    """
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaViolation(f"document is not UTF-8: {exc}", "") from exc
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"document is not valid JSON: {exc}", "") from exc

    error = jsonschema.exceptions.best_match(_DESCRIPTOR_VALIDATOR.iter_errors(raw))
    if error is not None:
        pointer = "/" + "/".join(str(p) for p in error.absolute_path)
        raise SchemaViolation(error.message, pointer)

    return descriptor_from_dict(raw)


def descriptor_from_dict(raw: dict) -> SkillDescriptor:
    models = []
    seen_models = set()
    for m in raw["models"]:
        if m["model_name"] in seen_models:
            raise DuplicateName(f"duplicate model name {m['model_name']!r}")
        seen_models.add(m["model_name"])

        deployments = []
        seen_deployments = set()
        for d in m["deployments"]:
            if d["deployment_id"] in seen_deployments:
                raise DuplicateName(
                    f"duplicate deployment id {d['deployment_id']!r} "
                    f"in model {m['model_name']!r}")
            seen_deployments.add(d["deployment_id"])
            deployments.append(DeploymentOption(
                deployment_id=d["deployment_id"],
                base_image=d["base_image"],
                requires_gpu=d["requires_gpu"],
                supported_archs=tuple(sorted(set(d["supported_archs"]))),
                request=ResourceVector.from_dict(d["request"]),
            ))

        models.append(ImplementationModel(
            model_name=m["model_name"],
            engine_kind=m["engine_kind"],
            deployments=tuple(deployments),
            checkpoint_ref=m.get("checkpoint_ref"),
            executor=m.get("executor"),
            command=tuple(m["command"]) if "command" in m else None,
        ))

    return SkillDescriptor(
        operation_name=raw["operation_name"],
        io_protocols=tuple(IoProtocol(p["direction"], p["protocol_id"], p["payload_type"])
                           for p in raw.get("io_protocols", [])),
        models=tuple(models),
    )


def serialize_skill_descriptor(descriptor: SkillDescriptor) -> str:
    """Canonical JSON form; parse(serialize(d)) == d."""
    return canonical_json(descriptor.to_dict())


class SkillLibrary:
    """Descriptors indexed by operation name."""

    def __init__(self, descriptors: list[SkillDescriptor] | None = None):
        self._by_operation: dict[str, SkillDescriptor] = {}
        for d in descriptors or []:
            self.add(d)

    def add(self, descriptor: SkillDescriptor) -> None:
        if descriptor.operation_name in self._by_operation:
            raise DuplicateName(
                f"operation {descriptor.operation_name!r} already in library")
        self._by_operation[descriptor.operation_name] = descriptor

    def get(self, operation_name: str) -> SkillDescriptor:
        try:
            return self._by_operation[operation_name]
        except KeyError:
            raise UnknownOperation(f"operation {operation_name!r} not in library") from None

    def __contains__(self, operation_name: str) -> bool:
        return operation_name in self._by_operation

    def __iter__(self):
        return iter(self._by_operation.values())

    def __len__(self) -> int:
        return len(self._by_operation)

    def resolve_model(self, task: TaskSpec) -> ImplementationModel:
        descriptor = self.get(task.operation_name)
        model = descriptor.model(task.model_name)
        if model is None:
            raise UnknownModel(
                f"model {task.model_name!r} not in operation {task.operation_name!r}")
        return model

    @classmethod
    def from_directory(cls, path) -> "SkillLibrary":
        from pathlib import Path
        lib = cls()
        for file in sorted(Path(path).glob("*.json")):
            lib.add(parse_skill_descriptor(file.read_bytes()))
        return lib


def resolve_deployments(library: SkillLibrary, task: TaskSpec) -> list[DeploymentOption]:
    """Deployment options of the task's model, filtered to the user preference.

    With a deployment_preference set the result is exactly that singleton;
    naming an unknown option raises UnknownPreference.
    """
    model = library.resolve_model(task)
    if task.deployment_preference is None:
        return list(model.deployments)
    chosen = model.deployment(task.deployment_preference)
    if chosen is None:
        raise UnknownPreference(
            f"deployment preference {task.deployment_preference!r} names no option "
            f"of model {task.model_name!r}")
    return [chosen]
