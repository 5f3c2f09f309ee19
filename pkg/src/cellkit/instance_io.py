"""Load/dump the self-contained scheduling-instance file format.

An instance file bundles everything one placement decision needs:

    {"config": {...}, "nodes": [...], "library": [...], "pipeline": {"tasks": [...]}}

Used by the ``sched score`` debug command and by oracle-comparison tests.
"""

from __future__ import annotations

import json

from .descriptor import SkillLibrary, descriptor_from_dict
from .model import NodeRecord, TaskPipeline, canonical_json
from .scheduler import SchedulerConfig


def load_instance(data: dict | str | bytes):
    """Return (pipeline, nodes, library, config) from an instance document."""
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    pipeline = TaskPipeline.from_dict(data["pipeline"])
    nodes = [NodeRecord.from_dict(n) for n in data["nodes"]]
    library = SkillLibrary([descriptor_from_dict(d) for d in data["library"]])
    config = SchedulerConfig.from_dict(data.get("config", {}))
    return pipeline, nodes, library, config


def dump_instance(pipeline: TaskPipeline, nodes, library: SkillLibrary,
                  config: SchedulerConfig) -> str:
    return canonical_json({
        "config": {"alpha": config.alpha, "beta_gpu": config.beta_gpu,
                   "max_schemes": config.max_schemes},
        "nodes": [n.to_dict() for n in nodes],
        "library": [d.to_dict() for d in library],
        "pipeline": pipeline.to_dict(),
    })
