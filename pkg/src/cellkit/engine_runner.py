"""Instance entry point launched by the process execution backend.

Reads its entire configuration from CELL_* environment variables, so a
cached image can be reused across tasks with only the environment changing:

    CELL_ENGINE         primitive | standalone
    CELL_ENTRY          executor id / import path, or JSON argv for standalone
    CELL_INPUT_PROTO    protocol id of the input handler (primitive)
    CELL_INPUT_ADDR     input address
    CELL_OUTPUT_PROTO / CELL_OUTPUT_ADDR
    CELL_TASK_ID / CELL_INSTANCE_ID / CELL_CHECKPOINT

Exit codes: 0 clean stop, 2 configuration error, 3 failure threshold hit,
otherwise the wrapped program's own code.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import time

from .engine import EngineBinding, PrimitiveInstance, StandaloneInstance
from .model import IoEndpoint


def collect_params() -> dict:
    return {k: v for k, v in os.environ.items() if k.startswith("CELL_")}


def main() -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    params = collect_params()
    engine = params.get("CELL_ENGINE", "primitive")
    entry = params.get("CELL_ENTRY")
    if not entry:
        print("CELL_ENTRY not set", file=sys.stderr)
        return 2

    if engine == "standalone":
        try:
            command = json.loads(entry)
        except json.JSONDecodeError:
            print("CELL_ENTRY must be a JSON argv for standalone engines",
                  file=sys.stderr)
            return 2
        instance = StandaloneInstance(command, params)
        signal.signal(signal.SIGTERM, lambda *_: instance.stop())
        try:
            instance.start()
        except Exception as exc:
            print(f"launch failed: {exc}", file=sys.stderr)
            return 1
        while instance.poll() == "running":
            time.sleep(0.2)
        return 0 if instance.status == "stopped" else 1

    try:
        binding = EngineBinding(
            engine_kind="primitive",
            input_endpoint=IoEndpoint(params["CELL_INPUT_PROTO"],
                                      params["CELL_INPUT_ADDR"]),
            output_endpoint=IoEndpoint(params["CELL_OUTPUT_PROTO"],
                                       params["CELL_OUTPUT_ADDR"]),
            executor_id=entry,
            params=params,
        )
        instance = PrimitiveInstance(binding)
    except KeyError as exc:
        print(f"missing environment variable: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"binding failed: {exc}", file=sys.stderr)
        return 2

    signal.signal(signal.SIGTERM, lambda *_: instance.stop(timeout=0))
    instance.start()
    instance.join()
    if instance.status == "failed":
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
