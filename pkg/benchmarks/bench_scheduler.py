#!/usr/bin/env python3
"""Compare the compiled scheme-search kernel against the pure-Python twin.

Builds a dense instance (every task fits on every node, one deployment
option) so the candidate product is exactly nodes^tasks, enumerates it with
both backends, checks their results are bit-identical, and reports schemes
per second.

    python3 benchmarks/bench_scheduler.py --nodes 10 --tasks 5
"""

import argparse
import time

from cellkit.instance_io import load_instance
from cellkit.model import canonical_json
from cellkit.scheduler import build_problem
from cellkit.scheduler.backend import compiled_kernel, pure_kernel

GIB = 1024 ** 3


def build_instance(n_nodes: int, n_tasks: int) -> dict:
    nodes = [{
        "id": f"node{i:02d}",
        "role": "primary",
        "arch": "amd64",
        "control_endpoint": f"10.0.0.{i + 1}:4100",
        "registry_switch_endpoint": f"10.0.0.{i + 1}:4180",
        "capacity": {"cpu": 64000, "mem": 256 * GIB, "disk": 1024 * GIB,
                     "gmem": 0},
        "usage": {"cpu": (i * 997) % 8000, "mem": (i * 131) % 16 * GIB,
                  "disk": (i * 37) % 64 * GIB, "gmem": 0},
        "gpu": {"gpus": [], "unified_memory": False},
        "cell": None,
    } for i in range(n_nodes)]
    library = [{
        "operation_name": f"op{t}",
        "io_protocols": [],
        "models": [{
            "model_name": "m", "engine_kind": "primitive",
            "executor": "identity",
            "deployments": [{
                "deployment_id": "cpu", "base_image": "images/bench",
                "requires_gpu": False, "supported_archs": ["amd64"],
                "request": {"cpu": 400 + 100 * t, "mem": (1 + t) * GIB,
                            "disk": GIB, "gmem": 0},
            }],
        }],
    } for t in range(n_tasks)]
    tasks = [{
        "task_id": f"t{t}", "operation_name": f"op{t}", "model_name": "m",
        "input": {"protocol_id": "file", "address": "/in"},
        "output": {"protocol_id": "file", "address": "/out"},
    } for t in range(n_tasks)]
    return {"config": {"alpha": 0.1, "beta_gpu": -0.01},
            "nodes": nodes, "library": library,
            "pipeline": {"tasks": tasks}}


def run_backend(kernel, problem, config, limit):
    start = time.perf_counter()
    result = kernel.search(*problem.kernel_args(), config.alpha,
                           config.beta_gpu, limit)
    return result, time.perf_counter() - start


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--nodes", type=int, default=10)
    parser.add_argument("--tasks", type=int, default=5)
    parser.add_argument("--limit", type=int, default=5_000_000)
    args = parser.parse_args()

    instance = build_instance(args.nodes, args.tasks)
    pipeline, nodes, library, config = load_instance(canonical_json(instance))
    problem = build_problem(pipeline, nodes, library)
    space = args.nodes ** args.tasks
    print(f"instance: {args.tasks} tasks x {args.nodes} nodes "
          f"-> {space:,} schemes")

    py_result, py_time = run_backend(pure_kernel, problem, config, args.limit)
    print(f"python kernel: {py_time:8.3f}s  "
          f"({py_result[4] / py_time:>12,.0f} schemes/s)  "
          f"best={py_result[1]:.9f}")

    if compiled_kernel is None:
        print("compiled kernel: unavailable (pure-Python install)")
        return
    cy_result, cy_time = run_backend(compiled_kernel, problem, config,
                                     args.limit)
    print(f"cython kernel: {cy_time:8.3f}s  "
          f"({cy_result[4] / cy_time:>12,.0f} schemes/s)  "
          f"best={cy_result[1]:.9f}")

    assert list(py_result[0]) == list(cy_result[0]), "winner mismatch"
    assert py_result[1] == cy_result[1], "score mismatch"
    assert py_result[4] == cy_result[4], "evaluation count mismatch"
    print(f"backends agree bit-for-bit; speedup {py_time / cy_time:.1f}x")


if __name__ == "__main__":
    main()
