"""Independent exhaustive scheme evaluator for oracle-comparison tests.

Works directly on plain instance dicts and enumerates the unpruned
candidate product with itertools, sharing no code with the scheduler under
test. Kept deliberately naive: feasibility is checked on complete schemes
only, fractions follow the prefix-reservation rule, and the best scheme is
the (total, tie-break-key) minimum over everything feasible.
"""

from __future__ import annotations

import itertools


def _free(node):
    cap, use = node["capacity"], node["usage"]
    return {k: cap[k] - use[k] for k in ("cpu", "mem", "disk")}


def _find_model(library, operation, model):
    for desc in library:
        if desc["operation_name"] == operation:
            for m in desc["models"]:
                if m["model_name"] == model:
                    return m
    raise LookupError(f"{operation}/{model} not in library")


def _candidates(task, nodes, library):
    model = _find_model(library, task["operation_name"], task["model_name"])
    options = model["deployments"]
    pref = task.get("deployment_preference")
    if pref is not None:
        options = [d for d in options if d["deployment_id"] == pref]
    out = []
    for node in nodes:
        free = _free(node)
        for dep in options:
            if node["arch"] not in dep["supported_archs"]:
                continue
            req = dep["request"]
            if req["cpu"] > free["cpu"] or req["disk"] > free["disk"]:
                continue
            gmem = req.get("gmem", 0)
            if not dep["requires_gpu"]:
                if req["mem"] <= free["mem"]:
                    out.append((node, dep, None))
                continue
            if node["gpu"]["unified_memory"]:
                if req["mem"] + gmem <= free["mem"]:
                    out.append((node, dep, None))
            else:
                if req["mem"] > free["mem"]:
                    continue
                for g in node["gpu"]["gpus"]:
                    if g["mem_capacity"] - g["mem_used"] >= gmem:
                        out.append((node, dep, g["gpu_id"]))
    return out


def _evaluate(combo, nodes, alpha, beta_gpu):
    """Score one complete scheme, or return None when it is infeasible."""
    node_ids = [n["id"] for n in nodes]
    free = {n["id"]: _free(n) for n in nodes}
    um = {n["id"]: n["gpu"]["unified_memory"] for n in nodes}
    gpu_free = {(n["id"], g["gpu_id"]): g["mem_capacity"] - g["mem_used"]
                for n in nodes for g in n["gpu"]["gpus"]}

    # cumulative constraint families over the complete scheme
    sums = {v: {"cpu": 0, "mem": 0, "disk": 0, "pool": 0} for v in node_ids}
    gpu_sums = {k: 0 for k in gpu_free}
    for node, dep, gpu in combo:
        req = dep["request"]
        s = sums[node["id"]]
        s["cpu"] += req["cpu"]
        s["mem"] += req["mem"]
        s["disk"] += req["disk"]
        s["pool"] += req["mem"] + req.get("gmem", 0)
        if gpu is not None:
            gpu_sums[(node["id"], gpu)] += req.get("gmem", 0)
    for v in node_ids:
        if (sums[v]["cpu"] > free[v]["cpu"] or sums[v]["mem"] > free[v]["mem"]
                or sums[v]["disk"] > free[v]["disk"]):
            return None
        if um[v] and sums[v]["pool"] > free[v]["mem"]:
            return None
    for key, used in gpu_sums.items():
        if used > gpu_free[key]:
            return None

    # fractions with earlier-in-pipeline reservations
    prefix = {v: {"cpu": 0, "mem": 0, "disk": 0, "pool": 0} for v in node_ids}
    gpu_prefix = {k: 0 for k in gpu_free}
    terms = []
    for node, dep, gpu in combo:
        v = node["id"]
        req = dep["request"]
        gmem = req.get("gmem", 0)
        den_cpu = free[v]["cpu"] - prefix[v]["cpu"]
        den_disk = free[v]["disk"] - prefix[v]["disk"]
        if um[v]:
            pool_rem = free[v]["mem"] - prefix[v]["pool"]
            den_mem = pool_rem - gmem
            den_gmem = pool_rem - req["mem"]
        else:
            den_mem = free[v]["mem"] - prefix[v]["mem"]
            den_gmem = gpu_free[(v, gpu)] - gpu_prefix[(v, gpu)] if gpu is not None else 1
        if den_cpu <= 0 or den_mem <= 0 or den_disk <= 0:
            return None
        if dep["requires_gpu"] and den_gmem <= 0:
            return None

        fs = [req["cpu"] / den_cpu, req["mem"] / den_mem, req["disk"] / den_disk]
        if dep["requires_gpu"]:
            fs.append(gmem / den_gmem)
        fbar = sum(fs) / len(fs)
        var = sum((f - fbar) * (f - fbar) for f in fs) / len(fs)
        terms.append(var + (beta_gpu if dep["requires_gpu"] else 0.0))

        prefix[v]["cpu"] += req["cpu"]
        prefix[v]["mem"] += req["mem"]
        prefix[v]["disk"] += req["disk"]
        prefix[v]["pool"] += req["mem"] + gmem
        if gpu is not None:
            gpu_prefix[(v, gpu)] += gmem

    frac_term = sum(terms) / len(combo)

    occupied = [v for v in node_ids if any(node["id"] == v for node, _, _ in combo)]
    loads = []
    for v in occupied:
        node = next(n for n in nodes if n["id"] == v)
        l_cpu = (node["usage"]["cpu"] + sums[v]["cpu"]) / node["capacity"]["cpu"]
        l_mem = (node["usage"]["mem"] + sums[v]["mem"]) / node["capacity"]["mem"]
        loads.append(0.5 * (l_cpu + l_mem))
    lbar = sum(loads) / len(loads)
    load_term = sum((l - lbar) * (l - lbar) for l in loads) / len(loads)

    return frac_term, load_term, frac_term + alpha * load_term


def oracle_all(instance):
    """All feasible schemes: list of (assignments, frac, load, total)."""
    nodes = sorted(instance["nodes"], key=lambda n: n["id"])
    library = instance["library"]
    config = instance.get("config", {})
    alpha = config.get("alpha", 0.1)
    beta_gpu = config.get("beta_gpu", -0.01)
    tasks = instance["pipeline"]["tasks"]

    per_task = [_candidates(t, nodes, library) for t in tasks]
    if any(not c for c in per_task):
        return []

    out = []
    for combo in itertools.product(*per_task):
        scored = _evaluate(combo, nodes, alpha, beta_gpu)
        if scored is None:
            continue
        assignments = [
            {"task_id": t["task_id"], "node": node["id"],
             "deployment_id": dep["deployment_id"], "gpu_id": gpu}
            for t, (node, dep, gpu) in zip(tasks, combo)
        ]
        out.append((assignments, scored[0], scored[1], scored[2]))
    return out


def oracle_best(instance):
    """(assignments, total) of the minimum under the documented tie-break."""
    everything = oracle_all(instance)
    if not everything:
        return None

    def key(entry):
        assignments, _frac, _load, total = entry
        return (total, tuple((a["node"], a["deployment_id"], a["gpu_id"] or "")
                             for a in assignments))

    best = min(everything, key=key)
    return best[0], best[3]
