"""Pure-Python scheme search kernel.

Fallback twin of the compiled kernel in ``_kernel.pyx``; both walk the
candidate space depth-first in tie-break order, prune on cumulative
constraint violations and non-positive fraction denominators, and score
with identical floating-point operation order, so results are bit-equal
across backends.

The flat problem layout (built by ``core.build_problem``):

- per task ``i``: candidates ``cand_start[i]..cand_start[i+1]`` (sorted by
  the tie-break key), each standing for (deployment, node[, gpu]);
- ``creq[j]`` = requested (cpu, mem, disk, gmem) of candidate ``j``;
- ``free[v]`` = capacity - usage per (cpu, mem, disk) of node ``v``;
- ``gpu_free[g]`` = free memory of discrete GPU ``g``;
- ``um[v]`` flags unified-memory nodes whose GPU demand draws from mem.
"""

from __future__ import annotations

BACKEND = "python"


def search(n_tasks, cand_start, cnode, cgpu, creq, cgpuflag,
           free, cap_cpu, cap_mem, use_cpu, use_mem, um, gpu_free,
           alpha, beta, limit):
    """Return (best_choice, best_total, best_frac, best_load, evaluated, exceeded).

    best_choice is None when no feasible scheme exists. Schemes tying on
    total score never replace an earlier find, so the first (lexicographically
    smallest) minimum wins.
    """
    m = len(free)
    n_gpus = len(gpu_free)

    used_cpu = [0] * m
    used_mem = [0] * m
    used_disk = [0] * m
    pool_used = [0] * m
    gpu_used = [0] * n_gpus
    count = [0] * m
    choice = [0] * n_tasks

    best_choice = None
    best_total = 0.0
    best_frac = 0.0
    best_load = 0.0
    evaluated = 0
    exceeded = False

    def leaf_load():
        # mean and variance of l_v over occupied nodes, in node index order
        total = 0.0
        occupied = 0
        lv = []
        for v in range(m):
            if count[v] > 0:
                l = 0.5 * ((use_cpu[v] + used_cpu[v]) / cap_cpu[v]
                           + (use_mem[v] + used_mem[v]) / cap_mem[v])
                lv.append(l)
                total += l
                occupied += 1
        lbar = total / occupied
        acc = 0.0
        for l in lv:
            d = l - lbar
            acc += d * d
        return acc / occupied

    def recurse(depth, term_sum):
        nonlocal best_choice, best_total, best_frac, best_load, evaluated, exceeded
        if exceeded:
            return
        if depth == n_tasks:
            evaluated += 1
            if evaluated > limit:
                exceeded = True
                return
            frac = term_sum / n_tasks
            load = leaf_load()
            total = frac + alpha * load
            if best_choice is None or total < best_total:
                best_choice = choice[:]
                best_total = total
                best_frac = frac
                best_load = load
            return

        for j in range(cand_start[depth], cand_start[depth + 1]):
            v = cnode[j]
            req_cpu, req_mem, req_disk, req_gmem = creq[j]
            gpu_task = cgpuflag[j]

            rem_cpu = free[v][0] - used_cpu[v]
            if rem_cpu <= 0 or req_cpu > rem_cpu:
                continue
            rem_disk = free[v][2] - used_disk[v]
            if rem_disk <= 0 or req_disk > rem_disk:
                continue

            if um[v]:
                pool_rem = free[v][1] - pool_used[v]
                if req_mem + req_gmem > pool_rem:
                    continue
                den_mem = pool_rem - req_gmem
                if den_mem <= 0:
                    continue
                if gpu_task:
                    den_gmem = pool_rem - req_mem
                    if den_gmem <= 0:
                        continue
            else:
                rem_mem = free[v][1] - used_mem[v]
                if rem_mem <= 0 or req_mem > rem_mem:
                    continue
                den_mem = rem_mem
                if gpu_task:
                    g = cgpu[j]
                    if g >= 0:
                        den_gmem = gpu_free[g] - gpu_used[g]
                        if den_gmem <= 0 or req_gmem > den_gmem:
                            continue
                    else:
                        continue  # GPU demand on a node without GPUs

            f_cpu = req_cpu / rem_cpu
            f_mem = req_mem / den_mem
            f_disk = req_disk / rem_disk
            if gpu_task:
                f_gmem = req_gmem / den_gmem
                fbar = (f_cpu + f_mem + f_disk + f_gmem) / 4.0
                d0 = f_cpu - fbar
                d1 = f_mem - fbar
                d2 = f_disk - fbar
                d3 = f_gmem - fbar
                term = (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3) / 4.0 + beta
            else:
                fbar = (f_cpu + f_mem + f_disk) / 3.0
                d0 = f_cpu - fbar
                d1 = f_mem - fbar
                d2 = f_disk - fbar
                term = (d0 * d0 + d1 * d1 + d2 * d2) / 3.0

            used_cpu[v] += req_cpu
            used_mem[v] += req_mem
            used_disk[v] += req_disk
            count[v] += 1
            if um[v]:
                pool_used[v] += req_mem + req_gmem
            elif gpu_task:
                gpu_used[cgpu[j]] += req_gmem
            choice[depth] = j

            recurse(depth + 1, term_sum + term)

            used_cpu[v] -= req_cpu
            used_mem[v] -= req_mem
            used_disk[v] -= req_disk
            count[v] -= 1
            if um[v]:
                pool_used[v] -= req_mem + req_gmem
            elif gpu_task:
                gpu_used[cgpu[j]] -= req_gmem
            if exceeded:
                return

    if n_tasks > 0:
        recurse(0, 0.0)
    return best_choice, best_total, best_frac, best_load, evaluated, exceeded


def iter_feasible(n_tasks, cand_start, cnode, cgpu, creq, cgpuflag,
                  free, cap_cpu, cap_mem, use_cpu, use_mem, um, gpu_free,
                  alpha, beta, limit):
    """Yield every feasible scheme as (choice, frac, load, total), DFS order.

    Same pruning walk as ``search``; used by the score-breakdown surface and
    by pruning-completeness checks, so it must stay an exact enumeration.
    """
    m = len(free)
    used_cpu = [0] * m
    used_mem = [0] * m
    used_disk = [0] * m
    pool_used = [0] * m
    gpu_used = [0] * len(gpu_free)
    count = [0] * m
    choice = [0] * n_tasks
    yielded = 0

    def leaf_load():
        total = 0.0
        occupied = 0
        lv = []
        for v in range(m):
            if count[v] > 0:
                l = 0.5 * ((use_cpu[v] + used_cpu[v]) / cap_cpu[v]
                           + (use_mem[v] + used_mem[v]) / cap_mem[v])
                lv.append(l)
                total += l
                occupied += 1
        lbar = total / occupied
        acc = 0.0
        for l in lv:
            d = l - lbar
            acc += d * d
        return acc / occupied

    def recurse(depth, term_sum):
        nonlocal yielded
        if depth == n_tasks:
            yielded += 1
            if yielded > limit:
                raise _EnumerationCapped()
            frac = term_sum / n_tasks
            load = leaf_load()
            yield tuple(choice), frac, load, frac + alpha * load
            return
        for j in range(cand_start[depth], cand_start[depth + 1]):
            v = cnode[j]
            req_cpu, req_mem, req_disk, req_gmem = creq[j]
            gpu_task = cgpuflag[j]

            rem_cpu = free[v][0] - used_cpu[v]
            if rem_cpu <= 0 or req_cpu > rem_cpu:
                continue
            rem_disk = free[v][2] - used_disk[v]
            if rem_disk <= 0 or req_disk > rem_disk:
                continue
            if um[v]:
                pool_rem = free[v][1] - pool_used[v]
                if req_mem + req_gmem > pool_rem:
                    continue
                den_mem = pool_rem - req_gmem
                if den_mem <= 0:
                    continue
                if gpu_task and pool_rem - req_mem <= 0:
                    continue
                den_gmem = pool_rem - req_mem
            else:
                rem_mem = free[v][1] - used_mem[v]
                if rem_mem <= 0 or req_mem > rem_mem:
                    continue
                den_mem = rem_mem
                if gpu_task:
                    g = cgpu[j]
                    if g < 0:
                        continue
                    den_gmem = gpu_free[g] - gpu_used[g]
                    if den_gmem <= 0 or req_gmem > den_gmem:
                        continue

            f_cpu = req_cpu / rem_cpu
            f_mem = req_mem / den_mem
            f_disk = req_disk / rem_disk
            if gpu_task:
                f_gmem = req_gmem / den_gmem
                fbar = (f_cpu + f_mem + f_disk + f_gmem) / 4.0
                d0, d1, d2, d3 = f_cpu - fbar, f_mem - fbar, f_disk - fbar, f_gmem - fbar
                term = (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3) / 4.0 + beta
            else:
                fbar = (f_cpu + f_mem + f_disk) / 3.0
                d0, d1, d2 = f_cpu - fbar, f_mem - fbar, f_disk - fbar
                term = (d0 * d0 + d1 * d1 + d2 * d2) / 3.0

            used_cpu[v] += req_cpu
            used_mem[v] += req_mem
            used_disk[v] += req_disk
            count[v] += 1
            if um[v]:
                pool_used[v] += req_mem + req_gmem
            elif gpu_task:
                gpu_used[cgpu[j]] += req_gmem
            choice[depth] = j
            try:
                yield from recurse(depth + 1, term_sum + term)
            finally:
                used_cpu[v] -= req_cpu
                used_mem[v] -= req_mem
                used_disk[v] -= req_disk
                count[v] -= 1
                if um[v]:
                    pool_used[v] -= req_mem + req_gmem
                elif gpu_task:
                    gpu_used[cgpu[j]] -= req_gmem

    if n_tasks > 0:
        yield from recurse(0, 0.0)


class _EnumerationCapped(Exception):
    pass

