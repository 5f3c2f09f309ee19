# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled scheme search kernel.

Twin of ``_pykernel.search``: identical pruning rules and float operation
order, so both backends return bit-equal scores. See core.build_problem for
the flat layout.
"""

import numpy as np

BACKEND = "cython"


def search(int n_tasks, cand_start_in, cnode_in, cgpu_in, creq_in, cgpuflag_in,
           free_in, cap_cpu_in, cap_mem_in, use_cpu_in, use_mem_in, um_in,
           gpu_free_in, double alpha, double beta, long long limit):
    cdef long long[::1] cand_start = np.ascontiguousarray(cand_start_in, dtype=np.int64)
    cdef long long[::1] cnode = np.ascontiguousarray(cnode_in, dtype=np.int64)
    cdef long long[::1] cgpu = np.ascontiguousarray(cgpu_in, dtype=np.int64)
    cdef long long[:, ::1] creq = np.ascontiguousarray(creq_in, dtype=np.int64)
    cdef unsigned char[::1] cgpuflag = np.ascontiguousarray(cgpuflag_in, dtype=np.uint8)
    cdef long long[:, ::1] free = np.ascontiguousarray(free_in, dtype=np.int64)
    cdef long long[::1] cap_cpu = np.ascontiguousarray(cap_cpu_in, dtype=np.int64)
    cdef long long[::1] cap_mem = np.ascontiguousarray(cap_mem_in, dtype=np.int64)
    cdef long long[::1] use_cpu = np.ascontiguousarray(use_cpu_in, dtype=np.int64)
    cdef long long[::1] use_mem = np.ascontiguousarray(use_mem_in, dtype=np.int64)
    cdef unsigned char[::1] um = np.ascontiguousarray(um_in, dtype=np.uint8)
    cdef long long[::1] gpu_free = np.ascontiguousarray(gpu_free_in, dtype=np.int64)

    cdef int m = free.shape[0]
    cdef int n_gpus = gpu_free.shape[0]

    used = np.zeros((m, 3), dtype=np.int64)
    cdef long long[:, ::1] used_v = used
    pool_used = np.zeros(m, dtype=np.int64)
    cdef long long[::1] pool_used_v = pool_used
    gpu_used = np.zeros(max(n_gpus, 1), dtype=np.int64)
    cdef long long[::1] gpu_used_v = gpu_used
    count = np.zeros(m, dtype=np.int64)
    cdef long long[::1] count_v = count

    choice = np.zeros(max(n_tasks, 1), dtype=np.int64)
    cdef long long[::1] choice_v = choice
    best = np.zeros(max(n_tasks, 1), dtype=np.int64)
    cdef long long[::1] best_v = best
    ptr = np.zeros(max(n_tasks, 1), dtype=np.int64)
    cdef long long[::1] ptr_v = ptr
    tsum = np.zeros(max(n_tasks, 1) + 1, dtype=np.float64)
    cdef double[::1] tsum_v = tsum

    cdef bint found = False
    cdef bint exceeded = False
    cdef long long evaluated = 0
    cdef double best_total = 0.0, best_frac = 0.0, best_load = 0.0

    cdef int depth = 0
    cdef long long j, v, g
    cdef long long req_cpu, req_mem, req_disk, req_gmem
    cdef long long rem_cpu, rem_disk, rem_mem, pool_rem, den_mem_i, den_gmem_i
    cdef bint gpu_task, feasible
    cdef double f_cpu, f_mem, f_disk, f_gmem, fbar, d0, d1, d2, d3, term
    cdef double frac, load, total, l, lbar, acc, d
    cdef long long occupied
    cdef int k

    if n_tasks == 0:
        return None, 0.0, 0.0, 0.0, 0, False

    ptr_v[0] = cand_start[0]
    tsum_v[0] = 0.0

    while True:
        if ptr_v[depth] >= cand_start[depth + 1]:
            if depth == 0:
                break
            depth -= 1
            j = choice_v[depth]
            v = cnode[j]
            used_v[v, 0] -= creq[j, 0]
            used_v[v, 1] -= creq[j, 1]
            used_v[v, 2] -= creq[j, 2]
            count_v[v] -= 1
            if um[v]:
                pool_used_v[v] -= creq[j, 1] + creq[j, 3]
            elif cgpuflag[j]:
                gpu_used_v[cgpu[j]] -= creq[j, 3]
            ptr_v[depth] += 1
            continue

        j = ptr_v[depth]
        v = cnode[j]
        req_cpu = creq[j, 0]
        req_mem = creq[j, 1]
        req_disk = creq[j, 2]
        req_gmem = creq[j, 3]
        gpu_task = cgpuflag[j]

        feasible = True
        den_mem_i = 0
        den_gmem_i = 0

        rem_cpu = free[v, 0] - used_v[v, 0]
        if rem_cpu <= 0 or req_cpu > rem_cpu:
            feasible = False
        if feasible:
            rem_disk = free[v, 2] - used_v[v, 2]
            if rem_disk <= 0 or req_disk > rem_disk:
                feasible = False
        if feasible:
            if um[v]:
                pool_rem = free[v, 1] - pool_used_v[v]
                if req_mem + req_gmem > pool_rem:
                    feasible = False
                else:
                    den_mem_i = pool_rem - req_gmem
                    if den_mem_i <= 0:
                        feasible = False
                    elif gpu_task:
                        den_gmem_i = pool_rem - req_mem
                        if den_gmem_i <= 0:
                            feasible = False
            else:
                rem_mem = free[v, 1] - used_v[v, 1]
                if rem_mem <= 0 or req_mem > rem_mem:
                    feasible = False
                else:
                    den_mem_i = rem_mem
                    if gpu_task:
                        g = cgpu[j]
                        if g >= 0:
                            den_gmem_i = gpu_free[g] - gpu_used_v[g]
                            if den_gmem_i <= 0 or req_gmem > den_gmem_i:
                                feasible = False
                        else:
                            feasible = False

        if not feasible:
            ptr_v[depth] += 1
            continue

        f_cpu = req_cpu / (<double> rem_cpu)
        f_mem = req_mem / (<double> den_mem_i)
        f_disk = req_disk / (<double> rem_disk)
        if gpu_task:
            f_gmem = req_gmem / (<double> den_gmem_i)
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

        used_v[v, 0] += req_cpu
        used_v[v, 1] += req_mem
        used_v[v, 2] += req_disk
        count_v[v] += 1
        if um[v]:
            pool_used_v[v] += req_mem + req_gmem
        elif gpu_task:
            gpu_used_v[cgpu[j]] += req_gmem
        choice_v[depth] = j

        if depth == n_tasks - 1:
            evaluated += 1
            if evaluated > limit:
                exceeded = True
            else:
                frac = (tsum_v[depth] + term) / n_tasks
                acc = 0.0
                lbar = 0.0
                occupied = 0
                for k in range(m):
                    if count_v[k] > 0:
                        l = 0.5 * ((use_cpu[k] + used_v[k, 0]) / (<double> cap_cpu[k])
                                   + (use_mem[k] + used_v[k, 1]) / (<double> cap_mem[k]))
                        lbar += l
                        occupied += 1
                lbar = lbar / occupied
                for k in range(m):
                    if count_v[k] > 0:
                        l = 0.5 * ((use_cpu[k] + used_v[k, 0]) / (<double> cap_cpu[k])
                                   + (use_mem[k] + used_v[k, 1]) / (<double> cap_mem[k]))
                        d = l - lbar
                        acc += d * d
                load = acc / occupied
                total = frac + alpha * load
                if (not found) or total < best_total:
                    found = True
                    best_total = total
                    best_frac = frac
                    best_load = load
                    for k in range(n_tasks):
                        best_v[k] = choice_v[k]

            used_v[v, 0] -= req_cpu
            used_v[v, 1] -= req_mem
            used_v[v, 2] -= req_disk
            count_v[v] -= 1
            if um[v]:
                pool_used_v[v] -= req_mem + req_gmem
            elif gpu_task:
                gpu_used_v[cgpu[j]] -= req_gmem
            ptr_v[depth] += 1
            if exceeded:
                break
        else:
            tsum_v[depth + 1] = tsum_v[depth] + term
            depth += 1
            ptr_v[depth] = cand_start[depth]

    if not found:
        return None, 0.0, 0.0, 0.0, evaluated, exceeded
    return [int(best_v[k]) for k in range(n_tasks)], best_total, best_frac, best_load, evaluated, exceeded
