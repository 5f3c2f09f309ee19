"""Resource-balance-variance scheduler: candidates, scoring, selection.

Maps an ordered task pipeline onto cell nodes by enumerating the candidate
product depth-first with cumulative-constraint pruning and minimizing the
sum of per-allocation resource-fraction variance (plus a small GPU bonus)
and weighted cross-node load variance.

Constraint checks use exact integer arithmetic; scores are float64. All
summations run in a fixed canonical order (tasks in pipeline order,
resources as cpu/mem/disk/gmem, nodes in ascending id order) so repeated
runs and both kernel backends produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..descriptor import SkillLibrary, resolve_deployments
from ..errors import (
    ExhaustedResource,
    NoCandidates,
    NoFeasibleAllocation,
    SearchSpaceExceeded,
)
from ..model import (
    AllocationScheme,
    Assignment,
    DeploymentOption,
    NodeRecord,
    TaskPipeline,
)
from .backend import active_kernel, pure_kernel

DEFAULT_ALPHA = 0.1
DEFAULT_BETA_GPU = -0.01
DEFAULT_MAX_SCHEMES = 1_000_000


@dataclass(frozen=True)
class SchedulerConfig:
    alpha: float = DEFAULT_ALPHA
    beta_gpu: float = DEFAULT_BETA_GPU
    max_schemes: int = DEFAULT_MAX_SCHEMES

    @classmethod
    def from_dict(cls, data: dict) -> "SchedulerConfig":
        return cls(alpha=float(data.get("alpha", DEFAULT_ALPHA)),
                   beta_gpu=float(data.get("beta_gpu", DEFAULT_BETA_GPU)),
                   max_schemes=int(data.get("max_schemes", DEFAULT_MAX_SCHEMES)))


@dataclass(frozen=True)
class TaskScore:
    task_id: str
    node: str
    deployment_id: str
    gpu_id: Optional[str]
    fractions: dict
    variance: float
    beta: float


@dataclass(frozen=True)
class ScoredScheme:
    scheme: AllocationScheme
    fraction_variance_term: float
    load_variance_term: float
    total: float
    per_task: tuple[TaskScore, ...] = ()

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "fraction_variance_term": self.fraction_variance_term,
            "load_variance_term": self.load_variance_term,
            "total": self.total,
            "per_task": [
                {"task_id": t.task_id, "node": t.node,
                 "deployment_id": t.deployment_id, "gpu_id": t.gpu_id,
                 "fractions": t.fractions, "variance": t.variance, "beta": t.beta}
                for t in self.per_task
            ],
        }


def compatible(deployment: DeploymentOption, node: NodeRecord) -> bool:
    """Static feasibility of one deployment on one node (arch + headroom)."""
    if node.arch not in deployment.supported_archs:
        return False
    req = deployment.request
    free_cpu = node.capacity.cpu - node.usage.cpu
    free_mem = node.capacity.mem - node.usage.mem
    free_disk = node.capacity.disk - node.usage.disk
    if req.cpu > free_cpu or req.disk > free_disk:
        return False
    if not deployment.requires_gpu:
        return req.mem <= free_mem
    if node.gpu.unified_memory:
        return req.mem + req.gmem <= free_mem
    if req.mem > free_mem:
        return False
    return any(g.mem_free >= req.gmem for g in node.gpu.gpus)


@dataclass(frozen=True)
class Candidate:
    """One (deployment, node[, gpu]) option for a task, pre-tie-break-sorted."""

    node_idx: int
    node_id: str
    deployment: DeploymentOption
    gpu_idx: int  # index into the flat GPU table, -1 when unbound
    gpu_id: Optional[str]

    @property
    def sort_key(self) -> tuple:
        return (self.node_id, self.deployment.deployment_id, self.gpu_id or "")


@dataclass
class Problem:
    """Flattened instance handed to the search kernels."""

    tasks: tuple
    nodes: tuple[NodeRecord, ...]
    candidates: list[list[Candidate]]
    # kernel arrays
    cand_start: list = field(default_factory=list)
    cnode: list = field(default_factory=list)
    cgpu: list = field(default_factory=list)
    creq: list = field(default_factory=list)
    cgpuflag: list = field(default_factory=list)
    free: list = field(default_factory=list)
    cap_cpu: list = field(default_factory=list)
    cap_mem: list = field(default_factory=list)
    use_cpu: list = field(default_factory=list)
    use_mem: list = field(default_factory=list)
    um: list = field(default_factory=list)
    gpu_free: list = field(default_factory=list)

    def kernel_args(self):
        return (len(self.tasks), self.cand_start, self.cnode, self.cgpu,
                self.creq, self.cgpuflag, self.free, self.cap_cpu, self.cap_mem,
                self.use_cpu, self.use_mem, self.um, self.gpu_free)


def build_problem(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
                  library: SkillLibrary) -> Problem:
    """Resolve deployments, expand per-GPU bindings and flatten the instance.

    Raises NoCandidates for any task whose candidate set is empty.
    """
    ordered_nodes = tuple(sorted(nodes, key=lambda n: n.id))
    gpu_index: dict[tuple[int, str], int] = {}
    gpu_free: list[int] = []
    for v, node in enumerate(ordered_nodes):
        for g in node.gpu.gpus:
            gpu_index[(v, g.gpu_id)] = len(gpu_free)
            gpu_free.append(g.mem_free)

    per_task: list[list[Candidate]] = []
    for task in pipeline.tasks:
        options = resolve_deployments(library, task)
        cands: list[Candidate] = []
        for v, node in enumerate(ordered_nodes):
            for dep in options:
                if not compatible(dep, node):
                    continue
                if dep.requires_gpu and not node.gpu.unified_memory:
                    for g in node.gpu.gpus:
                        if g.mem_free >= dep.request.gmem:
                            cands.append(Candidate(v, node.id, dep,
                                                   gpu_index[(v, g.gpu_id)], g.gpu_id))
                else:
                    cands.append(Candidate(v, node.id, dep, -1, None))
        if not cands:
            raise NoCandidates(task.task_id)
        cands.sort(key=lambda c: c.sort_key)
        per_task.append(cands)

    problem = Problem(tasks=pipeline.tasks, nodes=ordered_nodes, candidates=per_task)
    problem.cand_start = [0]
    for cands in per_task:
        for c in cands:
            problem.cnode.append(c.node_idx)
            problem.cgpu.append(c.gpu_idx)
            req = c.deployment.request
            problem.creq.append((req.cpu, req.mem, req.disk, req.gmem))
            problem.cgpuflag.append(1 if c.deployment.requires_gpu else 0)
        problem.cand_start.append(len(problem.cnode))
    for node in ordered_nodes:
        problem.free.append((node.capacity.cpu - node.usage.cpu,
                             node.capacity.mem - node.usage.mem,
                             node.capacity.disk - node.usage.disk))
        problem.cap_cpu.append(node.capacity.cpu)
        problem.cap_mem.append(node.capacity.mem)
        problem.use_cpu.append(node.usage.cpu)
        problem.use_mem.append(node.usage.mem)
        problem.um.append(1 if node.gpu.unified_memory else 0)
    problem.gpu_free = gpu_free
    return problem


def _candidate_by_assignment(problem: Problem, depth: int, assignment: Assignment) -> int:
    base = problem.cand_start[depth]
    for offset, cand in enumerate(problem.candidates[depth]):
        if (cand.node_id == assignment.node
                and cand.deployment.deployment_id == assignment.deployment_id
                and cand.gpu_id == assignment.gpu_id):
            return base + offset
    raise NoFeasibleAllocation(
        f"assignment for task {assignment.task_id!r} names no known candidate")


def _choice_to_scheme(problem: Problem, choice: Sequence[int]) -> AllocationScheme:
    assignments = []
    for depth, j in enumerate(choice):
        cand = problem.candidates[depth][j - problem.cand_start[depth]]
        assignments.append(Assignment(
            task_id=problem.tasks[depth].task_id,
            node=cand.node_id,
            deployment_id=cand.deployment.deployment_id,
            gpu_id=cand.gpu_id,
        ))
    return AllocationScheme(tuple(assignments))


def explain_choice(problem: Problem, choice: Sequence[int],
                   config: SchedulerConfig) -> ScoredScheme:
    """Replay one complete scheme and break its score down per task.

    Raises ExhaustedResource when any fraction denominator is <= 0 and
    NoFeasibleAllocation when a cumulative constraint fails; callers that
    enumerate treat either as "prune".
    """
    m = len(problem.nodes)
    used = [[0, 0, 0] for _ in range(m)]
    pool_used = [0] * m
    gpu_used = [0] * len(problem.gpu_free)
    count = [0] * m
    per_task = []
    term_sum = 0.0

    for depth, j in enumerate(choice):
        cand = problem.candidates[depth][j - problem.cand_start[depth]]
        v = cand.node_idx
        req = problem.creq[j]
        gpu_task = problem.cgpuflag[j]
        free_v = problem.free[v]

        rem_cpu = free_v[0] - used[v][0]
        rem_disk = free_v[2] - used[v][2]
        if req[0] > rem_cpu or req[2] > rem_disk:
            raise NoFeasibleAllocation(
                f"task {problem.tasks[depth].task_id!r}: cumulative cpu/disk "
                f"constraint violated on node {cand.node_id!r}")
        if rem_cpu <= 0 or rem_disk <= 0:
            raise ExhaustedResource(
                f"task {problem.tasks[depth].task_id!r}: cpu/disk denominator <= 0")

        if problem.um[v]:
            pool_rem = free_v[1] - pool_used[v]
            if req[1] + req[3] > pool_rem:
                raise NoFeasibleAllocation(
                    f"task {problem.tasks[depth].task_id!r}: unified-memory pool "
                    f"constraint violated on node {cand.node_id!r}")
            den_mem = pool_rem - req[3]
            den_gmem = pool_rem - req[1]
            if den_mem <= 0 or (gpu_task and den_gmem <= 0):
                raise ExhaustedResource(
                    f"task {problem.tasks[depth].task_id!r}: memory denominator <= 0")
        else:
            rem_mem = free_v[1] - used[v][1]
            if req[1] > rem_mem:
                raise NoFeasibleAllocation(
                    f"task {problem.tasks[depth].task_id!r}: cumulative mem "
                    f"constraint violated on node {cand.node_id!r}")
            if rem_mem <= 0:
                raise ExhaustedResource(
                    f"task {problem.tasks[depth].task_id!r}: mem denominator <= 0")
            den_mem = rem_mem
            den_gmem = 0
            if gpu_task:
                g = cand.gpu_idx
                den_gmem = problem.gpu_free[g] - gpu_used[g]
                if req[3] > den_gmem:
                    raise NoFeasibleAllocation(
                        f"task {problem.tasks[depth].task_id!r}: per-GPU memory "
                        f"constraint violated on {cand.gpu_id!r}")
                if den_gmem <= 0:
                    raise ExhaustedResource(
                        f"task {problem.tasks[depth].task_id!r}: GPU memory "
                        f"denominator <= 0")

        f_cpu = req[0] / rem_cpu
        f_mem = req[1] / den_mem
        f_disk = req[2] / rem_disk
        fractions = {"cpu": f_cpu, "mem": f_mem, "disk": f_disk}
        if gpu_task:
            f_gmem = req[3] / den_gmem
            fractions["gmem"] = f_gmem
            fbar = (f_cpu + f_mem + f_disk + f_gmem) / 4.0
            d0, d1, d2, d3 = f_cpu - fbar, f_mem - fbar, f_disk - fbar, f_gmem - fbar
            variance = (d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3) / 4.0
            beta = config.beta_gpu
        else:
            fbar = (f_cpu + f_mem + f_disk) / 3.0
            d0, d1, d2 = f_cpu - fbar, f_mem - fbar, f_disk - fbar
            variance = (d0 * d0 + d1 * d1 + d2 * d2) / 3.0
            beta = 0.0
        term_sum += variance + beta
        per_task.append(TaskScore(
            task_id=problem.tasks[depth].task_id,
            node=cand.node_id,
            deployment_id=cand.deployment.deployment_id,
            gpu_id=cand.gpu_id,
            fractions=fractions,
            variance=variance,
            beta=beta,
        ))

        used[v][0] += req[0]
        used[v][1] += req[1]
        used[v][2] += req[2]
        count[v] += 1
        if problem.um[v]:
            pool_used[v] += req[1] + req[3]
        elif gpu_task:
            gpu_used[cand.gpu_idx] += req[3]

    frac = term_sum / len(choice)
    lv = []
    lsum = 0.0
    for v in range(m):
        if count[v] > 0:
            l = 0.5 * ((problem.use_cpu[v] + used[v][0]) / problem.cap_cpu[v]
                       + (problem.use_mem[v] + used[v][1]) / problem.cap_mem[v])
            lv.append(l)
            lsum += l
    lbar = lsum / len(lv)
    acc = 0.0
    for l in lv:
        d = l - lbar
        acc += d * d
    load = acc / len(lv)

    return ScoredScheme(
        scheme=_choice_to_scheme(problem, choice),
        fraction_variance_term=frac,
        load_variance_term=load,
        total=frac + config.alpha * load,
        per_task=tuple(per_task),
    )


def resource_fractions(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
                       library: SkillLibrary, scheme: AllocationScheme, index: int,
                       config: SchedulerConfig | None = None) -> dict:
    """Fractions f^r of assignment ``index`` after earlier-in-pipeline reservations."""
    config = config or SchedulerConfig()
    problem = build_problem(pipeline, nodes, library)
    choice = [_candidate_by_assignment(problem, depth, a)
              for depth, a in enumerate(scheme.assignments[:index + 1])]
    scored = explain_choice(problem, choice, config)
    return scored.per_task[index].fractions


def score_scheme(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
                 library: SkillLibrary, scheme: AllocationScheme,
                 config: SchedulerConfig | None = None) -> ScoredScheme:
    """Score one complete scheme (pre: it satisfies the cumulative constraints)."""
    config = config or SchedulerConfig()
    problem = build_problem(pipeline, nodes, library)
    choice = [_candidate_by_assignment(problem, depth, a)
              for depth, a in enumerate(scheme.assignments)]
    return explain_choice(problem, choice, config)


def select_scored(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
                  library: SkillLibrary,
                  config: SchedulerConfig | None = None) -> ScoredScheme:
    """Search the pruned candidate product for the score-minimal scheme."""
    config = config or SchedulerConfig()
    if not pipeline.tasks:
        raise NoFeasibleAllocation("pipeline has no tasks")
    problem = build_problem(pipeline, nodes, library)
    kernel = active_kernel()
    choice, _total, _frac, _load, evaluated, exceeded = kernel.search(
        *problem.kernel_args(), config.alpha, config.beta_gpu, config.max_schemes)
    if exceeded:
        raise SearchSpaceExceeded(
            f"more than {config.max_schemes} feasible schemes; "
            f"raise max_schemes or add deployment preferences")
    if choice is None:
        raise NoFeasibleAllocation(
            "every scheme in the candidate product violates cumulative "
            "resource constraints", {"evaluated": evaluated})
    return explain_choice(problem, choice, config)


def select_allocation(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
                      library: SkillLibrary,
                      config: SchedulerConfig | None = None) -> AllocationScheme:
    return select_scored(pipeline, nodes, library, config).scheme


def score_all(pipeline: TaskPipeline, nodes: Sequence[NodeRecord],
              library: SkillLibrary,
              config: SchedulerConfig | None = None) -> list[ScoredScheme]:
    """Every feasible scheme with its breakdown, best first (debug surface)."""
    config = config or SchedulerConfig()
    if not pipeline.tasks:
        raise NoFeasibleAllocation("pipeline has no tasks")
    problem = build_problem(pipeline, nodes, library)
    out = []
    try:
        for choice, _frac, _load, _total in pure_kernel.iter_feasible(
                *problem.kernel_args(), config.alpha, config.beta_gpu,
                config.max_schemes):
            out.append(explain_choice(problem, choice, config))
    except pure_kernel._EnumerationCapped:
        raise SearchSpaceExceeded(
            f"more than {config.max_schemes} feasible schemes; raise "
            f"max_schemes or add deployment preferences") from None
    def key(s: ScoredScheme):
        return (s.total, tuple((a.node, a.deployment_id, a.gpu_id or "")
                               for a in s.scheme.assignments))
    out.sort(key=key)
    return out
