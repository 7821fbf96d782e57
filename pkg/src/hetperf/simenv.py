"""Synthetic device: analytic time/energy/thermal model standing in for hardware.

Makespan follows the greedy-schedule shape ``max(T1/(P*s), Tinf/s)`` with a
memory-contention factor and truncated Gaussian noise; power is the sheet's
quadratic per-core curve; each core heats and cools as a first-order RC node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import TelemetryRow
from .errors import InfeasibleAction, InvalidArgument
from .hetgraph import (
    Action,
    CacheLevel,
    DagEdge,
    DeviceSheet,
    DvfsCluster,
    HeteroGraph,
    RuntimeState,
    TaskDag,
    TaskSpec,
    build_hetero_graph,
    check_action,
    dag_metrics,
)

RUN_MODE_FLAG = {"serial": 0.0, "tasks": 1.0, "tied": 2.0}

# counter synthesis constants
INSTR_PER_SECOND = 1.0e9
CPI_BASE, CPI_MEM = 1.0, 1.5
REFS_BASE, REFS_MEM = 0.05, 0.30
MISS_BASE, MISS_MEM, MISS_SHARE = 0.02, 0.10, 0.03
BRANCH_MISS_RATE = 0.04
CONTENTION = 0.1
PAGE_BYTES = 4096.0


def default_sheet() -> DeviceSheet:
    """Four cores in a big and a LITTLE cluster, two cache levels, 50 C cap."""
    return DeviceSheet(
        device_id="desk4",
        clusters=(
            DvfsCluster("big", (0, 1), (1.0e9, 1.5e9, 2.0e9), (0.5, 0.3, 0.1), bandwidth=2.0),
            DvfsCluster("little", (2, 3), (0.6e9, 1.0e9, 1.4e9), (0.25, 0.15, 0.05), bandwidth=1.0),
        ),
        caches=(
            CacheLevel(1, 32 * 1024, 4, 64, 1.0, 4.0, shared=False),
            CacheLevel(2, 1024 * 1024, 16, 64, 10.0, 2.0, shared=True),
        ),
        t_max=50.0,
        t_ambient=25.0,
    )


# --------------------------------------------------------------------------
# workloads


@dataclass(frozen=True)
class SyntheticWorkload:
    name: str
    dag: TaskDag
    mu: float
    input_size: int = 1
    run_mode: str = "tasks"

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise InvalidArgument("memory intensity must lie in [0, 1]")


@dataclass(frozen=True)
class _Profile:
    mu: float
    loops: float
    loop_depth: float
    cyclomatic: float
    branch_density: float
    arrays: float
    pointers: float
    recursion: float


_PROFILES = {
    "fib": _Profile(0.10, 1, 1, 6, 0.25, 0, 2, 1),
    "sort": _Profile(0.50, 3, 2, 9, 0.15, 4, 2, 0),
    "stencil": _Profile(0.70, 4, 3, 5, 0.05, 6, 0, 0),
    "pipeline": _Profile(0.30, 2, 1, 4, 0.10, 2, 1, 0),
    "sparselu": _Profile(0.60, 5, 3, 12, 0.08, 8, 3, 0),
}
BENCHMARKS = tuple(_PROFILES)


def _jitter(name: str, k: int) -> float:
    """Deterministic per-task variation in [0.9, 1.1]."""
    h = (hash_str(name) * 31 + k * 2654435761) % 1000
    return 0.9 + 0.2 * h / 999.0


def hash_str(s: str) -> int:
    return sum((i + 1) * ord(c) for i, c in enumerate(s))


def _task(name: str, k: int, weight: float, prof: _Profile, input_size: int, mode: str) -> TaskSpec:
    j = _jitter(name, k)
    weight = weight * j
    instr = weight * INSTR_PER_SECOND
    arith = instr * (1 - prof.mu) / 1e6
    mem = instr * prof.mu / 1e6
    branches = instr * 0.1 * prof.branch_density
    cfg = (
        prof.loops * j,
        prof.loop_depth,
        prof.cyclomatic * j,
        branches / 1e6,
        arith,
        mem,
        arith / mem if mem > 0 else arith,
        prof.arrays * j,
        prof.pointers,
        prof.branch_density,
        prof.recursion,
        1.0,
    )
    static = (instr, instr * prof.mu * 4.0, 1.0, branches)
    dynamic = (float(input_size), 100.0 * input_size * j, 0.0, 0.0, CPI_BASE + CPI_MEM * prof.mu, RUN_MODE_FLAG[mode], weight * (1 - prof.mu))
    return TaskSpec(f"{name}{k}", weight, cfg, static, dynamic)


def _fib(s):
    depth = 2 + (s + 1) // 2
    nodes, edges = [], []
    for k in range(2**depth - 1):
        leaf = k >= 2 ** (depth - 1) - 1
        nodes.append((k, 0.05 * s if leaf else 0.01 * s))
        if k:
            edges.append(((k - 1) // 2, k, "spawn"))
    return nodes, edges


def _sort(s):
    chunks = 2 + s
    nodes = [(0, 0.02 * s)]
    edges = []
    level = []
    for c in range(chunks):
        nodes.append((c + 1, 0.12 * s))
        edges.append((0, c + 1, "spawn"))
        level.append(c + 1)
    nxt = chunks + 1
    while len(level) > 1:
        new = []
        for a in range(0, len(level) - 1, 2):
            nodes.append((nxt, 0.04 * s))
            edges += [(level[a], nxt, "join"), (level[a + 1], nxt, "join")]
            new.append(nxt)
            nxt += 1
        if len(level) % 2:
            new.append(level[-1])
        level = new
    return nodes, edges


def _stencil(s):
    g = 2 + (s + 1) // 2
    nodes = [(r * g + c, 0.03 * s) for r in range(g) for c in range(g)]
    edges = []
    for r in range(g):
        for c in range(g):
            if c + 1 < g:
                edges.append((r * g + c, r * g + c + 1, "data"))
            if r + 1 < g:
                edges.append((r * g + c, (r + 1) * g + c, "data"))
    return nodes, edges


def _pipeline(s):
    length = 3 + s
    nodes = [(0, 0.02 * s)]
    edges = []
    k = 1
    tails = []
    for _ in range(2):
        prev = 0
        for i in range(length):
            nodes.append((k, 0.015 * s if i < length - 1 else 0.15 * s))
            edges.append((prev, k, "spawn" if prev == 0 else "data"))
            prev = k
            k += 1
        tails.append(prev)
    nodes.append((k, 0.03 * s))
    edges += [(t, k, "join") for t in tails]
    return nodes, edges


def _sparselu(s):
    layers = 3 + s // 2
    nodes, edges = [], []
    k = 0
    pivot = None
    for layer in range(layers):
        p = k
        nodes.append((p, 0.05 * s))
        if pivot is not None:
            edges.append((pivot, p, "data"))
        k += 1
        first = None
        for _ in range(layers - layer):
            nodes.append((k, 0.04 * s))
            edges.append((p, k, "spawn"))
            first = k if first is None else first
            k += 1
        pivot = first if first is not None else p
    return nodes, edges


_BUILDERS: dict[str, Callable[[int], tuple[list, list]]] = {
    "fib": _fib,
    "sort": _sort,
    "stencil": _stencil,
    "pipeline": _pipeline,
    "sparselu": _sparselu,
}


@lru_cache(maxsize=512)
def make_workload(name: str, input_size: int = 1, run_mode: str = "tasks") -> SyntheticWorkload:
    if name not in _BUILDERS:
        raise InvalidArgument(f"unknown benchmark {name!r}; known: {sorted(_BUILDERS)}")
    if input_size < 1:
        raise InvalidArgument("input size must be >= 1")
    prof = _PROFILES[name]
    raw_nodes, raw_edges = _BUILDERS[name](input_size)
    specs = [_task(name, k, w, prof, input_size, run_mode) for k, w in raw_nodes]
    edges = tuple(
        DagEdge(f"{name}{a}", f"{name}{b}", kind, volume=specs[a].static[1] * 0.1) for a, b, kind in raw_edges
    )
    out_deg: dict[int, int] = {}
    for a, _, kind in raw_edges:
        if kind == "spawn":
            out_deg[a] = out_deg.get(a, 0) + 1
    specs = [
        replace(sp, static=(sp.static[0], sp.static[1], float(out_deg.get(k, 1)), sp.static[3])) for k, sp in enumerate(specs)
    ]
    return SyntheticWorkload(name, TaskDag(tuple(specs), edges), prof.mu, input_size, run_mode)


@lru_cache(maxsize=512)
def _work_span(dag: TaskDag) -> tuple[float, float]:
    m = dag_metrics(dag)
    return m.work, m.span


# --------------------------------------------------------------------------
# environment state and dynamics


@dataclass(frozen=True)
class EnvConfig:
    r_th: float = 10.0
    tau_rc: float = 8.0
    sigma_noise: float = 0.05
    cooldown: float = 2.0
    util_decay: float = 0.7

    def __post_init__(self):
        if self.sigma_noise < 0 or self.r_th <= 0 or self.tau_rc <= 0 or self.cooldown < 0:
            raise InvalidArgument("invalid environment constants")


@dataclass(frozen=True)
class SimEnvState:
    temperatures: tuple[float, ...]
    t_ambient: float
    utilization: tuple[float, ...]
    trend: tuple[float, ...]
    clock: float = 0.0
    iteration: int = 0

    @classmethod
    def initial(cls, sheet: DeviceSheet) -> "SimEnvState":
        C = sheet.core_count
        return cls((sheet.t_ambient,) * C, sheet.t_ambient, (0.0,) * C, (0.0,) * C)

    def runtime_state(self, sheet: DeviceSheet, action: Action) -> RuntimeState:
        return RuntimeState.from_action(sheet, action, self.utilization, self.temperatures, self.trend)


def _mean_speed(sheet: DeviceSheet, action: Action) -> float:
    f_max = sheet.f_max
    active = action.active
    return sum(sheet.table(i)[action.dvfs[i]] / f_max for i in active) / len(active)


def expected_time(workload: SyntheticWorkload, action: Action, sheet: DeviceSheet) -> float:
    """Noise-free makespan of ``workload`` under ``action``."""
    check_action(action, sheet)
    work, span = _work_span(workload.dag)
    P = 1 if workload.run_mode == "serial" else len(action.active)
    s = _mean_speed(sheet, action)
    kappa = 1.0 + workload.mu * (P - 1) * CONTENTION
    return max(work / (P * s), span / s) * kappa


def _truncated_normal(rng: np.random.Generator, sigma: float) -> float:
    if sigma == 0:
        return 0.0
    while True:
        e = rng.normal(0.0, sigma)
        if abs(e) <= 3 * sigma:
            return float(e)


def relax(state: SimEnvState, seconds: float, powers: Sequence[float], cfg: EnvConfig) -> tuple[float, ...]:
    decay = math.exp(-seconds / cfg.tau_rc)
    return tuple(
        state.t_ambient + (t - state.t_ambient) * decay + p * cfg.r_th * (1 - decay) for t, p in zip(state.temperatures, powers)
    )


def idle(state: SimEnvState, seconds: float, cfg: EnvConfig) -> SimEnvState:
    temps = relax(state, seconds, [0.0] * len(state.temperatures), cfg)
    return replace(
        state,
        temperatures=temps,
        utilization=tuple(u * cfg.util_decay for u in state.utilization),
        trend=tuple(b - a for a, b in zip(state.temperatures, temps)),
        clock=state.clock + seconds,
    )


def simulate_execution(
    state: SimEnvState,
    workload: SyntheticWorkload,
    action: Action,
    sheet: DeviceSheet,
    rng: np.random.Generator,
    cfg: EnvConfig = EnvConfig(),
    seed: int = 0,
) -> tuple[TelemetryRow, SimEnvState]:
    check_action(action, sheet)
    C = sheet.core_count
    work, span = _work_span(workload.dag)
    serial = workload.run_mode == "serial"
    P = 1 if serial else len(action.active)
    s = _mean_speed(sheet, action)
    kappa = 1.0 + workload.mu * (P - 1) * CONTENTION
    eps = _truncated_normal(rng, cfg.sigma_noise)
    time = max(work / (P * s), span / s) * kappa * (1 + eps)

    freqs = tuple(sheet.table(i)[min(action.dvfs[i], len(sheet.table(i)) - 1)] for i in range(C))
    powers = [sheet.clusters[sheet.cluster_of(i)].power(freqs[i]) if action.mask[i] else 0.0 for i in range(C)]
    power = math.fsum(powers)
    energy = power * time
    temps_post = relax(state, time, powers, cfg)

    instructions = math.fsum(n.static[0] for n in workload.dag.nodes)
    branches = math.fsum(n.static[3] for n in workload.dag.nodes)
    nbytes = math.fsum(n.static[1] for n in workload.dag.nodes)
    mu = workload.mu
    cycles = instructions * (CPI_BASE + CPI_MEM * mu * kappa)
    cache_refs = instructions * (REFS_BASE + REFS_MEM * mu)
    miss_rate = min(0.95, MISS_BASE + MISS_MEM * mu + MISS_SHARE * mu * (P - 1))
    cache_misses = cache_refs * miss_rate * (1 + _truncated_normal(rng, cfg.sigma_noise))
    branch_misses = branches * BRANCH_MISS_RATE * (1 + _truncated_normal(rng, cfg.sigma_noise))
    task_clock = work * kappa / s
    cpu_clock = P * time
    utilization = min(1.0, task_clock / cpu_clock)

    run_util = [utilization if b else 0.0 for b in action.mask]
    new_util = tuple(cfg.util_decay * u + (1 - cfg.util_decay) * r for u, r in zip(state.utilization, run_util))
    delta = tuple(b - a for a, b in zip(state.temperatures, temps_post))
    row = TelemetryRow(
        timestamp=state.clock,
        iteration=state.iteration,
        benchmark=workload.name,
        run_mode=workload.run_mode,
        input_size=workload.input_size,
        dvfs_indices=action.dvfs,
        measured_freqs=freqs,
        num_active_cores=len(action.active),
        core_mask=action.mask_string,
        elapsed_time=time,
        energy=energy,
        power=power,
        cycles=cycles,
        instructions=instructions,
        cache_refs=cache_refs,
        cache_misses=cache_misses,
        branches=branches,
        branch_misses=branch_misses,
        task_clock=task_clock,
        cpu_clock=cpu_clock,
        page_faults=nbytes / PAGE_BYTES,
        utilization=utilization,
        temps_pre=state.temperatures,
        temps_post=temps_post,
        util_pre=state.utilization,
        trend_pre=state.trend,
        delta_t=delta,
        headroom=sheet.t_max - max(temps_post),
        source="synthetic",
        seed=seed,
        device_id=sheet.device_id,
    )
    nxt = SimEnvState(temps_post, state.t_ambient, new_util, delta, state.clock + time, state.iteration + 1)
    return row, nxt


def enumerate_actions(sheet: DeviceSheet, state: SimEnvState, cap: float | None = None) -> list[Action]:
    """Every non-empty mask with every DVFS assignment of its active cores.

    Returns nothing when any core is above the thermal cap. Inactive cores
    carry DVFS index 0. Output is sorted by (mask, dvfs).
    """
    cap = sheet.t_max if cap is None else cap
    if any(t > cap for t in state.temperatures):
        return []
    C = sheet.core_count
    out = []
    for mask in itertools.product((0, 1), repeat=C):
        if not any(mask):
            continue
        ranges = [range(len(sheet.table(i))) if mask[i] else range(1) for i in range(C)]
        for dvfs in itertools.product(*ranges):
            out.append(Action(mask, dvfs))
    out.sort(key=lambda a: a.key)
    return out


def fallback_action(sheet: DeviceSheet) -> Action:
    """Single core at the lowest frequency: the slowest, coolest choice."""
    C = sheet.core_count
    best = min(range(C), key=lambda i: (sheet.table(i)[0], i))
    mask = tuple(1 if i == best else 0 for i in range(C))
    return Action(mask, (0,) * C)


class SimEnv:
    """Stateful single-threaded wrapper around the pure dynamics."""

    def __init__(self, sheet: DeviceSheet | None = None, cfg: EnvConfig = EnvConfig(), seed: int = 0):
        self.sheet = sheet or default_sheet()
        self.cfg = cfg
        self.seed = seed
        self.reset()

    def reset(self) -> SimEnvState:
        self.rng = np.random.default_rng(self.seed)
        self.state = SimEnvState.initial(self.sheet)
        return self.state

    def step(self, workload: SyntheticWorkload, action: Action) -> TelemetryRow:
        row, self.state = simulate_execution(self.state, workload, action, self.sheet, self.rng, self.cfg, self.seed)
        return row

    def idle(self, seconds: float | None = None) -> SimEnvState:
        self.state = idle(self.state, self.cfg.cooldown if seconds is None else seconds, self.cfg)
        return self.state

    def actions(self, cap: float | None = None) -> list[Action]:
        return enumerate_actions(self.sheet, self.state, cap)


# --------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepGrid:
    masks: tuple[tuple[int, ...], ...]
    dvfs: tuple[int | tuple[int, ...], ...]
    inputs: tuple[int, ...] = (1,)
    modes: tuple[str, ...] = ("tasks",)
    reps: int = 1

    def size(self, n_benchmarks: int) -> int:
        return n_benchmarks * len(self.masks) * len(self.dvfs) * len(self.inputs) * len(self.modes) * self.reps


def grid_action(sheet: DeviceSheet, mask: Sequence[int], dvfs) -> Action:
    C = sheet.core_count
    if isinstance(dvfs, int):
        idx = tuple(min(dvfs, len(sheet.table(i)) - 1) if mask[i] else 0 for i in range(C))
    else:
        idx = tuple(int(dvfs[i]) if mask[i] else 0 for i in range(C))
    return Action(tuple(mask), idx)


def default_grid(sheet: DeviceSheet | None = None) -> SweepGrid:
    """Ten masks x four DVFS settings x five inputs x two modes (2,000 rows for five benchmarks)."""
    masks = ((1, 0, 0, 0), (0, 0, 0, 1), (1, 1, 0, 0), (0, 0, 1, 1), (1, 0, 1, 0), (0, 1, 0, 1), (1, 1, 1, 0), (0, 1, 1, 1), (1, 0, 1, 1), (1, 1, 1, 1))
    return SweepGrid(masks=masks, dvfs=(0, 1, 2, (2, 2, 0, 0)), inputs=(1, 2, 3, 4, 5), modes=("serial", "tasks"))


def sweep_generate(
    benchmarks: Sequence[str],
    sheet: DeviceSheet,
    grid: SweepGrid,
    seed: int,
    cfg: EnvConfig = EnvConfig(),
) -> list[TelemetryRow]:
    """One row per grid cell and repetition, each cell preceded by a discarded warm-up run."""
    env = SimEnv(sheet, cfg, seed)
    rows = []
    for name in benchmarks:
        for size in grid.inputs:
            for mode in grid.modes:
                wl = make_workload(name, size, mode)
                for mask in grid.masks:
                    for dv in grid.dvfs:
                        action = grid_action(sheet, mask, dv)
                        env.step(wl, action)  # warm-up
                        for _ in range(grid.reps):
                            rows.append(env.step(wl, action))
                        env.idle()
    return rows


def row_action(row: TelemetryRow) -> Action:
    return Action(tuple(int(c) for c in row.core_mask), row.dvfs_indices)


def graph_for_row(row: TelemetryRow, sheet: DeviceSheet) -> HeteroGraph:
    """Rebuild the model input for a logged execution (pre-run state + action)."""
    wl = make_workload(row.benchmark, row.input_size, row.run_mode)
    action = row_action(row)
    state = RuntimeState.from_action(sheet, action, row.util_pre, row.temps_pre, row.trend_pre)
    meta = {"source": row.source, "seed": row.seed, "device_id": row.device_id, "timestamp": row.timestamp, "benchmark": row.benchmark}
    return build_hetero_graph(wl.dag, sheet, state, action, meta)


def graph_for_state(workload: SyntheticWorkload, sheet: DeviceSheet, state: SimEnvState, action: Action) -> HeteroGraph:
    meta = {"source": "synthetic", "device_id": sheet.device_id, "timestamp": state.clock, "benchmark": workload.name}
    return build_hetero_graph(workload.dag, sheet, state.runtime_state(sheet, action), action, meta)
