"""Task DAGs, device sheets and the task/resource/memory heterogeneous graph.

Graph construction follows the usual pipeline: collapse runs of tiny tasks,
compute topological encodings, flag the critical path, attach per-core
resource nodes under a scheduling action and one node per declared cache
level, then wire the four typed edge sets.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CyclicGraph, EmptyGraph, InfeasibleAction, InvalidArgument, InvalidDag, ParseError

DEP_KINDS = ("spawn", "join", "data")

CFG_FEATURES = (
    "loop_count",
    "max_loop_depth",
    "cyclomatic",
    "branch_count",
    "arith_ops",
    "mem_ops",
    "arith_intensity",
    "array_accesses",
    "pointer_ops",
    "branch_density",
    "recursion_flag",
    "pragma_flag",
)
STATIC_FEATURES = ("instructions", "bytes_moved", "parallel_degree", "branch_proxy")
DYNAMIC_FEATURES = (
    "input_size",
    "iterations",
    "fan_in",
    "fan_out",
    "counter_snapshot",
    "run_mode_flag",
    "thermal_footprint",
)

# log1p is applied to heavy-tailed counts when featurizing
_CFG_LOG = (0, 2, 3, 4, 5, 7, 8)
_STATIC_LOG = (0, 1, 3)
_DYNAMIC_LOG = (1,)

MAX_DVFS_LEVELS = 8
EDGE_TYPES = ("TT", "TR", "RR", "RM")
GOVERNORS = ("performance", "powersave", "schedutil")

TASK_FEATURE_DIM = 1 + len(CFG_FEATURES) + len(STATIC_FEATURES) + len(DYNAMIC_FEATURES)
TASK_TOPO_DIM = 7
RES_FEATURE_DIM = MAX_DVFS_LEVELS + 9
RES_TOPO_DIM = 3
MEM_FEATURE_DIM = 7
DEVICE_CTX_DIM = 9 + len(GOVERNORS)
EDGE_FEATURE_DIMS = {"TT": 7, "TR": 2, "RR": 2, "RM": 2}


# --------------------------------------------------------------------------
# task DAG


@dataclass(frozen=True)
class TaskSpec:
    id: str
    weight: float
    cfg_features: tuple[float, ...] = (0.0,) * len(CFG_FEATURES)
    static: tuple[float, ...] = (0.0,) * len(STATIC_FEATURES)
    dynamic: tuple[float, ...] = (0.0,) * len(DYNAMIC_FEATURES)

    def __post_init__(self):
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise InvalidDag(f"task {self.id!r}: weight must be > 0, got {self.weight}")
        for name, vals in (("static", self.static), ("dynamic", self.dynamic)):
            if any(v < 0 for v in vals):
                raise InvalidDag(f"task {self.id!r}: negative {name} feature")
        if len(self.static) != len(STATIC_FEATURES) or len(self.dynamic) != len(DYNAMIC_FEATURES):
            raise InvalidDag(f"task {self.id!r}: static/dynamic vector has wrong length")


@dataclass(frozen=True)
class DagEdge:
    src: str
    dst: str
    kind: str = "data"
    volume: float = 0.0

    def __post_init__(self):
        if self.kind not in DEP_KINDS:
            raise InvalidDag(f"unknown dependency kind {self.kind!r}")
        if self.volume < 0:
            raise InvalidDag("edge data volume must be >= 0")


@dataclass(frozen=True)
class TaskDag:
    nodes: tuple[TaskSpec, ...]
    edges: tuple[DagEdge, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidDag("duplicate task ids")
        known = set(ids)
        for e in self.edges:
            if e.src not in known or e.dst not in known:
                raise InvalidDag(f"edge {e.src}->{e.dst} references a missing task")
        if self.nodes:
            n_cfg = len(self.nodes[0].cfg_features)
            if any(len(n.cfg_features) != n_cfg for n in self.nodes):
                raise InvalidDag("cfg feature length differs between tasks")

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> TaskSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            succ[e.src].append(e.dst)
        return succ

    def predecessors(self) -> dict[str, list[str]]:
        pred: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            pred[e.dst].append(e.src)
        return pred

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; ready nodes are released in id order."""
        import heapq

        indeg = {n.id: 0 for n in self.nodes}
        for e in self.edges:
            indeg[e.dst] += 1
        succ = self.successors()
        ready = [v for v, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            v = heapq.heappop(ready)
            order.append(v)
            for w in succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(ready, w)
        if len(order) != len(self.nodes):
            raise CyclicGraph("task graph contains a cycle")
        return order


# --------------------------------------------------------------------------
# device sheet / runtime state / action


@dataclass(frozen=True)
class DvfsCluster:
    """A DVFS domain. ``power_coeffs`` (a, b, c) give watts per core with f in GHz."""

    name: str
    cores: tuple[int, ...]
    frequencies: tuple[float, ...]
    power_coeffs: tuple[float, float, float]
    bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cores", tuple(int(c) for c in self.cores))
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, "power_coeffs", tuple(float(c) for c in self.power_coeffs))
        f = self.frequencies
        if not f or any(b <= a for a, b in zip(f, f[1:])) or f[0] <= 0:
            raise InvalidArgument(f"cluster {self.name!r}: DVFS list must be positive and strictly increasing")
        if len(f) > MAX_DVFS_LEVELS:
            raise InvalidArgument(f"cluster {self.name!r}: at most {MAX_DVFS_LEVELS} DVFS levels supported")

    def power(self, freq_hz: float) -> float:
        a, b, c = self.power_coeffs
        g = freq_hz / 1e9
        return a * g * g + b * g + c


@dataclass(frozen=True)
class CacheLevel:
    level: int
    capacity: int
    associativity: int
    line_bytes: int
    latency: float
    bandwidth: float
    shared: bool = False


@dataclass(frozen=True)
class DeviceSheet:
    device_id: str
    clusters: tuple[DvfsCluster, ...]
    caches: tuple[CacheLevel, ...] = ()
    governors: tuple[str, ...] = GOVERNORS
    t_max: float = 50.0
    t_ambient: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "caches", tuple(self.caches))
        object.__setattr__(self, "governors", tuple(self.governors))
        cores = sorted(c for cl in self.clusters for c in cl.cores)
        if not cores:
            raise InvalidArgument("device needs at least one core")
        if cores != list(range(len(cores))):
            raise InvalidArgument("every core 0..C-1 must belong to exactly one cluster")
        if not self.t_max > self.t_ambient:
            raise InvalidArgument("T_max must exceed ambient temperature")

    @property
    def core_count(self) -> int:
        return sum(len(cl.cores) for cl in self.clusters)

    def cluster_of(self, core: int) -> int:
        for k, cl in enumerate(self.clusters):
            if core in cl.cores:
                return k
        raise KeyError(core)

    def table(self, core: int) -> tuple[float, ...]:
        return self.clusters[self.cluster_of(core)].frequencies

    @property
    def f_max(self) -> float:
        return max(cl.frequencies[-1] for cl in self.clusters)

    @property
    def f_min(self) -> float:
        return min(cl.frequencies[0] for cl in self.clusters)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "clusters": [
                {
                    "name": cl.name,
                    "cores": list(cl.cores),
                    "frequencies": list(cl.frequencies),
                    "power_coeffs": list(cl.power_coeffs),
                    "bandwidth": cl.bandwidth,
                }
                for cl in self.clusters
            ],
            "caches": [vars(c).copy() for c in self.caches],
            "governors": list(self.governors),
            "t_max": self.t_max,
            "t_ambient": self.t_ambient,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "DeviceSheet":
        try:
            return cls(
                device_id=str(raw["device_id"]),
                clusters=tuple(DvfsCluster(**cl) for cl in raw["clusters"]),
                caches=tuple(CacheLevel(**c) for c in raw.get("caches", ())),
                governors=tuple(raw.get("governors", GOVERNORS)),
                t_max=float(raw.get("t_max", 50.0)),
                t_ambient=float(raw.get("t_ambient", 25.0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed device sheet: {exc}") from exc

    @property
    def version_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scaled(self, factor: float) -> "DeviceSheet":
        """Copy with every DVFS frequency multiplied by ``factor`` (device augmentation)."""
        clusters = tuple(
            DvfsCluster(cl.name, cl.cores, tuple(f * factor for f in cl.frequencies), cl.power_coeffs, cl.bandwidth)
            for cl in self.clusters
        )
        return DeviceSheet(self.device_id, clusters, self.caches, self.governors, self.t_max, self.t_ambient)


@dataclass(frozen=True)
class Action:
    mask: tuple[int, ...]
    dvfs: tuple[int, ...]
    priority: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(int(b) for b in self.mask))
        object.__setattr__(self, "dvfs", tuple(int(i) for i in self.dvfs))

    @property
    def key(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (self.mask, self.dvfs)

    @property
    def active(self) -> list[int]:
        return [i for i, b in enumerate(self.mask) if b]

    @property
    def mask_string(self) -> str:
        return "".join(str(b) for b in self.mask)

    def __str__(self) -> str:
        return f"{self.mask_string}/{''.join(str(i) for i in self.dvfs)}"


def check_action(action: Action, sheet: DeviceSheet) -> None:
    C = sheet.core_count
    if len(action.mask) != C or len(action.dvfs) != C:
        raise InfeasibleAction(f"action {action} does not match {C} cores")
    if not any(action.mask):
        raise InfeasibleAction("empty core mask")
    if any(b not in (0, 1) for b in action.mask):
        raise InfeasibleAction("mask bits must be 0/1")
    for i in action.active:
        if not 0 <= action.dvfs[i] < len(sheet.table(i)):
            raise InfeasibleAction(f"core {i}: DVFS index {action.dvfs[i]} out of range")
    if action.priority is not None and not 1 <= action.priority <= 99:
        raise InfeasibleAction("priority must be in 1..99")


@dataclass(frozen=True)
class RuntimeState:
    mask: tuple[int, ...]
    dvfs_index: tuple[int, ...]
    freqs: tuple[float, ...]
    utilization: tuple[float, ...]
    temperatures: tuple[float, ...]
    trend: tuple[float, ...]
    counters: tuple[float, ...] = ()

    def __post_init__(self):
        if any(not 0.0 <= u <= 1.0 for u in self.utilization):
            raise InvalidArgument("utilization must lie in [0, 1]")
        if len(self.mask) != len(self.dvfs_index):
            raise InvalidArgument("mask and DVFS vectors differ in length")

    @classmethod
    def from_action(
        cls,
        sheet: DeviceSheet,
        action: Action,
        utilization: Sequence[float],
        temperatures: Sequence[float],
        trend: Sequence[float] | None = None,
        counters: Sequence[float] = (),
    ) -> "RuntimeState":
        C = sheet.core_count
        idx = tuple(min(action.dvfs[i], len(sheet.table(i)) - 1) for i in range(C))
        return cls(
            mask=action.mask,
            dvfs_index=idx,
            freqs=tuple(sheet.table(i)[idx[i]] for i in range(C)),
            utilization=tuple(float(u) for u in utilization),
            temperatures=tuple(float(t) for t in temperatures),
            trend=tuple(float(t) for t in (trend if trend is not None else [0.0] * len(temperatures))),
            counters=tuple(counters),
        )


# --------------------------------------------------------------------------
# classical DAG metrics


@dataclass(frozen=True)
class DagMetrics:
    span: float
    work: float
    avg_parallelism: float
    diameter: int
    density: float
    widths: tuple[int, ...]
    max_width: int
    depth: Mapping[str, int]
    height: Mapping[str, int]
    top_level: Mapping[str, float]
    bottom_level: Mapping[str, float]
    critical_path: tuple[str, ...]

    @property
    def critical_edges(self) -> frozenset[tuple[str, str]]:
        p = self.critical_path
        return frozenset(zip(p, p[1:]))

    @property
    def span_hops(self) -> int:
        return len(self.widths) - 1


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-12, abs_tol=0.0)


def dag_metrics(dag: TaskDag) -> DagMetrics:
    if not dag.nodes:
        raise EmptyGraph("dag has no tasks")
    order = dag.topological_order()
    succ, pred = dag.successors(), dag.predecessors()
    w = {n.id: n.weight for n in dag.nodes}

    depth: dict[str, int] = {}
    top: dict[str, float] = {}
    for v in order:
        depth[v] = max((depth[u] + 1 for u in pred[v]), default=0)
        top[v] = w[v] + max((top[u] for u in pred[v]), default=0.0)
    height: dict[str, int] = {}
    bottom: dict[str, float] = {}
    for v in reversed(order):
        height[v] = max((height[s] + 1 for s in succ[v]), default=0)
        bottom[v] = w[v] + max((bottom[s] for s in succ[v]), default=0.0)

    span = max(bottom.values())
    work = math.fsum(w.values())

    # lexicographically smallest heaviest path, built sink-first
    best: dict[str, tuple[str, ...]] = {}
    for v in reversed(order):
        cands = [best[s] for s in succ[v] if _close(bottom[s], bottom[v] - w[v])]
        best[v] = (v,) + (min(cands) if cands else ())
    critical = min(best[v] for v in order if _close(bottom[v], span))

    diameter = 0
    for s in order:
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for x in succ[u]:
                if x not in dist:
                    dist[x] = dist[u] + 1
                    queue.append(x)
        diameter = max(diameter, max(dist.values()))

    n = len(order)
    density = len(dag.edges) / (n * (n - 1)) if n > 1 else 0.0
    levels = max(depth.values()) + 1
    widths = [0] * levels
    for d in depth.values():
        widths[d] += 1

    return DagMetrics(
        span=span,
        work=work,
        avg_parallelism=work / span,
        diameter=diameter,
        density=density,
        widths=tuple(widths),
        max_width=max(widths),
        depth=depth,
        height=height,
        top_level=top,
        bottom_level=bottom,
        critical_path=critical,
    )


@dataclass(frozen=True)
class BrentBound:
    upper: float
    lower: float


def brent_bound(dag: TaskDag, P: int) -> BrentBound:
    """Greedy-schedule makespan bound ``T1/P + Tinf`` and the trivial lower bound."""
    if P < 1:
        raise InvalidArgument(f"processor count must be >= 1, got {P}")
    m = dag_metrics(dag)
    return BrentBound(upper=m.work / P + m.span, lower=max(m.span, m.work / P))


# --------------------------------------------------------------------------
# chain merging


def _merge_specs(new_id: str, specs: Sequence[TaskSpec]) -> TaskSpec:
    weight = math.fsum(s.weight for s in specs)
    cfg = np.array([s.cfg_features for s in specs], dtype=float)
    merged_cfg = list(cfg.sum(axis=0))
    if cfg.shape[1] == len(CFG_FEATURES):
        merged_cfg[1] = cfg[:, 1].max()
        arith, mem = merged_cfg[4], merged_cfg[5]
        merged_cfg[6] = arith / mem if mem > 0 else arith
        wts = np.array([s.weight for s in specs])
        merged_cfg[9] = float(np.dot(cfg[:, 9], wts) / wts.sum())
        merged_cfg[10] = float(cfg[:, 10].max())
        merged_cfg[11] = float(cfg[:, 11].max())
    st = np.array([s.static for s in specs], dtype=float)
    static = (st[:, 0].sum(), st[:, 1].sum(), st[:, 2].max(), st[:, 3].sum())
    dy = np.array([s.dynamic for s in specs], dtype=float)
    wts = np.array([s.weight for s in specs])
    dynamic = (
        dy[:, 0].max(),
        dy[:, 1].sum(),
        dy[0, 2],
        dy[-1, 3],
        float(np.dot(dy[:, 4], wts) / wts.sum()),
        dy[:, 5].max(),
        dy[:, 6].sum(),
    )
    return TaskSpec(
        new_id,
        weight,
        tuple(float(x) for x in merged_cfg),
        tuple(float(x) for x in static),
        tuple(float(x) for x in dynamic),
    )


def merge_small_chains(dag: TaskDag, weight_threshold: float) -> tuple[TaskDag, dict[str, tuple[str, ...]]]:
    """Collapse maximal chains of tasks lighter than ``weight_threshold``.

    A chain link u->v requires u to have a single successor and v a single
    predecessor. Returns the merged DAG and a map merged-id -> original ids.
    """
    if weight_threshold < 0:
        raise InvalidArgument("threshold must be >= 0")
    order = dag.topological_order()
    succ, pred = dag.successors(), dag.predecessors()
    small = {n.id for n in dag.nodes if n.weight < weight_threshold}
    link = {}
    for u in order:
        if u in small and len(succ[u]) == 1:
            v = succ[u][0]
            if v in small and len(pred[v]) == 1:
                link[u] = v
    linked_to = set(link.values())
    runs = []
    for u in order:
        if u in link and u not in linked_to:
            run = [u]
            while run[-1] in link:
                run.append(link[run[-1]])
            runs.append(run)
    if not runs:
        return dag, {}

    taken = set(dag.ids)
    rename: dict[str, str] = {}
    provenance: dict[str, tuple[str, ...]] = {}
    k = 0
    for run in runs:
        k += 1
        new_id = f"m{k}"
        while new_id in taken:
            new_id += "_"
        taken.add(new_id)
        provenance[new_id] = tuple(run)
        for v in run:
            rename[v] = new_id

    specs = {n.id: n for n in dag.nodes}
    nodes = []
    emitted = set()
    for n in dag.nodes:
        if n.id not in rename:
            nodes.append(n)
        elif rename[n.id] not in emitted:
            new_id = rename[n.id]
            emitted.add(new_id)
            nodes.append(_merge_specs(new_id, [specs[v] for v in provenance[new_id]]))
    edges = []
    for e in dag.edges:
        s, d = rename.get(e.src, e.src), rename.get(e.dst, e.dst)
        if s != d:
            edges.append(DagEdge(s, d, e.kind, e.volume))
    return TaskDag(tuple(nodes), tuple(edges)), provenance


def replay_provenance(merged: TaskDag, provenance: Mapping[str, Sequence[str]]) -> list[str]:
    """Expand merged ids back to the original task ids (sorted multiset)."""
    out = []
    for n in merged.nodes:
        out.extend(provenance.get(n.id, (n.id,)))
    return sorted(out)


# --------------------------------------------------------------------------
# heterogeneous graph


@dataclass(frozen=True)
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.src.shape[0])


@dataclass(frozen=True)
class HeteroGraph:
    task_ids: tuple[str, ...]
    task_x: np.ndarray
    task_topo: np.ndarray
    res_x: np.ndarray
    res_topo: np.ndarray
    mem_x: np.ndarray
    edges: Mapping[str, EdgeSet]
    device_ctx: np.ndarray
    metadata: Mapping[str, object] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def num_resources(self) -> int:
        return int(self.res_x.shape[0])

    @property
    def num_memory(self) -> int:
        return int(self.mem_x.shape[0])

    def validate(self) -> None:
        sizes = {"T": self.num_tasks, "R": self.num_resources, "M": self.num_memory}
        ends = {"TT": ("T", "T"), "TR": ("T", "R"), "RR": ("R", "R"), "RM": ("R", "M")}
        for r, es in self.edges.items():
            a, b = ends[r]
            if len(es) and (es.src.max() >= sizes[a] or es.dst.max() >= sizes[b] or min(es.src.min(), es.dst.min()) < 0):
                raise InvalidDag(f"{r} edge references a missing node")
        if "source" not in self.metadata:
            raise InvalidDag("graph metadata lacks source")


def _task_vector(spec: TaskSpec, fan_in: int, fan_out: int) -> list[float]:
    cfg = list(spec.cfg_features)
    for i in _CFG_LOG:
        if i < len(cfg):
            cfg[i] = math.log1p(cfg[i])
    st = list(spec.static)
    for i in _STATIC_LOG:
        st[i] = math.log1p(st[i])
    dy = list(spec.dynamic)
    dy[2], dy[3] = float(fan_in), float(fan_out)
    for i in _DYNAMIC_LOG:
        dy[i] = math.log1p(dy[i])
    return [math.log(spec.weight)] + cfg + st + dy


def device_context(sheet: DeviceSheet) -> np.ndarray:
    total_cache = sum(c.capacity for c in sheet.caches)
    ctx = [
        float(sheet.core_count),
        float(len(sheet.clusters)),
        sheet.f_max / 1e9,
        sheet.f_min / 1e9,
        sheet.t_max,
        sheet.t_ambient,
        float(len(sheet.caches)),
        math.log2(total_cache) if total_cache > 0 else 0.0,
        max(cl.bandwidth for cl in sheet.clusters),
    ] + [1.0 if g in sheet.governors else 0.0 for g in GOVERNORS]
    return np.asarray(ctx, dtype=float)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _pack(rows, r: str) -> EdgeSet:
    dim = EDGE_FEATURE_DIMS[r]
    if not rows:
        return EdgeSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, dim)))
    return EdgeSet(
        np.array([x[0] for x in rows], dtype=np.int64),
        np.array([x[1] for x in rows], dtype=np.int64),
        np.array([x[2] for x in rows], dtype=float).reshape(len(rows), dim),
    )


@lru_cache(maxsize=1024)
def _task_block(dag: TaskDag):
    """Task-side arrays; they depend on the DAG alone, so they are cached."""
    m = dag_metrics(dag)
    succ, pred = dag.successors(), dag.predecessors()
    ids = tuple(n.id for n in dag.nodes)
    pos = {v: i for i, v in enumerate(ids)}
    crit = m.critical_edges
    on_crit = set(m.critical_path)
    log_work = math.log(m.work)
    task_x = np.array([_task_vector(n, len(pred[n.id]), len(succ[n.id])) for n in dag.nodes], dtype=float)
    task_topo = np.array(
        [
            [
                m.depth[v],
                m.height[v],
                math.log(m.top_level[v]),
                math.log(m.bottom_level[v]),
                1.0 if v in on_crit else 0.0,
                log_work,
                m.avg_parallelism,
            ]
            for v in ids
        ],
        dtype=float,
    ).reshape(len(ids), TASK_TOPO_DIM)
    tt = [
        (
            pos[e.src],
            pos[e.dst],
            [
                *(1.0 if e.kind == k else 0.0 for k in DEP_KINDS),
                1.0 if (e.src, e.dst) in crit else 0.0,
                float(m.depth[e.src] + 1),
                math.log1p(e.volume),
                0.0,  # queue-delay estimate, no defining model
            ],
        )
        for e in dag.edges
    ]
    tt_set = _pack(tt, "TT")
    for arr in (task_x, task_topo, tt_set.src, tt_set.dst, tt_set.features):
        _readonly(arr)
    if len(dag.nodes[0].cfg_features) == len(CFG_FEATURES):
        mem_frac = float(np.mean([n.cfg_features[5] / max(1.0, n.cfg_features[4] + n.cfg_features[5]) for n in dag.nodes]))
    else:
        mem_frac = 0.0
    return ids, task_x, task_topo, tt_set, mem_frac


def build_hetero_graph(
    dag: TaskDag,
    sheet: DeviceSheet,
    state: RuntimeState,
    action: Action,
    metadata: Mapping[str, object] | None = None,
) -> HeteroGraph:
    """Assemble the typed graph for one (DAG, device, state, action) tuple.

    Task->core edges go to every active core so attention can learn placement.
    Cores in the same cluster are linked; every core links to every cache level.
    """
    check_action(action, sheet)
    C = sheet.core_count
    if len(state.temperatures) != C or len(state.utilization) != C:
        raise InvalidArgument("runtime state must carry one temperature/utilization per core")
    ids, task_x, task_topo, tt_set, mem_frac = _task_block(dag)

    f_max = sheet.f_max
    active = action.active
    res_rows, res_topo = [], []
    for i in range(C):
        k = sheet.cluster_of(i)
        cl = sheet.clusters[k]
        idx = min(action.dvfs[i], len(cl.frequencies) - 1)
        f = cl.frequencies[idx]
        onehot = [0.0] * MAX_DVFS_LEVELS
        onehot[idx] = 1.0
        res_rows.append(
            onehot
            + [
                float(idx),
                f / 1e9,
                f / f_max,
                float(action.mask[i]),
                state.utilization[i],
                sheet.t_max - state.temperatures[i],
                state.trend[i] if i < len(state.trend) else 0.0,
                cl.bandwidth,
                cl.power(f),
            ]
        )
        res_topo.append([float(k), cl.frequencies[-1] / f_max, float(len(cl.cores))])
    res_x = np.asarray(res_rows, dtype=float)

    mem_x = np.array(
        [
            [c.level, math.log2(c.capacity), c.associativity, c.line_bytes, c.latency, c.bandwidth, 1.0 if c.shared else 0.0]
            for c in sheet.caches
        ],
        dtype=float,
    ).reshape(len(sheet.caches), MEM_FEATURE_DIM)

    tr = []
    for t, n in enumerate(dag.nodes):
        for i in active:
            cl = sheet.clusters[sheet.cluster_of(i)]
            f = cl.frequencies[action.dvfs[i]]
            tr.append((t, i, [f / f_max, math.log1p(n.static[1]) / cl.bandwidth]))
    rr = []
    for cl in sheet.clusters:
        for a_ in range(len(cl.cores)):
            for b_ in range(a_ + 1, len(cl.cores)):
                rr.append((cl.cores[a_], cl.cores[b_], [float(len(cl.cores)), 1.0]))
    rr.sort(key=lambda r: (r[0], r[1]))
    n_active = len(active)
    rm = []
    for i in range(C):
        for j, c in enumerate(sheet.caches):
            share = n_active if c.shared else 1
            rm.append((i, j, [mem_frac * action.mask[i], c.bandwidth / share]))

    meta = {"source": "synthetic", "device_id": sheet.device_id, "device_hash": sheet.version_hash}
    if metadata:
        meta.update(metadata)
    graph = HeteroGraph(
        task_ids=ids,
        task_x=task_x,
        task_topo=task_topo,
        res_x=res_x,
        res_topo=np.asarray(res_topo, dtype=float),
        mem_x=mem_x,
        edges={"TT": tt_set, "TR": _pack(tr, "TR"), "RR": _pack(rr, "RR"), "RM": _pack(rm, "RM")},
        device_ctx=device_context(sheet),
        metadata=meta,
    )
    graph.validate()
    return graph


# --------------------------------------------------------------------------
# text serialization

_FORMAT_TAG = "#hetgraph v1"


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def dumps_graph(g: HeteroGraph) -> str:
    """One record per node/edge with a type tag, plus a JSON metadata line."""
    lines = [_FORMAT_TAG, "#meta " + json.dumps(dict(g.metadata), sort_keys=True), "CTX " + _fmt(g.device_ctx)]
    for i, tid in enumerate(g.task_ids):
        lines.append(f"T {json.dumps(tid)} {_fmt(g.task_x[i])} | {_fmt(g.task_topo[i])}")
    for i in range(g.num_resources):
        lines.append(f"R {i} {_fmt(g.res_x[i])} | {_fmt(g.res_topo[i])}")
    for i in range(g.num_memory):
        lines.append(f"M {i} {_fmt(g.mem_x[i])}")
    for r in EDGE_TYPES:
        es = g.edges[r]
        for k in range(len(es)):
            lines.append(f"E {r} {int(es.src[k])} {int(es.dst[k])} {_fmt(es.features[k])}")
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> HeteroGraph:
    lines = text.splitlines()
    if not lines or lines[0] != _FORMAT_TAG:
        raise ParseError("not a hetgraph v1 document")
    meta: dict = {}
    ctx = np.zeros(0)
    tids, tx, ttopo, rx, rtopo, mx = [], [], [], [], [], []
    edges: dict[str, list] = {r: [] for r in EDGE_TYPES}

    def nums(s: str) -> list[float]:
        return [float(x) for x in s.split()]

    for ln, line in enumerate(lines[1:], start=2):
        try:
            if line.startswith("#meta "):
                meta = json.loads(line[6:])
            elif line.startswith("CTX"):
                ctx = np.array(nums(line[3:]))
            elif line.startswith("T "):
                dec = json.JSONDecoder()
                tid, end = dec.raw_decode(line, 2)
                left, right = line[end:].split("|")
                tids.append(tid)
                tx.append(nums(left))
                ttopo.append(nums(right))
            elif line.startswith("R "):
                left, right = line[2:].split("|")
                rx.append(nums(left)[1:])
                rtopo.append(nums(right))
            elif line.startswith("M "):
                mx.append(nums(line[2:])[1:])
            elif line.startswith("E "):
                parts = line.split()
                edges[parts[1]].append((int(parts[2]), int(parts[3]), [float(x) for x in parts[4:]]))
            elif line.strip():
                raise ValueError(f"unknown record {line[:10]!r}")
        except (ValueError, KeyError) as exc:
            raise ParseError(str(exc), ln) from exc

    def arr(rows, dim):
        return np.asarray(rows, dtype=float).reshape(len(rows), dim)

    es = {}
    for r in EDGE_TYPES:
        rows = edges[r]
        es[r] = EdgeSet(
            np.array([x[0] for x in rows], dtype=np.int64),
            np.array([x[1] for x in rows], dtype=np.int64),
            arr([x[2] for x in rows], EDGE_FEATURE_DIMS[r]),
        )
    g = HeteroGraph(
        task_ids=tuple(tids),
        task_x=arr(tx, TASK_FEATURE_DIM),
        task_topo=arr(ttopo, TASK_TOPO_DIM),
        res_x=arr(rx, RES_FEATURE_DIM),
        res_topo=arr(rtopo, RES_TOPO_DIM),
        mem_x=arr(mx, MEM_FEATURE_DIM),
        edges=es,
        device_ctx=ctx,
        metadata=meta,
    )
    g.validate()
    return g
