"""Brute-force reference computations for small DAGs.

Everything here works by exhaustive enumeration and shares no code with
``hetgraph.dag_metrics``; it exists to cross-check it.
"""

from __future__ import annotations

import itertools
import math
import random

from .hetgraph import DagEdge, TaskDag, TaskSpec


def random_dag(rng: random.Random, max_nodes: int = 7, edge_prob: float = 0.35, min_nodes: int = 1) -> TaskDag:
    n = rng.randint(min_nodes, max_nodes)
    ids = [f"t{i}" for i in range(n)]
    perm = ids[:]
    rng.shuffle(perm)  # hidden topological order, unrelated to id order
    # multiples of 1/8 add without rounding, so path sums are exact in any order
    nodes = [TaskSpec(v, rng.randint(4, 76) / 8) for v in ids]
    edges = []
    for a, b in itertools.combinations(range(n), 2):
        if rng.random() < edge_prob:
            edges.append(DagEdge(perm[a], perm[b], rng.choice(("spawn", "join", "data"))))
    return TaskDag(tuple(nodes), tuple(edges))


def all_paths(dag: TaskDag) -> list[tuple[str, ...]]:
    """Every directed path (including single vertices)."""
    succ: dict[str, list[str]] = {n.id: [] for n in dag.nodes}
    for e in dag.edges:
        succ[e.src].append(e.dst)
    out = []

    def walk(path):
        out.append(tuple(path))
        for w in succ[path[-1]]:
            walk(path + [w])

    for n in dag.nodes:
        walk([n.id])
    return out


def span_by_enumeration(dag: TaskDag) -> float:
    w = {n.id: n.weight for n in dag.nodes}
    return max(sum(w[v] for v in p) for p in all_paths(dag))


def critical_paths_by_enumeration(dag: TaskDag) -> list[tuple[str, ...]]:
    w = {n.id: n.weight for n in dag.nodes}
    paths = all_paths(dag)
    best = max(sum(w[v] for v in p) for p in paths)
    return [p for p in paths if math.isclose(sum(w[v] for v in p), best, rel_tol=1e-12)]


def diameter_by_enumeration(dag: TaskDag) -> int:
    shortest: dict[tuple[str, str], int] = {}
    for p in all_paths(dag):
        key = (p[0], p[-1])
        shortest[key] = min(shortest.get(key, len(p) - 1), len(p) - 1)
    return max(shortest.values())


def widths_by_enumeration(dag: TaskDag) -> list[int]:
    level: dict[str, int] = {n.id: 0 for n in dag.nodes}
    for p in all_paths(dag):
        level[p[-1]] = max(level[p[-1]], len(p) - 1)
    out = [0] * (max(level.values()) + 1)
    for lv in level.values():
        out[lv] += 1
    return out


def density_by_count(dag: TaskDag) -> float:
    n = len(dag.nodes)
    pairs = sum(1 for a in dag.nodes for b in dag.nodes if a.id != b.id)
    return len({(e.src, e.dst) for e in dag.edges}) / pairs if pairs else 0.0


def optimal_makespan(dag: TaskDag, P: int) -> float:
    """Exhaustive search over (task order, processor) decisions.

    Each branch starts the chosen ready task as early as its predecessors
    and its processor allow; every semi-active schedule is reachable this
    way, so the minimum over branches is the optimal non-preemptive makespan.
    """
    w = {n.id: n.weight for n in dag.nodes}
    pred: dict[str, list[str]] = {n.id: [] for n in dag.nodes}
    for e in dag.edges:
        pred[e.dst].append(e.src)
    ids = [n.id for n in dag.nodes]
    best = [math.fsum(w.values())]

    def search(finish: dict[str, float], procs: tuple[float, ...]):
        if len(finish) == len(ids):
            best[0] = min(best[0], max(finish.values()))
            return
        if max(procs) >= best[0]:
            return
        for v in ids:
            if v in finish or any(u not in finish for u in pred[v]):
                continue
            ready = max((finish[u] for u in pred[v]), default=0.0)
            seen = set()
            for p, free in enumerate(procs):
                if free in seen:  # identical processors: one branch per distinct free time
                    continue
                seen.add(free)
                start = max(free, ready)
                finish[v] = start + w[v]
                search(finish, procs[:p] + (finish[v],) + procs[p + 1 :])
                del finish[v]

    search({}, (0.0,) * P)
    return best[0]
