"""Telemetry rows, CSV I/O and the preprocessing pipeline.

Pipeline order: drop duplicate configurations, MAD-filter elapsed time
within each stratum, stratified 60/20/20 split, then per-device z-score
statistics fitted on the training split.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyDataset, InvalidArgument, ParseError, SchemaMismatch

RUN_MODES = ("serial", "tasks", "tied")
SOURCES = ("real", "synthetic")
COUNTERS = (
    "cycles",
    "instructions",
    "cache_refs",
    "cache_misses",
    "branches",
    "branch_misses",
    "task_clock",
    "cpu_clock",
    "page_faults",
)


@dataclass(frozen=True)
class TelemetryRow:
    timestamp: float
    iteration: int
    benchmark: str
    run_mode: str
    input_size: int
    dvfs_indices: tuple[int, ...]
    measured_freqs: tuple[float, ...]
    num_active_cores: int
    core_mask: str
    elapsed_time: float
    energy: float
    power: float
    cycles: float
    instructions: float
    cache_refs: float
    cache_misses: float
    branches: float
    branch_misses: float
    task_clock: float
    cpu_clock: float
    page_faults: float
    utilization: float
    temps_pre: tuple[float, ...]
    temps_post: tuple[float, ...]
    util_pre: tuple[float, ...]
    trend_pre: tuple[float, ...]
    delta_t: tuple[float, ...]
    headroom: float
    source: str
    seed: int
    device_id: str

    def __post_init__(self):
        for name in ("dvfs_indices", "measured_freqs", "temps_pre", "temps_post", "util_pre", "trend_pre", "delta_t"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = self.violations()
        if problems:
            raise InvalidArgument("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not self.elapsed_time > 0:
            out.append(f"elapsed_time must be > 0 (got {self.elapsed_time})")
        if not self.energy >= 0:
            out.append("energy must be >= 0")
        for c in COUNTERS:
            if not getattr(self, c) >= 0:
                out.append(f"{c} must be >= 0")
        if not all(math.isfinite(t) for t in self.temps_pre + self.temps_post):
            out.append("temperatures must be finite")
        if self.source not in SOURCES:
            out.append(f"source must be one of {SOURCES}")
        if self.run_mode not in RUN_MODES:
            out.append(f"run_mode must be one of {RUN_MODES}")
        return out

    @property
    def graph_key(self) -> tuple:
        """Identity of a configuration: (graph id, input, mask, dvfs)."""
        return (self.benchmark, self.run_mode, self.input_size, self.core_mask, self.dvfs_indices)

    @property
    def stratum(self) -> tuple:
        return (self.benchmark, self.input_size, self.core_mask, self.dvfs_indices)


FIELDS = tuple(f.name for f in dataclasses.fields(TelemetryRow))
_TYPES = {f.name: f.type for f in dataclasses.fields(TelemetryRow)}


def _encode(value) -> str:
    if isinstance(value, tuple):
        return ";".join(_encode(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(name: str, raw: str):
    kind = _TYPES[name]
    if kind == "str":
        return raw
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    item = int if "int" in kind else float
    return tuple(item(x) for x in raw.split(";")) if raw else ()


def write_csv(path: str | Path, rows: Iterable[TelemetryRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for row in rows:
            writer.writerow([_encode(getattr(row, f)) for f in FIELDS])


def read_csv(path: str | Path) -> list[TelemetryRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FIELDS:
            missing = sorted(set(FIELDS) - set(header or ()))
            extra = sorted(set(header or ()) - set(FIELDS))
            raise SchemaMismatch(f"telemetry header mismatch; missing={missing} extra={extra}")
        rows = []
        for i, rec in enumerate(reader):
            if len(rec) != len(FIELDS):
                raise ParseError(f"expected {len(FIELDS)} fields, got {len(rec)}", i)
            try:
                values = {f: _decode(f, raw) for f, raw in zip(FIELDS, rec)}
            except ValueError as exc:
                raise ParseError(str(exc), i) from exc
            try:
                rows.append(TelemetryRow(**values))
            except InvalidArgument as exc:
                raise ParseError(str(exc), i) from exc
    return rows


# --------------------------------------------------------------------------
# normalization

NORM_FEATURES = (
    "input_size",
    "num_active_cores",
    "elapsed_time",
    "energy",
    "power",
    *COUNTERS,
    "utilization",
    "headroom",
)

GLOBAL_KEY = "__all__"


@dataclass
class NormStats:
    """Per-device feature means/stds plus an all-device set under ``GLOBAL_KEY``."""

    stats: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)

    def get(self, device_id: str, feature: str) -> tuple[float, float]:
        table = self.stats.get(device_id, self.stats[GLOBAL_KEY])
        return table[feature]

    def to_json(self) -> str:
        return json.dumps({d: {k: list(v) for k, v in t.items()} for d, t in self.stats.items()}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        raw = json.loads(text)
        return cls({d: {k: (float(v[0]), float(v[1])) for k, v in t.items()} for d, t in raw.items()})


def fit_norm_stats(values: Mapping[str, np.ndarray], devices: Sequence[str]) -> NormStats:
    devices = np.asarray(devices)
    out: dict[str, dict[str, tuple[float, float]]] = {}
    groups = {GLOBAL_KEY: np.ones(len(devices), dtype=bool)}
    for d in sorted(set(devices.tolist())):
        groups[d] = devices == d
    for key, sel in groups.items():
        out[key] = {}
        for name, col in values.items():
            col = np.asarray(col, dtype=float)[sel]
            out[key][name] = (float(col.mean()), float(col.std()))
    return NormStats(out)


def zscore(values: Mapping[str, np.ndarray], devices: Sequence[str], stats: NormStats) -> dict[str, np.ndarray]:
    """Per-device z-score; zero-variance features map to 0."""
    out = {}
    for name, col in values.items():
        col = np.asarray(col, dtype=float)
        res = np.empty_like(col)
        for i, d in enumerate(devices):
            mean, std = stats.get(d, name)
            res[i] = (col[i] - mean) / std if std > 0 else 0.0
        out[name] = res
    return out


def row_features(rows: Sequence[TelemetryRow]) -> dict[str, np.ndarray]:
    return {f: np.array([float(getattr(r, f)) for r in rows]) for f in NORM_FEATURES}


def normalize_rows(rows: Sequence[TelemetryRow], stats: NormStats) -> dict[str, np.ndarray]:
    return zscore(row_features(rows), [r.device_id for r in rows], stats)


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 42

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-12 or min(self.fractions) < 0:
            raise InvalidArgument("split fractions must be three non-negative numbers summing to 1")


def dedup(rows: Sequence[TelemetryRow]) -> list[TelemetryRow]:
    """Keep the earliest-timestamp row per configuration key; input order preserved."""
    order = sorted(range(len(rows)), key=lambda i: (rows[i].timestamp, i))
    keep = {}
    for i in order:
        keep.setdefault(rows[i].graph_key, i)
    chosen = set(keep.values())
    return [r for i, r in enumerate(rows) if i in chosen]


def mad_filter(rows: Sequence[TelemetryRow], mad_k: float) -> list[TelemetryRow]:
    """Drop rows whose elapsed time deviates from the stratum median by more than mad_k * MAD."""
    if not mad_k > 0:
        raise InvalidArgument("mad_k must be > 0")
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(rows):
        groups.setdefault(r.stratum, []).append(i)
    drop = set()
    for idx in groups.values():
        t = np.array([rows[i].elapsed_time for i in idx])
        med = np.median(t)
        resid = np.abs(t - med)
        mad = np.median(resid)
        for i, r in zip(idx, resid):
            if r > mad_k * mad:
                drop.add(i)
    return [r for i, r in enumerate(rows) if i not in drop]


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * p for p in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    return counts


def stratified_split(rows: Sequence[TelemetryRow], spec: SplitSpec) -> tuple[list, list, list]:
    """Split each stratum 60/20/20 after a seeded shuffle.

    Whole-row quotas within a stratum come from flooring; the leftover rows of
    small strata are handed to whichever split is furthest below its global
    largest-remainder target, so tiny strata still fill every split.
    """
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(rows):
        groups.setdefault(r.stratum, []).append(i)
    keys = sorted(groups)
    target = _largest_remainder(len(rows), spec.fractions)
    alloc: dict[tuple, list[int]] = {}
    assigned = [0, 0, 0]
    for k in keys:
        n = len(groups[k])
        alloc[k] = [math.floor(n * p) for p in spec.fractions]
        assigned = [a + c for a, c in zip(assigned, alloc[k])]
    rng = random.Random(spec.seed)
    visit = keys[:]
    rng.shuffle(visit)
    for k in visit:
        n = len(groups[k])
        left = n - sum(alloc[k])
        rema = [n * p - c for p, c in zip(spec.fractions, alloc[k])]
        for _ in range(left):
            cands = [j for j in range(3) if rema[j] > 0]
            j = max(cands, key=lambda j: (target[j] - assigned[j], rema[j], -j))
            alloc[k][j] += 1
            assigned[j] += 1
            rema[j] = 0.0
    out: tuple[list, list, list] = ([], [], [])
    for k in keys:
        idx = groups[k][:]
        random.Random(f"{spec.seed}|{k!r}").shuffle(idx)
        c0, c1, _ = alloc[k]
        for part, sl in zip(out, (idx[:c0], idx[c0 : c0 + c1], idx[c0 + c1 :])):
            part.extend(sorted(sl))
    return tuple([rows[i] for i in part] for part in out)  # type: ignore[return-value]


def preprocess(
    rows: Sequence[TelemetryRow], spec: SplitSpec = SplitSpec(), mad_k: float = 3.0
) -> tuple[list[TelemetryRow], list[TelemetryRow], list[TelemetryRow], NormStats]:
    if not rows:
        raise EmptyDataset("no telemetry rows")
    kept = mad_filter(dedup(rows), mad_k)
    if not kept:
        raise EmptyDataset("every row was filtered out")
    train, val, test = stratified_split(kept, spec)
    if not train:
        raise EmptyDataset("training split is empty")
    stats = fit_norm_stats(row_features(train), [r.device_id for r in train])
    return train, val, test, stats
