"""Uncertainty-gated action scoring and tabular Dyna-Q over the simulated device.

Every real step scores all feasible actions with the surrogate, keeps those
whose makespan is both confidently predicted and safely under the deadline,
and picks among the survivors epsilon-greedily on the Q table. After each
real step the planner draws a fixed number of synthetic actions for the same
state; a draw enters the synthetic buffer only if it passes the same gate
(plus optional interval-width limits), and its predicted reward updates Q.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import HetperfError, InvalidArgument, NoSafeAction
from .evidential import NigParams, prediction_interval, scaled_report
from .hetgraph import Action, DeviceSheet, HeteroGraph
from .seeding import numpy_rng
from .simenv import SimEnv, SimEnvState, SyntheticWorkload, enumerate_actions, expected_time, fallback_action, graph_for_state
from .surrogate import TARGETS, HeteroGAT, collate
from .training import CalibrationParams, TargetScaler

TIME, ENERGY = 0, 1
HIGH_EPISTEMIC = "HighEpistemic"
DEADLINE_RISK = "DeadlineRisk"
MODEL_ERROR = "ModelError"


@dataclass(frozen=True)
class GateConfig:
    """Admission thresholds. ``eta`` bounds the makespan epistemic variance in
    the model's standardized log space; ``tmax_time`` is in seconds.

    ``eta=None`` means "not chosen yet": callers resolve it (see
    ``epistemic_threshold``) before gating, and the gate refuses to run without it.
    """

    eta: float | None = None
    level: float = 0.95
    tmax_time: float = math.inf
    thermal_cap: float | None = None
    synth_time_width: float | None = None
    synth_energy_width: float | None = None

    def __post_init__(self):
        if self.eta is not None and not self.eta >= 0:
            raise InvalidArgument("eta must be >= 0")
        if not 0.0 < self.level < 1.0:
            raise InvalidArgument("interval level must be in (0, 1)")


@dataclass(frozen=True)
class CandidateScore:
    action: Action
    mean: tuple[float, ...]  # original units
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    epistemic: tuple[float, ...]  # standardized model space, temperature-scaled
    aleatoric: tuple[float, ...]
    error: str | None = None

    @property
    def time(self) -> float:
        return self.mean[TIME]

    @property
    def energy(self) -> float:
        return self.mean[ENERGY]


def _failed(action: Action, exc: Exception) -> CandidateScore:
    nan = (math.nan,) * len(TARGETS)
    return CandidateScore(action, nan, nan, nan, nan, nan, error=f"{type(exc).__name__}: {exc}")


def _floats(row) -> tuple[float, ...]:
    return tuple(float(v) for v in row)


def _scores_from_params(
    actions: Sequence[Action], p: NigParams, calibration: CalibrationParams, scaler: TargetScaler, device: str, level: float
) -> list[CandidateScore]:
    temps = np.asarray(calibration.temperatures, dtype=float)
    devices = [device] * len(actions)
    lo, hi = prediction_interval(p, level, temps)
    rep = scaled_report(p, temps)
    mean = scaler.to_original(np.asarray(p.gamma), devices)
    lo_o = scaler.to_original(np.asarray(lo), devices)
    hi_o = scaler.to_original(np.asarray(hi), devices)
    epi, ale = np.asarray(rep.epistemic), np.asarray(rep.aleatoric)
    return [
        CandidateScore(a, _floats(mean[i]), _floats(lo_o[i]), _floats(hi_o[i]), _floats(epi[i]), _floats(ale[i]))
        for i, a in enumerate(actions)
    ]


def score_candidates(
    model: HeteroGAT,
    calibration: CalibrationParams,
    scaler: TargetScaler,
    graphs: Sequence[HeteroGraph],
    actions: Sequence[Action],
    device: str,
    level: float = 0.95,
) -> list[CandidateScore]:
    """Batched eval-mode scoring; output order follows ``actions``.

    If the batch fails, candidates are rescored one by one so a single bad
    graph is reported on its own entry instead of sinking the whole set.
    """
    if len(graphs) != len(actions) or not actions:
        raise InvalidArgument("need one graph per candidate and at least one candidate")
    try:
        return _scores_from_params(actions, model.predict(graphs), calibration, scaler, device, level)
    except HetperfError:
        out = []
        for g, a in zip(graphs, actions):
            try:
                out.extend(_scores_from_params([a], model.predict([g]), calibration, scaler, device, level))
            except HetperfError as exc:
                out.append(_failed(a, exc))
        return out


def _require_eta(cfg: GateConfig) -> float:
    if cfg.eta is None:
        raise InvalidArgument("gate eta is unresolved; set it or derive it with epistemic_threshold")
    return cfg.eta


def uncertainty_gate(scores: Sequence[CandidateScore], cfg: GateConfig) -> tuple[list[CandidateScore], list[tuple[Action, tuple[str, ...]]]]:
    _require_eta(cfg)
    kept, rejected = [], []
    for s in scores:
        if s.error is not None:
            rejected.append((s.action, (MODEL_ERROR,)))
            continue
        reasons = []
        if not s.epistemic[TIME] <= cfg.eta:
            reasons.append(HIGH_EPISTEMIC)
        if not s.upper[TIME] <= cfg.tmax_time:
            reasons.append(DEADLINE_RISK)
        if reasons:
            rejected.append((s.action, tuple(reasons)))
        else:
            kept.append(s)
    return kept, rejected


def epistemic_threshold(model: HeteroGAT, calibration: CalibrationParams, graphs: Sequence[HeteroGraph], quantile: float = 0.95) -> float:
    """A data-driven eta: the given quantile of scaled makespan epistemic variance over ``graphs``."""
    if not graphs:
        raise InvalidArgument("epistemic_threshold needs at least one graph")
    if not 0.0 < quantile <= 1.0:
        raise InvalidArgument(f"quantile must lie in (0, 1], got {quantile}")
    p = model.predict(graphs)
    p_time = NigParams(*(np.asarray(v)[:, TIME] for v in (p.gamma, p.nu, p.alpha, p.beta)))
    epi = scaled_report(p_time, calibration.temperatures[TIME]).epistemic
    return float(np.quantile(epi, quantile))


def synthetic_admissible(s: CandidateScore, cfg: GateConfig) -> bool:
    """The real-step gate plus the optional interval-width limits for synthetic samples."""
    _require_eta(cfg)
    if s.error is not None or not (s.epistemic[TIME] <= cfg.eta and s.upper[TIME] <= cfg.tmax_time):
        return False
    if cfg.synth_time_width is not None and not s.upper[TIME] - s.lower[TIME] <= cfg.synth_time_width:
        return False
    if cfg.synth_energy_width is not None and not s.upper[ENERGY] - s.lower[ENERGY] <= cfg.synth_energy_width:
        return False
    return True


def select_action(kept: Sequence[CandidateScore]) -> Action:
    """Lowest predicted makespan; then lower energy; then the smaller (mask, dvfs)."""
    if not kept:
        raise NoSafeAction("no candidate passed the gate")
    return min(kept, key=lambda s: (s.time, s.energy, s.action.key)).action


# --------------------------------------------------------------------------
# Dyna-Q


@dataclass(frozen=True)
class RewardConfig:
    m_target: Mapping[str, float]
    e_target: Mapping[str, float]
    w_time: float = 1.0
    w_energy: float = 0.5
    w_thermal: float = 0.1
    thermal_cap: float = 50.0

    def __post_init__(self):
        if any(not v > 0 for v in list(self.m_target.values()) + list(self.e_target.values())):
            raise InvalidArgument("reference makespan and energy must be > 0")

    def reward(self, benchmark: str, time: float, energy: float, t_post: float | None = None) -> float:
        r = -(self.w_time * time / self.m_target[benchmark] + self.w_energy * energy / self.e_target[benchmark])
        if t_post is not None:
            r -= self.w_thermal * max(0.0, t_post - self.thermal_cap)
        return r


def baseline_targets(workloads: Sequence[SyntheticWorkload], sheet: DeviceSheet) -> tuple[dict[str, float], dict[str, float]]:
    """Reference makespan/energy: every core at its middle DVFS level, noise-free."""
    C = sheet.core_count
    action = Action((1,) * C, tuple((len(sheet.table(i)) - 1) // 2 for i in range(C)))
    power = sum(sheet.clusters[sheet.cluster_of(i)].power(sheet.table(i)[action.dvfs[i]]) for i in range(C))
    m, e = {}, {}
    for wl in workloads:
        t = expected_time(wl, action, sheet)
        m[wl.name], e[wl.name] = t, power * t
    return m, e


@dataclass(frozen=True)
class DynaConfig:
    zeta: int = 10
    learning_rate: float = 0.5
    discount: float = 0.0
    epsilon: float = 0.1
    steps_per_episode: int = 1
    real_capacity: int = 10000
    synth_capacity: int = 10000
    temp_bucket: float = 5.0

    def __post_init__(self):
        if self.zeta < 0 or self.steps_per_episode < 1:
            raise InvalidArgument("zeta must be >= 0 and episodes need at least one step")
        if not 0.0 <= self.epsilon <= 1.0 or not 0.0 <= self.discount <= 1.0:
            raise InvalidArgument("epsilon and discount must be in [0, 1]")


def state_digest(state: SimEnvState, benchmark: str, bucket: float = 5.0) -> tuple[int, int, str]:
    """(hottest-core temperature bucket, mean-utilization decile, benchmark)."""
    hot = int(math.floor(max(state.temperatures) / bucket))
    util = float(np.mean(state.utilization)) if state.utilization else 0.0
    return hot, min(9, int(math.floor(util * 10))), benchmark


@dataclass(frozen=True)
class Transition:
    state: tuple
    action: tuple
    reward: float
    next_state: tuple
    source: str  # "real" or "synthetic"


class ReplayBuffers:
    """Separate stores for executed and model-generated transitions."""

    def __init__(self, real_capacity: int = 10000, synth_capacity: int = 10000):
        self.real: deque[Transition] = deque(maxlen=real_capacity)
        self.synthetic: deque[Transition] = deque(maxlen=synth_capacity)

    def add(self, t: Transition) -> None:
        if t.source == "real":
            self.real.append(t)
        elif t.source == "synthetic":
            self.synthetic.append(t)
        else:
            raise InvalidArgument(f"unknown transition source {t.source!r}")


@dataclass(frozen=True)
class StepRecord:
    episode: int
    step: int
    action: str
    time: float
    energy: float
    reward: float
    candidates: int
    gated: int  # candidates rejected by the gate
    fallback: bool
    epistemic: float
    pi_upper: float
    synth_drawn: int
    synth_admitted: int


STEP_COLUMNS = (
    "episode", "step", "action", "time", "energy", "reward", "gated", "candidates",
    "fallback", "epistemic", "pi_upper", "synth_drawn", "synth_admitted",
)
EPISODE_COLUMNS = ("episode", "makespan", "energy", "reward", "gated_fraction", "greedy_time")


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    makespan: float
    energy: float
    reward: float
    gated_fraction: float  # mean share of candidates rejected per step
    greedy_time: float  # noise-free makespan of the greedy action at episode end


@dataclass
class DynaTrace:
    steps: list[StepRecord] = field(default_factory=list)
    episodes: list[EpisodeRecord] = field(default_factory=list)
    buffers: ReplayBuffers | None = None

    def episodes_to_reach(self, best_time: float, tol: float = 0.10) -> int | None:
        for ep in self.episodes:
            if ep.greedy_time <= (1.0 + tol) * best_time:
                return ep.episode
        return None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STEP_COLUMNS)
            for s in self.steps:
                w.writerow(
                    [s.episode, s.step, s.action, repr(s.time), repr(s.energy), repr(s.reward), s.gated, s.candidates,
                     int(s.fallback), repr(s.epistemic), repr(s.pi_upper), s.synth_drawn, s.synth_admitted]
                )

    def episodes_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EPISODE_COLUMNS)
            for e in self.episodes:
                w.writerow([e.episode, repr(e.makespan), repr(e.energy), repr(e.reward), repr(e.gated_fraction), repr(e.greedy_time)])


class DynaQ:
    """Tabular agent; Q entries default to 0 for pairs never updated."""

    def __init__(self, cfg: DynaConfig, seed: int):
        self.cfg = cfg
        self.q: dict[tuple, dict[tuple, float]] = {}
        self.explore = numpy_rng(seed, "explore")
        self.synth = numpy_rng(seed, "synth")

    def value(self, s: tuple, a: tuple) -> float:
        return self.q.get(s, {}).get(a, 0.0)

    def best_value(self, s: tuple) -> float:
        row = self.q.get(s)
        return max(row.values()) if row else 0.0

    def update(self, t: Transition) -> None:
        row = self.q.setdefault(t.state, {})
        old = row.get(t.action, 0.0)
        target = t.reward + self.cfg.discount * self.best_value(t.next_state)
        row[t.action] = old + self.cfg.learning_rate * (target - old)

    def choose(self, s: tuple, options: Sequence[Action]) -> Action:
        if self.explore.random() < self.cfg.epsilon:
            return options[int(self.explore.integers(len(options)))]
        vals = [self.value(s, a.key) for a in options]
        top = max(vals)
        ties = [a for a, v in zip(options, vals) if v == top]
        return ties[int(self.explore.integers(len(ties)))]

    def greedy(self, s: tuple, options: Sequence[Action]) -> Action | None:
        """Best action among those with a learned value; None if nothing is known."""
        row = self.q.get(s, {})
        known = [a for a in options if a.key in row]
        if not known:
            return None
        return max(known, key=lambda a: (row[a.key], tuple(-x for x in a.key[0]), tuple(-x for x in a.key[1])))


def _score_state(model, calibration, scaler, sheet, workload, state, cap, level):
    actions = enumerate_actions(sheet, state, cap)
    if not actions:
        return [], []
    graphs = [graph_for_state(workload, sheet, state, a) for a in actions]
    return actions, score_candidates(model, calibration, scaler, graphs, actions, sheet.device_id, level)


def dyna_q_run(
    env: SimEnv,
    model: HeteroGAT,
    calibration: CalibrationParams,
    scaler: TargetScaler,
    workloads: Sequence[SyntheticWorkload],
    gate: GateConfig,
    dyna: DynaConfig,
    reward: RewardConfig,
    episodes: int,
    seed: int,
    stop_time: float | None = None,
) -> DynaTrace:
    """Run ``episodes`` episodes; workloads rotate round-robin by episode.

    With ``stop_time`` set, the run ends after the first episode whose greedy
    action has a noise-free makespan at or below it.
    """
    sheet = env.sheet
    cap = gate.thermal_cap if gate.thermal_cap is not None else sheet.t_max
    _require_eta(gate)
    agent = DynaQ(dyna, seed)
    buffers = ReplayBuffers(dyna.real_capacity, dyna.synth_capacity)
    trace = DynaTrace(buffers=buffers)
    for ep in range(1, episodes + 1):
        wl = workloads[(ep - 1) % len(workloads)]
        times, energies, rewards, fractions = [], [], [], []
        for step in range(dyna.steps_per_episode):
            state = env.state
            s = state_digest(state, wl.name, dyna.temp_bucket)
            actions, scores = _score_state(model, calibration, scaler, sheet, wl, state, cap, gate.level)
            kept, _ = uncertainty_gate(scores, gate)
            fallback = not kept
            if fallback:
                action = fallback_action(sheet)
                chosen = None
            else:
                action = agent.choose(s, [k.action for k in kept])
                chosen = next(k for k in kept if k.action == action)
            row = env.step(wl, action)
            nxt = state_digest(env.state, wl.name, dyna.temp_bucket)
            r = reward.reward(wl.name, row.elapsed_time, row.energy, max(row.temps_post))
            t = Transition(s, action.key, r, nxt, "real")
            buffers.add(t)
            agent.update(t)

            admitted = 0
            for _ in range(dyna.zeta if scores else 0):
                cand = scores[int(agent.synth.integers(len(scores)))]
                if not synthetic_admissible(cand, gate):
                    continue
                st = Transition(s, cand.action.key, reward.reward(wl.name, cand.time, cand.energy), s, "synthetic")
                buffers.add(st)
                agent.update(st)
                admitted += 1

            times.append(row.elapsed_time)
            energies.append(row.energy)
            rewards.append(r)
            fractions.append(1.0 - len(kept) / len(scores) if scores else 1.0)
            trace.steps.append(
                StepRecord(
                    ep,
                    step,
                    action.mask_string + ":" + "".join(str(x) for x in action.dvfs),
                    row.elapsed_time,
                    row.energy,
                    r,
                    len(scores),
                    len(scores) - len(kept),
                    fallback,
                    float(chosen.epistemic[TIME]) if chosen else math.nan,
                    float(chosen.upper[TIME]) if chosen else math.nan,
                    dyna.zeta if scores else 0,
                    admitted,
                )
            )
        env.idle()
        s_end = state_digest(env.state, wl.name, dyna.temp_bucket)
        pick = agent.greedy(s_end, enumerate_actions(sheet, SimEnvState.initial(sheet)))
        greedy_time = expected_time(wl, pick, sheet) if pick is not None else math.inf
        trace.episodes.append(
            EpisodeRecord(ep, float(np.mean(times)), float(np.sum(energies)), float(np.sum(rewards)), float(np.mean(fractions)), greedy_time)
        )
        if stop_time is not None and greedy_time <= stop_time:
            break
    return trace
