"""End-to-end steps shared by the command line and the acceptance suite."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import SplitSpec, TelemetryRow, preprocess
from .errors import ConfigError
from .evidential import LossConfig, NigParams, prediction_interval, scaled_report
from .hetgraph import DeviceSheet
from .metrics import MetricReport, bootstrap_pareto_auc, calibration_metrics, pareto_front, ranking_metrics, regression_metrics
from .scheduler import DynaConfig, GateConfig, RewardConfig, baseline_targets, dyna_q_run, epistemic_threshold
from .seeding import substream
from .simenv import BENCHMARKS, EnvConfig, SimEnv, default_grid, default_sheet, make_workload, sweep_generate
from .surrogate import TARGETS, HeteroGAT, ModelConfig
from .training import (
    CalibrationParams,
    SampleSet,
    TARGET_FIELDS,
    StageResult,
    TargetScaler,
    TrainConfig,
    calibrate,
    make_samples,
    train_stage1,
    train_stage2,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    out: str = "out"
    sheet: str = "builtin:desk4"
    benchmarks: tuple[str, ...] = BENCHMARKS
    data_path: str | None = None
    checkpoint: str | None = None
    calibration: str | None = None
    mad_k: float = 3.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    bins: int = 10
    env: EnvConfig = EnvConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    gate: GateConfig = GateConfig()
    eta_quantile: float = 0.95
    dyna: DynaConfig = DynaConfig()
    reward_weights: tuple[float, float, float] = (1.0, 0.5, 0.1)
    episodes: int = 200
    workload: str = "sort"
    input_size: int = 3

    def canonical(self) -> dict:
        raw = asdict(self)
        raw.pop("out")
        return raw

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# config file: INI sections, one key per line


_SECTIONS = {
    "env": EnvConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "gate": GateConfig,
    "dyna": DynaConfig,
}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - set(_SECTIONS) - {"reward_weights"}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if like and isinstance(like[0], (int, float)):
            return tuple(type(like[0])(float(v)) if isinstance(like[0], float) else int(v) for v in items)
        return tuple(items)
    if value.strip().lower() in ("none", ""):
        return None
    return value.strip()


def _typed(cls, key: str, value: str, default):
    hints = {f.name: f.type for f in fields(cls)}
    kind = str(hints.get(key, ""))
    if default is None or "None" in kind:
        if value.strip().lower() in ("none", ""):
            return None
        if "float" in kind:
            return float(value)
        if "int" in kind:
            return int(value)
        return value.strip()
    return _coerce(value, default)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    base = RunConfig()
    run_kw: dict = {}
    if parser.has_section("run"):
        for key, value in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"{source}: unknown key run.{key}")
            run_kw[key] = _typed(RunConfig, key, value, getattr(base, key))
    sub_kw: dict = {}
    for section, cls in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        current = getattr(base, section)
        kw = {}
        known = {f.name for f in fields(cls)}
        for key, value in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            try:
                kw[key] = _typed(cls, key, value, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {value!r}") from exc
        try:
            sub_kw[section] = replace(current, **kw)
        except Exception as exc:
            raise ConfigError(f"{source}: invalid [{section}] section: {exc}") from exc
    if parser.has_section("reward"):
        w = dict(zip(("w_time", "w_energy", "w_thermal"), base.reward_weights))
        for key, value in parser.items("reward"):
            if key not in w:
                raise ConfigError(f"{source}: unknown key reward.{key}")
            w[key] = float(value)
        run_kw["reward_weights"] = (w["w_time"], w["w_energy"], w["w_thermal"])
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run", "reward"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    try:
        return replace(base, **run_kw, **sub_kw)
    except Exception as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def load_sheet(spec: str) -> DeviceSheet:
    if spec == "builtin:desk4":
        return default_sheet()
    p = Path(spec)
    if not p.is_file():
        raise ConfigError(f"run.sheet: device sheet not found: {spec}")
    return DeviceSheet.from_dict(json.loads(p.read_text()))


# --------------------------------------------------------------------------
# steps


def generate_rows(cfg: RunConfig, sheet: DeviceSheet | None = None) -> list[TelemetryRow]:
    sheet = sheet or load_sheet(cfg.sheet)
    return sweep_generate(cfg.benchmarks, sheet, default_grid(sheet), substream(cfg.seed, "data") % (2**31), cfg.env)


@dataclass
class Prepared:
    scaler: TargetScaler
    rows: tuple[list[TelemetryRow], list[TelemetryRow], list[TelemetryRow]]
    samples: tuple[SampleSet, SampleSet, SampleSet]


def prepare(rows: Sequence[TelemetryRow], cfg: RunConfig, sheet: DeviceSheet) -> Prepared:
    train, val, test, _ = preprocess(rows, SplitSpec(cfg.split, cfg.seed), cfg.mad_k)
    scaler = TargetScaler.fit(train)
    samples = tuple(make_samples(part, sheet, scaler) for part in (train, val, test))
    return Prepared(scaler, (train, val, test), samples)  # type: ignore[arg-type]


def fit_surrogate(cfg: RunConfig, prep: Prepared, stages: str = "12") -> tuple[HeteroGAT, list[StageResult]]:
    model = HeteroGAT(cfg.model, seed=substream(cfg.seed, "init") % (2**31))
    model.fit_scaler(prep.samples[0].graphs)
    tcfg = replace(cfg.train, seed=cfg.seed)
    results = []
    if "1" in stages:
        results.append(train_stage1(model, prep.samples[0], prep.samples[1], tcfg))
    if "2" in stages:
        ref = results[0].val_mae if results else None
        results.append(train_stage2(model, prep.samples[0], prep.samples[1], tcfg, cfg.loss, stage1_val_mae=ref))
    return model, results


def _column(p: NigParams, k: int) -> NigParams:
    return NigParams(*(np.asarray(v)[:, k] for v in (p.gamma, p.nu, p.alpha, p.beta)))


def evaluate(
    model: HeteroGAT,
    scaler: TargetScaler,
    calibration: CalibrationParams,
    rows: Sequence[TelemetryRow],
    samples: SampleSet,
    bins: int = 10,
    seed: int = 0,
    provenance: Mapping[str, object] | None = None,
) -> MetricReport:
    """Point and ranking scores in original units; calibration in model space.

    Interval hits do not depend on the monotone target transform, so
    coverage measured in model space equals coverage in original units.
    """
    p = model.predict(samples.graphs)
    pred = scaler.to_original(p.gamma, samples.devices)
    truth = np.stack([np.array([float(getattr(r, f)) for r in rows]) for f in TARGET_FIELDS], axis=1)
    report = MetricReport(provenance=dict(provenance or {}))
    for k, name in enumerate(TARGETS):
        report.regression[name] = regression_metrics(truth[:, k], pred[:, k])
        report.ranking[name] = ranking_metrics(truth[:, k], pred[:, k])
        pk = _column(p, k)
        tau = calibration.temperatures[k]
        unc = scaled_report(pk, tau).total
        report.calibration[name] = {}
        for level in (0.90, 0.95):
            lo, hi = prediction_interval(pk, level, tau)
            report.calibration[name][f"{round(level * 100)}"] = calibration_metrics(samples.y[:, k], lo, hi, unc, level, bins)
    points = np.stack([truth[:, 0], truth[:, 1]], axis=1)
    report.pareto_front = [tuple(map(float, pt)) for pt in pareto_front(points)]
    report.pareto_auc = bootstrap_pareto_auc(points, 1000, substream(seed, "bootstrap") % (2**31))
    return report


def reward_config(cfg: RunConfig, sheet: DeviceSheet, workloads) -> RewardConfig:
    m, e = baseline_targets(workloads, sheet)
    w_t, w_e, w_th = cfg.reward_weights
    cap = cfg.gate.thermal_cap if cfg.gate.thermal_cap is not None else sheet.t_max
    return RewardConfig(m, e, w_t, w_e, w_th, cap)


def resolve_gate(cfg: RunConfig, model: HeteroGAT, calibration: CalibrationParams, reference: SampleSet) -> GateConfig:
    """Fill an unset eta from the epistemic spread on ``reference`` (the validation split)."""
    if cfg.gate.eta is not None:
        return cfg.gate
    if not 0.0 < cfg.eta_quantile <= 1.0:
        raise ConfigError(f"run.eta_quantile must lie in (0, 1], got {cfg.eta_quantile}")
    return replace(cfg.gate, eta=epistemic_threshold(model, calibration, reference.graphs, cfg.eta_quantile))


def schedule_workloads(cfg: RunConfig):
    return [make_workload(cfg.workload, cfg.input_size, "tasks")]


def run_schedule(
    cfg: RunConfig,
    model: HeteroGAT,
    scaler: TargetScaler,
    calibration: CalibrationParams,
    gate: GateConfig,
    sheet: DeviceSheet | None = None,
    stop_time: float | None = None,
):
    sheet = sheet or load_sheet(cfg.sheet)
    workloads = schedule_workloads(cfg)
    env = SimEnv(sheet, cfg.env, seed=substream(cfg.seed, "env") % (2**31))
    return dyna_q_run(env, model, calibration, scaler, workloads, gate, cfg.dyna, reward_config(cfg, sheet, workloads), cfg.episodes, cfg.seed, stop_time)
