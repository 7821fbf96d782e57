"""Three-stage fitting: point regression, evidential fine-tuning, temperature scaling.

Targets are modeled in a standardized space: makespan and energy are
log-transformed, counter totals log1p-transformed, utilization left as is,
and each column is z-scored per device with training-split statistics.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .dataset import GLOBAL_KEY, TelemetryRow
from .errors import EmptyDataset, InvalidArgument, NumericError
from .evidential import LossConfig, NigParams, evidential_loss, nig_nll, prediction_interval, ranking_pairs, scaled_report, student_t_nll
from .hetgraph import DeviceSheet, HeteroGraph
from .metrics import calibration_metrics
from .seeding import torch_generator
from .surrogate import TARGETS, GraphBatch, HeteroGAT, collate

TARGET_FIELDS = ("elapsed_time", "energy", "cache_misses", "branch_misses", "utilization")
TARGET_TRANSFORMS = ("log", "log", "log1p", "log1p", "identity")
SEEDS = (42, 123, 456, 789, 1024)

_FORWARD = {"log": np.log, "log1p": np.log1p, "identity": lambda x: x}
_INVERSE = {"log": np.exp, "log1p": np.expm1, "identity": lambda x: x}


# --------------------------------------------------------------------------
# targets and samples


@dataclass
class TargetScaler:
    """Per-device mean/std of transformed targets; unknown devices use the pooled set."""

    stats: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = field(default_factory=dict)

    @staticmethod
    def raw(rows: Sequence[TelemetryRow]) -> np.ndarray:
        cols = [_FORWARD[t](np.array([float(getattr(r, f)) for r in rows])) for f, t in zip(TARGET_FIELDS, TARGET_TRANSFORMS)]
        return np.stack(cols, axis=1) if rows else np.zeros((0, len(TARGETS)))

    @classmethod
    def fit(cls, rows: Sequence[TelemetryRow]) -> "TargetScaler":
        if not rows:
            raise EmptyDataset("cannot fit target statistics on no rows")
        z = cls.raw(rows)
        devices = np.array([r.device_id for r in rows])
        out = {}
        for key in [GLOBAL_KEY] + sorted(set(devices.tolist())):
            sel = np.ones(len(rows), bool) if key == GLOBAL_KEY else devices == key
            mean = z[sel].mean(axis=0)
            std = z[sel].std(axis=0)
            std = np.where(std > 1e-12, std, 1.0)
            out[key] = (tuple(float(v) for v in mean), tuple(float(v) for v in std))
        return cls(out)

    def _params(self, devices: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        table = [self.stats.get(d, self.stats[GLOBAL_KEY]) for d in devices]
        return np.array([t[0] for t in table]), np.array([t[1] for t in table])

    def transform(self, rows: Sequence[TelemetryRow]) -> np.ndarray:
        mean, std = self._params([r.device_id for r in rows])
        return (self.raw(rows) - mean) / std

    def to_model_space(self, z: np.ndarray, devices: Sequence[str]) -> np.ndarray:
        """Standardized values back to transformed (log) units."""
        mean, std = self._params(devices)
        return np.asarray(z) * std + mean

    def to_original(self, z: np.ndarray, devices: Sequence[str]) -> np.ndarray:
        t = self.to_model_space(z, devices)
        return np.stack([_INVERSE[k](t[:, j]) for j, k in enumerate(TARGET_TRANSFORMS)], axis=1)

    def to_json(self) -> str:
        return json.dumps({k: [list(m), list(s)] for k, (m, s) in self.stats.items()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TargetScaler":
        raw = json.loads(text)
        return cls({k: (tuple(v[0]), tuple(v[1])) for k, v in raw.items()})


@dataclass
class SampleSet:
    graphs: list[HeteroGraph]
    y: np.ndarray  # (N, K) standardized targets
    devices: list[str]
    groups: list[str]  # ranking pairs only form inside a group (benchmark)

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, idx: Sequence[int]) -> "SampleSet":
        return SampleSet([self.graphs[i] for i in idx], self.y[list(idx)], [self.devices[i] for i in idx], [self.groups[i] for i in idx])


def make_samples(rows: Sequence[TelemetryRow], sheet: DeviceSheet, scaler: TargetScaler) -> SampleSet:
    from .simenv import graph_for_row

    graphs = [graph_for_row(r, sheet) for r in rows]
    return SampleSet(graphs, scaler.transform(rows), [r.device_id for r in rows], [r.benchmark for r in rows])


# --------------------------------------------------------------------------
# configuration and logs


@dataclass(frozen=True)
class TrainConfig:
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-4
    batch_size: int = 64
    epochs_stage1: int = 100
    epochs_stage2: int = 50
    clip_norm: float = 1.0
    patience: int = 10
    min_delta: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    mae_guard: float = 0.10
    seed: int = 42

    def __post_init__(self):
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise InvalidArgument("learning rates must be >= 0")
        if self.clip_norm <= 0:
            raise InvalidArgument("clip norm must be > 0")
        if self.batch_size < 1:
            raise InvalidArgument("batch size must be >= 1")


@dataclass
class LogRecord:
    stage: int
    epoch: int
    split: str
    loss: float
    mae: tuple[float, ...]
    grad_norm: float


@dataclass
class StageResult:
    best_epoch: int
    best_score: float
    val_mae: float
    history: list[LogRecord]
    max_clipped_norm: float = 0.0
    guard_ok: bool = True


LOG_FIELDS = ("stage", "epoch", "split", "loss", *(f"mae_{t}" for t in TARGETS), "grad_norm")


def write_training_log(path: str | Path, records: Sequence[LogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow([r.stage, r.epoch, r.split, repr(float(r.loss)), *(repr(float(m)) for m in r.mae), repr(float(r.grad_norm))])


# --------------------------------------------------------------------------
# loops


def _optimizer(model: HeteroGAT, lr: float, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def _batches(n: int, size: int, gen: torch.Generator) -> list[list[int]]:
    perm = torch.randperm(n, generator=gen).tolist()
    return [perm[i : i + size] for i in range(0, n, size)]


def _mae(model: HeteroGAT, batch: GraphBatch, y: np.ndarray) -> np.ndarray:
    gamma = model.predict(batch).gamma
    return np.abs(gamma - y).mean(axis=0)


def _snapshot(model: HeteroGAT) -> dict:
    return copy.deepcopy(model.state_dict())


def _global_norm(model: HeteroGAT) -> float:
    grads = [p.grad.detach().reshape(-1) for p in model.parameters() if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def _step(model, opt, loss, cfg: TrainConfig) -> tuple[float, float]:
    """Backward, clip, update; returns (pre-clip norm, post-clip norm)."""
    opt.zero_grad(set_to_none=True)
    loss.backward()
    pre = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm))
    post = _global_norm(model)
    opt.step()
    return pre, post


def train_stage1(
    model: HeteroGAT,
    train: SampleSet,
    val: SampleSet,
    cfg: TrainConfig = TrainConfig(),
    epochs: int | None = None,
    on_epoch: Callable[[LogRecord], None] | None = None,
) -> StageResult:
    """Inverse-variance weighted MSE on the means; early stop on validation MAE."""
    if len(train) == 0 or len(val) == 0:
        raise EmptyDataset("stage 1 needs non-empty train and validation splits")
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    var = train.y.var(axis=0)
    weights = torch.tensor(1.0 / np.where(var > 1e-12, var, 1.0))
    opt = _optimizer(model, cfg.lr_stage1, cfg)
    shuffle = torch_generator(cfg.seed, "shuffle/1")
    noise = torch_generator(cfg.seed, "dropout/1")
    val_batch = collate(val.graphs)
    y_all = torch.from_numpy(train.y)

    best_state, best, best_epoch = _snapshot(model), _mean_mae(model, val_batch, val.y), 0
    history = [LogRecord(1, 0, "val", best, tuple(_mae(model, val_batch, val.y)), 0.0)]
    max_post = 0.0
    since = 0
    for epoch in range(1, epochs + 1):
        total, count, norm = 0.0, 0, 0.0
        for idx in _batches(len(train), cfg.batch_size, shuffle):
            out = model(collate([train.graphs[i] for i in idx]), train=True, generator=noise)
            loss = (((out.gamma - y_all[idx]) ** 2).mean(dim=0) * weights).sum()
            if not bool(torch.isfinite(loss)):
                model.load_state_dict(best_state)
                raise NumericError(f"non-finite stage-1 loss at epoch {epoch}; best checkpoint restored")
            norm, post = _step(model, opt, loss, cfg)
            max_post = max(max_post, post)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(LogRecord(1, epoch, "train", total / count, (math.nan,) * len(TARGETS), norm))
        val_mae = _mae(model, val_batch, val.y)
        score = float(val_mae.mean())
        history.append(LogRecord(1, epoch, "val", score, tuple(val_mae), norm))
        if on_epoch:
            on_epoch(history[-1])
        if score < best - cfg.min_delta:
            best, best_epoch, best_state, since = score, epoch, _snapshot(model), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return StageResult(best_epoch, best, best, history, max_post)


def _mean_mae(model: HeteroGAT, batch: GraphBatch, y: np.ndarray) -> float:
    return float(_mae(model, batch, y).mean())


def _val_nll(model: HeteroGAT, batch: GraphBatch, y: np.ndarray) -> float:
    p = model.predict(batch)
    return float(np.mean(nig_nll(y, p)))


def train_stage2(
    model: HeteroGAT,
    train: SampleSet,
    val: SampleSet,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    epochs: int | None = None,
    stage1_val_mae: float | None = None,
    on_epoch: Callable[[LogRecord], None] | None = None,
) -> StageResult:
    """Evidential fine-tuning with clipping; early stop on validation NLL.

    Only epochs whose validation MAE stays within ``mae_guard`` of the
    stage-1 value may become the returned checkpoint.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyDataset("stage 2 needs non-empty train and validation splits")
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    opt = _optimizer(model, cfg.lr_stage2, cfg)
    shuffle = torch_generator(cfg.seed, "shuffle/2")
    noise = torch_generator(cfg.seed, "dropout/2")
    pairs_gen = torch_generator(cfg.seed, "pairs/2")
    val_batch = collate(val.graphs)
    y_all = torch.from_numpy(train.y)
    ref_mae = _mean_mae(model, val_batch, val.y) if stage1_val_mae is None else stage1_val_mae
    limit = ref_mae * (1.0 + cfg.mae_guard)

    def eligible(mae: float) -> bool:
        return mae <= limit

    start_mae = _mean_mae(model, val_batch, val.y)
    best_state, best, best_epoch = _snapshot(model), _val_nll(model, val_batch, val.y), 0
    best_mae, trend = start_mae, best
    history = [LogRecord(2, 0, "val", best, tuple(_mae(model, val_batch, val.y)), 0.0)]
    max_post = 0.0
    since = 0
    for epoch in range(1, epochs + 1):
        total, count, norm = 0.0, 0, 0.0
        for idx in _batches(len(train), cfg.batch_size, shuffle):
            out = model(collate([train.graphs[i] for i in idx]), train=True, generator=noise)
            pairs = ranking_pairs([train.groups[i] for i in idx], loss_cfg.max_pairs, pairs_gen) if loss_cfg.rho_rank > 0 else []
            loss = evidential_loss(y_all[idx], out, loss_cfg, pairs)
            if not bool(torch.isfinite(loss)):
                model.load_state_dict(best_state)
                raise NumericError(f"non-finite stage-2 loss at epoch {epoch}; best checkpoint restored")
            norm, post = _step(model, opt, loss, cfg)
            max_post = max(max_post, post)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(LogRecord(2, epoch, "train", total / count, (math.nan,) * len(TARGETS), norm))
        val_mae = _mae(model, val_batch, val.y)
        nll = _val_nll(model, val_batch, val.y)
        history.append(LogRecord(2, epoch, "val", nll, tuple(val_mae), norm))
        if on_epoch:
            on_epoch(history[-1])
        # patience follows NLL alone; the guard only restricts which epoch is kept
        if nll < trend - cfg.min_delta:
            trend, since = nll, 0
        else:
            since += 1
        if nll < best - cfg.min_delta and eligible(float(val_mae.mean())):
            best, best_epoch, best_state, best_mae = nll, epoch, _snapshot(model), float(val_mae.mean())
        if since >= cfg.patience:
            break
    model.load_state_dict(best_state)
    return StageResult(best_epoch, best, best_mae, history, max_post, guard_ok=eligible(best_mae))


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationParams:
    temperatures: tuple[float, ...]
    ece_before: tuple[float, ...] = ()
    ece_after: tuple[float, ...] = ()

    def __post_init__(self):
        if any(not (t > 0) for t in self.temperatures):
            raise InvalidArgument("temperatures must be > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationParams":
        raw = json.loads(text)
        return cls(tuple(raw["temperatures"]), tuple(raw.get("ece_before", ())), tuple(raw.get("ece_after", ())))

    @classmethod
    def identity(cls) -> "CalibrationParams":
        return cls((1.0,) * len(TARGETS))


GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200) -> float:
    """Minimizer of a unimodal ``f`` on [lo, hi]."""
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(y, p: NigParams, lo: float = 0.1, hi: float = 10.0) -> float:
    """Scalar width multiplier minimizing the Student-t NLL of ``y``.

    The search runs over log(tau), where the objective is unimodal and
    equal steps cover [0.1, 10] evenly.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise EmptyDataset("no validation targets to calibrate on")
    obj = lambda s: float(np.sum(student_t_nll(y, p, math.exp(s))))
    return math.exp(golden_section(obj, math.log(lo), math.log(hi), tol=1e-7))


def _column(p: NigParams, k: int) -> NigParams:
    return NigParams(*(np.asarray(v)[:, k] for v in (p.gamma, p.nu, p.alpha, p.beta)))


def interval_ece(y, p: NigParams, temperature: float = 1.0, bins: int = 10) -> float:
    lo, hi = prediction_interval(p, 0.95, temperature)
    unc = scaled_report(p, temperature).total
    return calibration_metrics(y, lo, hi, unc, 0.95, bins).pice


def calibrate(model: HeteroGAT, val: SampleSet, bins: int = 10) -> CalibrationParams:
    if len(val) == 0:
        raise EmptyDataset("calibration needs a validation split")
    p = model.predict(val.graphs)
    temps, before, after = [], [], []
    for k in range(len(TARGETS)):
        pk, yk = _column(p, k), val.y[:, k]
        tau = fit_temperature(yk, pk)
        temps.append(tau)
        before.append(interval_ece(yk, pk, 1.0, bins))
        after.append(interval_ece(yk, pk, tau, bins))
    return CalibrationParams(tuple(temps), tuple(before), tuple(after))


# --------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    checked: int


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); two exact zeros give the plain difference (0)."""
    diff = abs(analytic - numeric)
    if analytic == 0.0 and numeric == 0.0:
        return diff
    return diff / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model: HeteroGAT,
    graphs: Sequence[HeteroGraph],
    y: np.ndarray,
    loss_cfg: LossConfig = LossConfig(),
    pairs: Sequence[tuple[int, int]] = (),
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd gradients of the evidential loss with central differences.

    Step per entry is 1e-5 * max(1, |theta|); evaluation runs in eval mode so
    the loss is a deterministic function of the parameters.
    """
    batch = collate(graphs)
    y_t = torch.as_tensor(np.asarray(y, dtype=float))

    def loss_value() -> torch.Tensor:
        return evidential_loss(y_t, model(batch), loss_cfg, pairs)

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    worst, worst_name, checked = 0.0, "", 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = param.grad.reshape(-1).clone() if param.grad is not None else torch.zeros(param.numel())
            flat = param.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                h = 1e-5 * max(1.0, abs(orig))
                flat[i] = orig + h
                up = float(loss_value())
                flat[i] = orig - h
                down = float(loss_value())
                flat[i] = orig
                err = relative_error(float(grad[i]), (up - down) / (2 * h), floor)
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    model.zero_grad(set_to_none=True)
    return GradCheckResult(worst, worst_name, checked)
