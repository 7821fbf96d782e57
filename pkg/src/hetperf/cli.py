"""Command-line entry point: ``hetperf <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure,
4 a self-check or acceptance check failed.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .dataset import read_csv, write_csv
from .errors import ConfigError, HetperfError, NumericError
from .evidential import LossConfig
from .hetgraph import brent_bound, dag_metrics
from .surrogate import HeteroGAT, ModelConfig, load_checkpoint, save_checkpoint
from .training import CalibrationParams, TargetScaler, calibrate, grad_check, write_training_log

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("gen-data", "train", "calibrate", "eval", "schedule", "report", "selftest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to the config exit code
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetperf", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    p.add_argument("--stage", choices=("1", "2", "12"), default="12", help="training stages to run")
    p.add_argument("--epochs", type=int, help="cap on epochs for each training stage")
    p.add_argument("--zeta", type=int, help="synthetic draws per real step")
    p.add_argument("--eta", type=float, help="epistemic threshold on makespan")
    p.add_argument("--delta", type=float, help="interval miscoverage; level is 1 - delta")
    p.add_argument("--tmax-time", type=float, dest="tmax_time", help="makespan deadline in seconds")
    p.add_argument("--episodes", type=int, help="scheduling episodes")
    p.add_argument("--bins", type=int, help="calibration bins")
    return p


def resolve(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config)
    run = {}
    if args.out is not None:
        run["out"] = args.out
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        run["seed"] = args.seed
    if args.episodes is not None:
        run["episodes"] = args.episodes
    if args.bins is not None:
        run["bins"] = args.bins
    gate = {}
    if args.eta is not None:
        gate["eta"] = args.eta
    if args.delta is not None:
        gate["level"] = 1.0 - args.delta
    if args.tmax_time is not None:
        gate["tmax_time"] = args.tmax_time
    try:
        if gate:
            run["gate"] = replace(cfg.gate, **gate)
        if args.zeta is not None:
            run["dyna"] = replace(cfg.dyna, zeta=args.zeta)
        if args.epochs is not None:
            run["train"] = replace(cfg.train, epochs_stage1=args.epochs, epochs_stage2=args.epochs)
    except HetperfError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **run)


# --------------------------------------------------------------------------
# artifacts


def _meta(cfg: pipeline.RunConfig, command: str, **extra) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.digest, "schema_version": pipeline.SCHEMA_VERSION, "command": command, **extra}


def _write(path: Path, text: str, cfg: pipeline.RunConfig, command: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    _sidecar(path, cfg, command)


def _sidecar(path: Path, cfg: pipeline.RunConfig, command: str) -> None:
    path.with_name(path.name + ".meta.json").write_text(json.dumps(_meta(cfg, command, artifact=path.name), sort_keys=True, indent=1) + "\n")


def _out(cfg: pipeline.RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_rows(cfg: pipeline.RunConfig):
    if not cfg.data_path:
        raise ConfigError("missing run.data_path (telemetry CSV to train on)")
    p = Path(cfg.data_path)
    if not p.is_file():
        raise ConfigError(f"run.data_path: file not found: {p}")
    return read_csv(p)


def _checkpoint_path(cfg: pipeline.RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"


def _calibration_path(cfg: pipeline.RunConfig) -> Path:
    return Path(cfg.calibration) if cfg.calibration else Path(cfg.out) / "calibration.json"


def _load_model(cfg: pipeline.RunConfig) -> tuple[HeteroGAT, TargetScaler]:
    path = _checkpoint_path(cfg)
    if not path.is_file():
        raise ConfigError(f"run.checkpoint: no checkpoint at {path} (run `train` first)")
    model, meta = load_checkpoint(path)
    if "target_scaler" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks target statistics")
    return model, TargetScaler.from_json(meta["target_scaler"])


def _load_calibration(cfg: pipeline.RunConfig) -> CalibrationParams:
    path = _calibration_path(cfg)
    if not path.is_file():
        raise ConfigError(f"run.calibration: no calibration file at {path} (run `calibrate` first)")
    return CalibrationParams.from_json(path.read_text())


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: pipeline.RunConfig) -> int:
    rows = pipeline.generate_rows(cfg)
    path = _out(cfg) / "telemetry.csv"
    write_csv(path, rows)
    _sidecar(path, cfg, "gen-data")
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_train(cfg: pipeline.RunConfig, stages: str) -> int:
    rows = _data_rows(cfg)
    sheet = pipeline.load_sheet(cfg.sheet)
    prep = pipeline.prepare(rows, cfg, sheet)
    model, results = pipeline.fit_surrogate(cfg, prep, stages)
    out = _out(cfg)
    meta = _meta(cfg, "train", target_scaler=prep.scaler.to_json(), stages=stages)
    save_checkpoint(model, out / "model.ckpt", meta)
    _sidecar(out / "model.ckpt", cfg, "train")
    log = out / "train_log.csv"
    write_training_log(log, [rec for r in results for rec in r.history])
    _sidecar(log, cfg, "train")
    for i, r in enumerate(results, 1):
        print(f"stage {stages[i - 1]}: best epoch {r.best_epoch}, criterion {r.best_score:.6g}, val MAE {r.val_mae:.6g}")
    if len(results) == 2 and not results[1].guard_ok:
        print("warning: stage-2 validation MAE exceeds the stage-1 guard", file=sys.stderr)
    return EXIT_OK


def cmd_calibrate(cfg: pipeline.RunConfig) -> int:
    model, _ = _load_model(cfg)
    rows = _data_rows(cfg)
    prep = pipeline.prepare(rows, cfg, pipeline.load_sheet(cfg.sheet))
    cal = calibrate(model, prep.samples[1], cfg.bins)
    path = _out(cfg) / "calibration.json"
    _write(path, cal.to_json() + "\n", cfg, "calibrate")
    print("temperatures: " + ", ".join(f"{t:.4g}" for t in cal.temperatures))
    return EXIT_OK


def cmd_eval(cfg: pipeline.RunConfig) -> int:
    model, scaler = _load_model(cfg)
    cal = _load_calibration(cfg)
    rows = _data_rows(cfg)
    prep = pipeline.prepare(rows, cfg, pipeline.load_sheet(cfg.sheet))
    report = pipeline.evaluate(model, scaler, cal, prep.rows[2], prep.samples[2], cfg.bins, cfg.seed, _meta(cfg, "eval"))
    out = _out(cfg)
    _write(out / "metrics.json", report.to_json() + "\n", cfg, "eval")
    _write(out / "reliability.csv", report.reliability_csv(), cfg, "eval")
    _write(out / "pareto.csv", report.pareto_csv(), cfg, "eval")
    r = report.regression["makespan"]
    print(f"makespan R2 {r.r2:.4f}  Spearman {report.ranking['makespan'].spearman:.4f}  ECE {report.ece['makespan']:.4f}")
    return EXIT_OK


def cmd_schedule(cfg: pipeline.RunConfig) -> int:
    model, scaler = _load_model(cfg)
    cal = _load_calibration(cfg)
    gate = cfg.gate
    if gate.eta is None:
        if not cfg.data_path:
            raise ConfigError("gate.eta is unset; give --eta or run.data_path so it can be derived from validation data")
        prep = pipeline.prepare(_data_rows(cfg), cfg, pipeline.load_sheet(cfg.sheet))
        gate = pipeline.resolve_gate(cfg, model, cal, prep.samples[1])
        print(f"eta {gate.eta:.6g} (validation quantile {cfg.eta_quantile})")
    trace = pipeline.run_schedule(cfg, model, scaler, cal, gate)
    out = _out(cfg)
    trace.to_csv(out / "trace.csv")
    _sidecar(out / "trace.csv", cfg, "schedule")
    trace.episodes_to_csv(out / "episodes.csv")
    _sidecar(out / "episodes.csv", cfg, "schedule")
    fallbacks = sum(s.fallback for s in trace.steps)
    print(f"{len(trace.episodes)} episodes, {len(trace.steps)} steps, {fallbacks} fallbacks, {len(trace.buffers.synthetic)} synthetic transitions")
    return EXIT_OK


def cmd_report(cfg: pipeline.RunConfig) -> int:
    out = _out(cfg)
    lines = [f"run seed {cfg.seed}, config {cfg.digest}"]
    metrics = out / "metrics.json"
    if metrics.is_file():
        m = json.loads(metrics.read_text())
        lines.append("")
        lines.append(f"{'target':<14}{'R2':>9}{'MAPE':>9}{'Spearman':>10}{'ECE':>8}{'PICP95':>8}")
        for name, reg in m["regression"].items():
            rk = m["ranking"][name]
            cal = m["calibration"][name]["95"]
            sp = rk["spearman"] if rk["spearman"] is not None else math.nan
            lines.append(f"{name:<14}{reg['r2']:>9.4f}{reg['mape']:>9.4f}{sp:>10.4f}{cal['pice']:>8.4f}{cal['picp']:>8.4f}")
        if m.get("pareto_auc"):
            lines.append(f"pareto AUC {m['pareto_auc']['mean']:.4g} +/- {m['pareto_auc']['std']:.3g} ({len(m['pareto_front'])} front points)")
    cal = out / "calibration.json"
    if cal.is_file():
        c = CalibrationParams.from_json(cal.read_text())
        lines.append("temperatures " + " ".join(f"{t:.4g}" for t in c.temperatures))
    trace = out / "trace.csv"
    if trace.is_file():
        rows = trace.read_text().splitlines()[1:]
        times = [float(r.split(",")[3]) for r in rows]
        fb = sum(int(r.split(",")[8]) for r in rows)
        if times:
            lines.append(f"schedule: {len(times)} steps, mean makespan {np.mean(times):.4g} s, {fb} fallbacks")
    if len(lines) == 1:
        raise ConfigError(f"nothing to report in {out}")
    _write(out / "report.txt", "\n".join(lines) + "\n", cfg, "report")
    print("\n".join(lines))
    return EXIT_OK


def selftest(seed: int = 0, verbose: bool = True) -> bool:
    """Brute-force DAG checks plus a finite-difference gradient check."""
    from . import oracles
    from .simenv import default_sheet, make_workload, graph_for_state, SimEnvState, enumerate_actions

    rng = random.Random(seed)
    ok_dag = True
    for _ in range(100):
        dag = oracles.random_dag(rng, max_nodes=6)
        m = dag_metrics(dag)
        if not math.isclose(m.span, oracles.span_by_enumeration(dag), rel_tol=1e-12) or list(m.widths) != oracles.widths_by_enumeration(dag):
            ok_dag = False
        for P in (1, 2, 3):
            b = brent_bound(dag, P)
            opt = oracles.optimal_makespan(dag, P)
            if not (b.lower <= opt + 1e-9 and opt <= b.upper + 1e-9):
                ok_dag = False
    sheet = default_sheet()
    state = SimEnvState.initial(sheet)
    actions = enumerate_actions(sheet, state)
    graphs = [graph_for_state(make_workload(b, 1, "tasks"), sheet, state, actions[(7 * i) % len(actions)]) for i, b in enumerate(("fib", "sort", "stencil"))]
    model = HeteroGAT(ModelConfig(hidden=4, layers=2, heads=2, trunk_width=4, trunk_depth=1, dropout=0.0, edge_dropout=0.0), seed=seed)
    y = np.random.default_rng(seed).normal(size=(len(graphs), 5))
    g = grad_check(model, graphs, y, LossConfig(), [(0, 1), (0, 2)])
    ok_grad = g.max_rel_error < 1e-4
    if verbose:
        print(f"dag oracles: {'pass' if ok_dag else 'FAIL'}")
        print(f"grad check: {'pass' if ok_grad else 'FAIL'} (max rel err {g.max_rel_error:.2e} over {g.checked} entries)")
    return ok_dag and ok_grad


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "schedule":
            return cmd_schedule(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        return EXIT_OK if selftest(cfg.seed) else EXIT_CHECK
    except ConfigError as exc:
        print(f"hetperf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"hetperf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HetperfError as exc:
        print(f"hetperf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
