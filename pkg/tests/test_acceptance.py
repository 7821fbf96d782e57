"""Acceptance checks. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 6 to 9 share one surrogate trained at full size on 2,000 synthetic
rows, so the first of them to run pays the training cost.
"""

import json
import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from hetperf import cli, oracles, pipeline
from hetperf.dataset import FIELDS, read_csv, write_csv
from hetperf.errors import SchemaMismatch
from hetperf.evidential import LossConfig, NigParams, decompose, nig_nll, prediction_interval
from hetperf.hetgraph import brent_bound, dag_metrics
from hetperf.scheduler import score_candidates, uncertainty_gate
from hetperf.simenv import BENCHMARKS, SimEnvState, default_sheet, enumerate_actions, expected_time, graph_for_state, make_workload
from hetperf.surrogate import HeteroGAT, ModelConfig, collate
from hetperf.training import calibrate, grad_check

from conftest import jitter_parameters, random_graph
from nig_oracles import marginal_nll_by_quadrature, sample_nig_targets
from test_dataset import make_row
from test_surrogate import outputs, permute_tasks

SEEDS_C9 = (42, 123, 456, 789, 1024)


@pytest.fixture
def verdict(capsys):
    def say(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")

    return say


# ---------------------------------------------------------------- shared surrogate


@pytest.fixture(scope="session")
def full_run():
    cfg = replace(pipeline.RunConfig(), seed=42, model=ModelConfig(hidden=64, layers=3, heads=4))
    sheet = default_sheet()
    start = time.perf_counter()
    rows = pipeline.generate_rows(cfg, sheet)
    prep = pipeline.prepare(rows, cfg, sheet)
    model, results = pipeline.fit_surrogate(cfg, prep, "12")
    wall = time.perf_counter() - start
    cal = calibrate(model, prep.samples[1], cfg.bins)
    report = pipeline.evaluate(model, prep.scaler, cal, prep.rows[2], prep.samples[2], cfg.bins, cfg.seed)
    gate = pipeline.resolve_gate(cfg, model, cal, prep.samples[1])
    return dict(cfg=cfg, sheet=sheet, rows=rows, prep=prep, model=model, results=results, wall=wall, cal=cal, report=report, gate=gate)


# ---------------------------------------------------------------- 1, 2: DAG oracles


def test_c1_dag_metrics_match_enumeration(verdict):
    rng = random.Random(1)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        dag = oracles.random_dag(rng, max_nodes=7)
        m = dag_metrics(dag)
        same = (
            m.span == oracles.span_by_enumeration(dag)
            and m.diameter == oracles.diameter_by_enumeration(dag)
            and m.density == oracles.density_by_count(dag)
            and list(m.widths) == oracles.widths_by_enumeration(dag)
        )
        mismatches += not same
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5.0
    verdict(1, ok, f"{mismatches} mismatches over 200 DAGs in {elapsed:.2f} s, limit 5 s")
    assert ok


def test_c2_brent_inequality(verdict):
    rng = random.Random(2)
    violations = 0
    for _ in range(100):
        dag = oracles.random_dag(rng, max_nodes=6)
        for P in (1, 2, 3):
            b = brent_bound(dag, P)
            opt = oracles.optimal_makespan(dag, P)
            violations += not (b.lower <= opt + 1e-9 and opt <= b.upper + 1e-9)
    verdict(2, violations == 0, f"{violations} violations over 300 (DAG, P) cases")
    assert violations == 0


# ---------------------------------------------------------------- 3, 4, 5: model math


def test_c3_gradient_check(verdict):
    rng = random.Random(3)
    graphs = [random_graph(rng) for _ in range(5)]
    model = HeteroGAT(ModelConfig(hidden=8, layers=2, heads=2, trunk_width=8, trunk_depth=1, dropout=0.0, edge_dropout=0.0), seed=3)
    model.fit_scaler(graphs)
    # standardized inputs with zero biases can sit exactly on a ReLU kink, where
    # central differences are meaningless; perturb every parameter off it
    jitter_parameters(model, seed=3)
    y = np.random.default_rng(3).normal(size=(5, 5))
    start = time.perf_counter()
    res = grad_check(model, graphs, y, LossConfig(), [(0, 1), (2, 3), (1, 4)])
    elapsed = time.perf_counter() - start
    ok = res.max_rel_error < 1e-4 and elapsed < 120.0 and res.checked == model.parameter_count()
    verdict(3, ok, f"max rel err {res.max_rel_error:.2e} over {res.checked} entries in {elapsed:.1f} s, limits 1e-4 and 120 s")
    assert ok


def test_c4_nig_math(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    identity_exact = True
    for _ in range(50):
        p = NigParams(rng.uniform(-3, 3), rng.uniform(0.1, 10), rng.uniform(1.1, 10), rng.uniform(0.1, 5))
        y = p.gamma + 2 * rng.normal()
        worst = max(worst, abs(nig_nll(y, p) - marginal_nll_by_quadrature(y, p.gamma, p.nu, p.alpha, p.beta)))
        r = decompose(p)
        identity_exact &= r.total == r.aleatoric + r.epistemic
    p = NigParams(0.7, 1.5, 3.5, 2.0)
    y = sample_nig_targets(np.random.default_rng(40), p.gamma, p.nu, p.alpha, p.beta, 100_000)
    lo, hi = prediction_interval(p, 0.95)
    coverage = float(np.mean((y >= lo) & (y <= hi)))
    ok = worst <= 1e-6 and identity_exact and abs(coverage - 0.95) <= 0.01
    verdict(4, ok, f"NLL vs quadrature max {worst:.1e} (<=1e-6), identity exact {identity_exact}, coverage {coverage:.4f} (0.95+-0.01)")
    assert ok


def test_c5_attention_and_permutation(verdict):
    rng = random.Random(5)
    model = HeteroGAT(ModelConfig(hidden=16, layers=2, heads=2, trunk_width=16, trunk_depth=1), seed=5)
    worst_norm, worst_perm = 0.0, 0.0
    for _ in range(100):
        g = random_graph(rng)
        batch = collate([g])
        _, attention = model(batch, return_attention=True)
        for dst, alpha in attention:
            sums = torch.zeros(batch.num_nodes, alpha.shape[1], dtype=alpha.dtype).index_add(0, dst, alpha)
            has_in = torch.zeros(batch.num_nodes, dtype=torch.bool)
            has_in[dst] = True
            worst_norm = max(worst_norm, float((sums[has_in] - 1).abs().max()))
        worst_perm = max(worst_perm, float(np.max(np.abs(outputs(model, [g]) - outputs(model, [permute_tasks(g, rng)])))))
    ok = worst_norm <= 1e-6 and worst_perm <= 1e-9
    verdict(5, ok, f"attention sum error {worst_norm:.1e} (<=1e-6), relabelling change {worst_perm:.1e} (<=1e-9) on 100 graphs")
    assert ok


# ---------------------------------------------------------------- 6, 7: trained surrogate


def test_c6_end_to_end_surrogate(verdict, full_run):
    rows, prep, report = full_run["rows"], full_run["prep"], full_run["report"]
    r2 = report.regression["makespan"].r2
    rho = report.ranking["makespan"].spearman
    wall = full_run["wall"]
    sizes = tuple(len(part) for part in prep.rows)
    ok = len(rows) == 2000 and r2 >= 0.90 and rho >= 0.90 and wall <= 900.0
    verdict(6, ok, f"{len(rows)} rows split {sizes}; makespan R2 {r2:.4f} (>=0.90), Spearman {rho:.4f} (>=0.90), {wall:.0f} s (<=900 s)")
    assert ok


def test_c7_calibrated_ece(verdict, full_run):
    ece = full_run["report"].ece["makespan"]
    others = ", ".join(f"{k} {v:.3f}" for k, v in full_run["report"].ece.items() if k != "makespan")
    ok = ece <= 0.05
    verdict(7, ok, f"held-out makespan ECE {ece:.4f} (<=0.05); other targets: {others}")
    assert ok


# ---------------------------------------------------------------- 8, 9: scheduling


def test_c8_gate_soundness(verdict, full_run):
    cfg, gate = full_run["cfg"], full_run["gate"]
    model, scaler, cal, sheet = full_run["model"], full_run["prep"].scaler, full_run["cal"], full_run["sheet"]
    trace = pipeline.run_schedule(cfg, model, scaler, cal, gate, sheet)
    executed = [s for s in trace.steps if not s.fallback]
    violations = sum(not (s.epistemic <= gate.eta and s.pi_upper <= gate.tmax_time) for s in executed)

    # nested admission sets over the eta grid, on every benchmark's candidate set
    s0 = SimEnvState.initial(sheet)
    actions = enumerate_actions(sheet, s0)
    nested = True
    for name in BENCHMARKS:
        wl = make_workload(name, 3, "tasks")
        scores = score_candidates(model, cal, scaler, [graph_for_state(wl, sheet, s0, a) for a in actions], actions, sheet.device_id, gate.level)
        kept = [{s.action for s in uncertainty_gate(scores, replace(gate, eta=f * gate.eta))[0]} for f in (0.5, 1.0, 2.0)]
        nested &= kept[0] <= kept[1] <= kept[2]
    ok = len(trace.episodes) == 200 and violations == 0 and nested
    fallbacks = len(trace.steps) - len(executed)
    verdict(8, ok, f"eta* {gate.eta:.4g}; {violations} violations in {len(executed)} executed steps ({fallbacks} fallbacks); nested over 0.5/1/2 eta*: {nested}")
    assert ok


def test_c9_dyna_sample_efficiency(verdict, full_run):
    cfg, gate = full_run["cfg"], full_run["gate"]
    model, scaler, cal, sheet = full_run["model"], full_run["prep"].scaler, full_run["cal"], full_run["sheet"]
    wl = pipeline.schedule_workloads(cfg)[0]
    best = min(expected_time(wl, a, sheet) for a in enumerate_actions(sheet, SimEnvState.initial(sheet)))
    results, wins = [], 0
    for seed in SEEDS_C9:
        reach = []
        for zeta in (0, 10):
            run_cfg = replace(cfg, seed=seed, dyna=replace(cfg.dyna, zeta=zeta))
            trace = pipeline.run_schedule(run_cfg, model, scaler, cal, gate, sheet, stop_time=1.1 * best)
            reach.append(trace.episodes_to_reach(best, tol=0.10))
        plain, planned = (math.inf if r is None else r for r in reach)
        wins += planned < plain
        results.append(f"{seed}: {reach[0]} vs {reach[1]}")
    ok = wins >= 4
    verdict(9, ok, f"zeta=10 faster on {wins}/5 seeds (>=4); episodes to reach, zeta 0 vs 10: {'; '.join(results)}")
    assert ok


# ---------------------------------------------------------------- 10, 11: artifacts


TINY_RUN = """
[run]
seed = 11
out = out
data_path = out/telemetry.csv
benchmarks = fib, sort
episodes = 3
workload = fib
input_size = 1

[model]
hidden = 4
layers = 1
heads = 1
trunk_width = 4
trunk_depth = 1

[train]
epochs_stage1 = 2
epochs_stage2 = 2
"""


def test_c10_determinism_and_provenance(verdict, tmp_path, monkeypatch, capsys):
    outputs_by_run = []
    for name in ("a", "b"):
        work = tmp_path / name
        work.mkdir()
        (work / "run.ini").write_text(TINY_RUN)
        monkeypatch.chdir(work)
        for cmd in ("gen-data", "train", "calibrate", "eval", "schedule", "report"):
            assert cli.main([cmd, "--config", "run.ini"]) == cli.EXIT_OK, cmd
        outputs_by_run.append({p.name: p.read_bytes() for p in sorted((work / "out").iterdir())})
    capsys.readouterr()
    first, second = outputs_by_run
    identical = all(first[k] == second[k] for k in ("telemetry.csv", "model.ckpt", "metrics.json"))
    artifacts = [k for k in first if not k.endswith(".meta.json")]
    digest = pipeline.parse_config(TINY_RUN).digest
    tagged = True
    for k in artifacts:
        meta = json.loads(first.get(k + ".meta.json", b"{}"))
        tagged &= meta.get("seed") == 11 and meta.get("config_hash") == digest
    ok = identical and tagged and len(artifacts) >= 7
    verdict(10, ok, f"byte-identical telemetry/checkpoint/metrics: {identical}; seed and config hash on all {len(artifacts)} artifacts: {tagged}")
    assert ok


def test_c11_schema_round_trip(verdict, tmp_path):
    rng = random.Random(11)
    rows = [make_row(rng) for _ in range(1000)]
    path = tmp_path / "rows.csv"
    write_csv(path, rows)
    lossless = read_csv(path) == rows

    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    bad_files = {
        "missing column": [",".join(header[:-1])] + [",".join(l.split(",")[:-1]) for l in lines[1:3]],
        "extra column": [",".join(header + ["extra"])] + [l + ",0" for l in lines[1:3]],
        "renamed column": [",".join(["when"] + header[1:])] + lines[1:3],
        "reordered columns": [",".join(header[1:2] + header[:1] + header[2:])] + lines[1:3],
    }
    rejected = 0
    for label, content in bad_files.items():
        bad = tmp_path / f"{label.replace(' ', '_')}.csv"
        bad.write_text("\n".join(content) + "\n")
        try:
            read_csv(bad)
        except SchemaMismatch:
            rejected += 1
    ok = lossless and rejected == len(bad_files) and header[0] == FIELDS[0]
    verdict(11, ok, f"1000-row round trip lossless: {lossless}; {rejected}/{len(bad_files)} mismatched files rejected")
    assert ok
