"""Shared fixtures and small graph factories."""

from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hetperf import oracles
from hetperf.hetgraph import Action, RuntimeState, TaskDag, TaskSpec, build_hetero_graph
from hetperf.simenv import default_sheet, enumerate_actions, SimEnvState
from hetperf.surrogate import ModelConfig

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile("repo")

TINY = ModelConfig(hidden=8, layers=2, heads=2, trunk_width=8, trunk_depth=1)
TINY_NO_DROPOUT = ModelConfig(hidden=6, layers=2, heads=2, trunk_width=6, trunk_depth=1, dropout=0.0, edge_dropout=0.0, feature_noise=0.0)


def featured_dag(rng: random.Random, max_nodes: int = 7) -> TaskDag:
    """A random DAG whose tasks also carry random static/dynamic features."""
    base = oracles.random_dag(rng, max_nodes=max_nodes)
    nodes = tuple(
        TaskSpec(
            n.id,
            n.weight,
            tuple(float(rng.randint(0, 20)) for _ in n.cfg_features),
            tuple(float(rng.randint(0, 5000)) for _ in n.static),
            tuple(float(rng.randint(0, 50)) for _ in n.dynamic),
        )
        for n in base.nodes
    )
    return TaskDag(nodes, base.edges)


def random_state(rng: random.Random, sheet, action: Action) -> RuntimeState:
    C = sheet.core_count
    return RuntimeState.from_action(
        sheet,
        action,
        [rng.random() for _ in range(C)],
        [sheet.t_ambient + 20 * rng.random() for _ in range(C)],
        [rng.uniform(-2, 2) for _ in range(C)],
    )


def random_graph(rng: random.Random, sheet=None, dag: TaskDag | None = None, action: Action | None = None):
    sheet = sheet or default_sheet()
    dag = dag or featured_dag(rng)
    if action is None:
        actions = enumerate_actions(sheet, SimEnvState.initial(sheet))
        action = actions[rng.randrange(len(actions))]
    return build_hetero_graph(dag, sheet, random_state(rng, sheet, action), action, {"seed": 0})


@pytest.fixture(scope="session")
def sheet():
    return default_sheet()


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_rows(sheet):
    from hetperf.simenv import SweepGrid, sweep_generate

    grid = SweepGrid(masks=((1, 0, 0, 0), (1, 1, 0, 0), (0, 0, 1, 1), (1, 1, 1, 1)), dvfs=(0, 1, 2, (2, 2, 0, 0)), inputs=(1, 2))
    return sweep_generate(["fib", "sort"], sheet, grid, seed=42)


@pytest.fixture(scope="session")
def toy_samples(toy_rows, sheet):
    """(train, val, scaler) from 64 sweep rows; every fourth row is held out."""
    from hetperf.training import TargetScaler, make_samples

    train_rows = [r for i, r in enumerate(toy_rows) if i % 4]
    val_rows = toy_rows[::4]
    scaler = TargetScaler.fit(train_rows)
    return make_samples(train_rows, sheet, scaler), make_samples(val_rows, sheet, scaler), scaler


def jitter_parameters(model, seed: int, scale: float = 0.1) -> None:
    """Move every weight off its initial value so no ReLU input sits exactly at 0."""
    import torch

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
