import dataclasses
import random

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hetperf.errors import InvalidArgument, SchemaMismatch, ShapeError
from hetperf.hetgraph import EdgeSet
from hetperf.surrogate import (
    BIDIRECTIONAL,
    HeteroGAT,
    ModelConfig,
    checkpoint_text,
    collate,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
    scatter_softmax,
)

from conftest import TINY, TINY_NO_DROPOUT, random_graph

seeds = st.integers(0, 2**31 - 1)


def permute_tasks(hg, rng: random.Random):
    """Same graph with task nodes relabelled and every edge list shuffled."""
    n = hg.num_tasks
    order = list(range(n))
    rng.shuffle(order)  # new position i holds old task order[i]
    new_index = np.empty(n, dtype=np.int64)
    new_index[order] = np.arange(n)
    edges = {}
    for r, es in hg.edges.items():
        src, dst = es.src.copy(), es.dst.copy()
        if r in ("TT", "TR"):
            src = new_index[src]
        if r == "TT":
            dst = new_index[dst]
        perm = list(range(len(es)))
        rng.shuffle(perm)
        edges[r] = EdgeSet(src[perm], dst[perm], es.features[perm])
    return dataclasses.replace(
        hg,
        task_ids=tuple(hg.task_ids[i] for i in order),
        task_x=hg.task_x[order],
        task_topo=hg.task_topo[order],
        edges=edges,
    )


def outputs(model, graphs):
    p = model.predict(graphs)
    return np.stack([p.gamma, p.nu, p.alpha, p.beta])


# ---------------------------------------------------------------- softmax


def test_scatter_softmax_groups_sum_to_one():
    logits = torch.tensor([[0.0, 1.0], [2.0, -1.0], [5.0, 3.0], [1000.0, 0.0]])
    index = torch.tensor([0, 0, 2, 2])
    out = scatter_softmax(logits, index, 3)
    sums = torch.zeros(3, 2).index_add(0, index, out)
    assert torch.allclose(sums[[0, 2]], torch.ones(2, 2))
    assert torch.isfinite(out).all()
    assert out[0, 0] == pytest.approx(np.exp(0) / (np.exp(0) + np.exp(2)))


@given(seeds)
def test_attention_normalized_per_destination(seed):
    rng = random.Random(seed)
    model = HeteroGAT(TINY, seed=seed % 1000)
    graphs = [random_graph(rng) for _ in range(2)]
    _, attention = model(collate(graphs), return_attention=True)
    assert len(attention) == TINY.layers
    for dst, alpha in attention:
        N = collate(graphs).num_nodes
        sums = torch.zeros(N, alpha.shape[1]).index_add(0, dst, alpha)
        has_in = torch.zeros(N, dtype=torch.bool)
        has_in[dst] = True
        assert torch.all((sums[has_in] - 1).abs() < 1e-6)
        assert torch.all(alpha >= 0)


# ---------------------------------------------------------------- invariance


@given(seeds)
def test_task_relabelling_leaves_prediction_unchanged(seed):
    rng = random.Random(seed)
    model = HeteroGAT(TINY, seed=3)
    g = random_graph(rng)
    base = outputs(model, [g])
    moved = outputs(model, [permute_tasks(g, rng)])
    assert np.max(np.abs(base - moved)) < 1e-9


def test_batch_order_does_not_matter():
    rng = random.Random(5)
    model = HeteroGAT(TINY, seed=1)
    gs = [random_graph(rng) for _ in range(4)]
    a = outputs(model, gs)
    b = outputs(model, gs[::-1])[:, ::-1]
    single = np.concatenate([outputs(model, [g]) for g in gs], axis=1)
    assert np.max(np.abs(a - b)) < 1e-9
    assert np.max(np.abs(a - single)) < 1e-9


def test_output_constraints_and_shapes():
    rng = random.Random(6)
    model = HeteroGAT(TINY, seed=2)
    p = model.predict([random_graph(rng) for _ in range(3)])
    assert p.gamma.shape == (3, 5)
    assert np.all(p.nu > 0) and np.all(p.alpha > 1) and np.all(p.beta > 0)


def test_eval_mode_is_deterministic_and_train_mode_seeded():
    rng = random.Random(7)
    model = HeteroGAT(TINY, seed=2)
    batch = collate([random_graph(rng) for _ in range(2)])
    assert torch.equal(model(batch).gamma, model(batch).gamma)
    t1 = model(batch, train=True, generator=torch.Generator().manual_seed(9)).gamma
    t2 = model(batch, train=True, generator=torch.Generator().manual_seed(9)).gamma
    assert torch.equal(t1, t2)


def test_precedence_is_directed_only():
    assert "TT" not in BIDIRECTIONAL and {"TR", "RR", "RM"} <= BIDIRECTIONAL


def test_same_seed_same_weights():
    a, b = HeteroGAT(TINY, seed=11), HeteroGAT(TINY, seed=11)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = HeteroGAT(TINY, seed=12)
    assert not all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), c.state_dict().values()))


def test_biases_start_at_zero():
    model = HeteroGAT(TINY, seed=0)
    for name, p in model.named_parameters():
        if name.endswith(".bias"):
            assert torch.count_nonzero(p) == 0, name


# ---------------------------------------------------------------- input checks


def test_wrong_feature_width_rejected():
    g = random_graph(random.Random(1))
    bad = dataclasses.replace(g, task_x=g.task_x[:, :-1])
    with pytest.raises(ShapeError):
        collate([bad])


def test_model_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(hidden=0)
    with pytest.raises(InvalidArgument):
        ModelConfig(dropout=1.0)


def test_fit_scaler_standardizes_inputs():
    rng = random.Random(2)
    graphs = [random_graph(rng) for _ in range(6)]
    model = HeteroGAT(TINY, seed=0)
    model.fit_scaler(graphs)
    x = collate(graphs).x["T"]
    z = model._scaled("T", x)
    spread = x.std(dim=0, unbiased=False) > 1e-12
    assert torch.allclose(z.mean(dim=0)[spread], torch.zeros(int(spread.sum())), atol=1e-9)
    assert torch.allclose(z.std(dim=0, unbiased=False)[spread], torch.ones(int(spread.sum())), atol=1e-9)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    rng = random.Random(3)
    graphs = [random_graph(rng) for _ in range(3)]
    model = HeteroGAT(TINY_NO_DROPOUT, seed=4)
    model.fit_scaler(graphs)
    digest = save_checkpoint(model, tmp_path / "m.ckpt", {"seed": 42})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["seed"] == 42 and len(digest) == 64
    assert np.array_equal(outputs(model, graphs), outputs(loaded, graphs))
    assert checkpoint_text(loaded, {"seed": 42}) == (tmp_path / "m.ckpt").read_text()


def test_checkpoint_rejects_foreign_text():
    with pytest.raises(SchemaMismatch):
        parse_checkpoint("hello\n")
    text = checkpoint_text(HeteroGAT(TINY, seed=0))
    lines = text.splitlines()
    with pytest.raises(SchemaMismatch):
        parse_checkpoint("\n".join(lines[:-2]) + "\n")
