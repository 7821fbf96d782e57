"""Heterogeneous graph attention surrogate with evidential multi-metric heads.

Nodes of all graphs in a batch live in one index space ordered tasks, then
resources, then memory. Each node type has its own encoder, each edge type
its own projection and attention vectors, and attention is normalized
jointly over every incoming edge of a node regardless of type. The pooled
graph vector feeds a shared trunk with one NIG head per target metric.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NumericError, SchemaMismatch, ShapeError
from .evidential import NigParams
from .hetgraph import (
    DEVICE_CTX_DIM,
    EDGE_FEATURE_DIMS,
    EDGE_TYPES,
    MEM_FEATURE_DIM,
    RES_FEATURE_DIM,
    RES_TOPO_DIM,
    TASK_FEATURE_DIM,
    TASK_TOPO_DIM,
    HeteroGraph,
)

TARGETS = ("makespan", "energy", "cache_misses", "branch_misses", "utilization")
NODE_TYPES = ("T", "R", "M")
NODE_IN_DIMS = {"T": TASK_FEATURE_DIM + TASK_TOPO_DIM, "R": RES_FEATURE_DIM + RES_TOPO_DIM, "M": MEM_FEATURE_DIM}
EDGE_ENDS = {"TT": ("T", "T"), "TR": ("T", "R"), "RR": ("R", "R"), "RM": ("R", "M")}
# precedence stays directed; placement, cluster and cache links carry messages both ways
BIDIRECTIONAL = frozenset({"TR", "RR", "RM"})
EPS_POS = 1e-6
CHECKPOINT_VERSION = 1

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    encoder_depth: int = 2
    dropout: float = 0.1
    edge_dropout: float = 0.1
    feature_noise: float = 0.05
    trunk_width: int = 128
    trunk_depth: int = 2
    negative_slope: float = 0.2

    def __post_init__(self):
        from .errors import InvalidArgument

        for name in ("hidden", "layers", "heads", "encoder_depth", "trunk_width", "trunk_depth"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        for name in ("dropout", "edge_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidArgument(f"{name} must be in [0, 1)")
        if self.feature_noise < 0:
            raise InvalidArgument("feature_noise must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    """Several graphs stacked; edge indices are local to their node type."""

    x: dict[str, torch.Tensor]
    graph_of: dict[str, torch.Tensor]
    edges: dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    ctx: torch.Tensor
    num_graphs: int

    @property
    def counts(self) -> dict[str, int]:
        return {t: int(self.x[t].shape[0]) for t in NODE_TYPES}

    @property
    def offsets(self) -> dict[str, int]:
        c = self.counts
        return {"T": 0, "R": c["T"], "M": c["T"] + c["R"]}

    @property
    def num_nodes(self) -> int:
        return sum(self.counts.values())


def _check_width(arr: np.ndarray, expected: int, ids: Sequence[str]) -> None:
    if arr.ndim != 2 or arr.shape[1] != expected:
        got = arr.shape[1] if arr.ndim == 2 else arr.shape
        raise ShapeError(ids[0] if ids else "?", expected, got)


def collate(graphs: Sequence[HeteroGraph]) -> GraphBatch:
    """Stack graphs into one batch. Raises ShapeError on feature-width mismatch."""
    xs: dict[str, list[np.ndarray]] = {t: [] for t in NODE_TYPES}
    owner: dict[str, list[np.ndarray]] = {t: [] for t in NODE_TYPES}
    parts: dict[str, list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {r: [] for r in EDGE_TYPES}
    base = {t: 0 for t in NODE_TYPES}
    ctx = []
    for gi, g in enumerate(graphs):
        t_feat = np.concatenate([g.task_x, g.task_topo], axis=1) if g.num_tasks else np.zeros((0, NODE_IN_DIMS["T"]))
        r_feat = np.concatenate([g.res_x, g.res_topo], axis=1) if g.num_resources else np.zeros((0, NODE_IN_DIMS["R"]))
        m_feat = g.mem_x if g.num_memory else np.zeros((0, NODE_IN_DIMS["M"]))
        _check_width(t_feat, NODE_IN_DIMS["T"], g.task_ids)
        _check_width(r_feat, NODE_IN_DIMS["R"], [f"core{i}" for i in range(g.num_resources)])
        _check_width(m_feat, NODE_IN_DIMS["M"], [f"mem{i}" for i in range(g.num_memory)])
        if np.asarray(g.device_ctx).shape != (DEVICE_CTX_DIM,):
            raise ShapeError("device", DEVICE_CTX_DIM, np.asarray(g.device_ctx).shape)
        sizes = {"T": t_feat.shape[0], "R": r_feat.shape[0], "M": m_feat.shape[0]}
        for t, arr in zip(NODE_TYPES, (t_feat, r_feat, m_feat)):
            xs[t].append(arr)
            owner[t].append(np.full(arr.shape[0], gi, dtype=np.int64))
        for r in EDGE_TYPES:
            es = g.edges.get(r)
            if es is None or len(es) == 0:
                continue
            if es.features.shape[1] != EDGE_FEATURE_DIMS[r]:
                raise ShapeError(f"{r}-edge", EDGE_FEATURE_DIMS[r], es.features.shape[1])
            a, b = EDGE_ENDS[r]
            parts[r].append((es.src + base[a], es.dst + base[b], es.features))
        for t in NODE_TYPES:
            base[t] += sizes[t]
        ctx.append(np.asarray(g.device_ctx, dtype=float))

    def cat(arrs, width):
        return torch.from_numpy(np.concatenate(arrs, axis=0)) if arrs else torch.zeros((0, width))

    x = {t: cat(xs[t], NODE_IN_DIMS[t]).to(torch.float64) for t in NODE_TYPES}
    graph_of = {t: torch.from_numpy(np.concatenate(owner[t])) if owner[t] else torch.zeros(0, dtype=torch.int64) for t in NODE_TYPES}
    edges = {}
    for r in EDGE_TYPES:
        if parts[r]:
            src = torch.from_numpy(np.concatenate([p[0] for p in parts[r]]).astype(np.int64))
            dst = torch.from_numpy(np.concatenate([p[1] for p in parts[r]]).astype(np.int64))
            feat = torch.from_numpy(np.concatenate([p[2] for p in parts[r]], axis=0)).to(torch.float64)
        else:
            src = dst = torch.zeros(0, dtype=torch.int64)
            feat = torch.zeros((0, EDGE_FEATURE_DIMS[r]))
        edges[r] = (src, dst, feat)
    ctx_t = torch.from_numpy(np.stack(ctx)) if ctx else torch.zeros((0, DEVICE_CTX_DIM))
    return GraphBatch(x, graph_of, edges, ctx_t.to(torch.float64), len(graphs))


# --------------------------------------------------------------------------
# model


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen) * 2 * bound - bound)
        if lin.bias is not None:
            lin.bias.zero_()


def _uniform(shape, fan_in: int, gen: torch.Generator) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.rand(shape, generator=gen) * 2 * bound - bound)


def _dropout(x: torch.Tensor, p: float, train: bool, gen: torch.Generator | None) -> torch.Tensor:
    if not train or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen) >= p
    return x * keep / (1.0 - p)


def scatter_softmax(logits: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    """Softmax of ``logits`` (E, H) over groups given by ``index`` (E,)."""
    if logits.shape[0] == 0:
        return logits
    idx = index.unsqueeze(-1).expand_as(logits)
    peak = torch.full((size, logits.shape[1]), -math.inf).scatter_reduce(0, idx, logits.detach(), "amax", include_self=True)
    ex = torch.exp(logits - peak[index])
    denom = torch.zeros((size, logits.shape[1])).index_add(0, index, ex)
    return ex / denom[index]


class _Relation(nn.Module):
    """Per-layer parameters of one edge type."""

    def __init__(self, d: int, heads: int, edim: int, gen: torch.Generator):
        super().__init__()
        self.weight = _uniform((d, heads * d), d, gen)
        self.att_src = _uniform((heads, d), d, gen)
        self.att_dst = _uniform((heads, d), d, gen)
        self.att_edge = _uniform((heads, d), d, gen)
        self.edge_proj = nn.Linear(edim, d)
        _init_linear(self.edge_proj, gen)


class HeteroGAT(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        d, H = cfg.hidden, cfg.heads

        self.encoders = nn.ModuleDict()
        for t in NODE_TYPES:
            dims = [NODE_IN_DIMS[t]] + [d] * cfg.encoder_depth
            layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))
            for lin in layers:
                _init_linear(lin, gen)
            self.encoders[t] = layers

        self.gat = nn.ModuleList()
        for _ in range(cfg.layers):
            self.gat.append(nn.ModuleDict({r: _Relation(d, H, EDGE_FEATURE_DIMS[r], gen) for r in EDGE_TYPES}))

        self.pool_score = nn.ModuleDict({t: nn.Linear(d, 1) for t in NODE_TYPES})
        for lin in self.pool_score.values():
            _init_linear(lin, gen)

        dims = [len(NODE_TYPES) * d + DEVICE_CTX_DIM] + [cfg.trunk_width] * cfg.trunk_depth
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))
        self.heads = nn.ModuleList(nn.Linear(cfg.trunk_width, 4) for _ in TARGETS)
        for lin in list(self.trunk) + list(self.heads):
            _init_linear(lin, gen)

        # input standardization, fitted on training graphs and saved with the weights
        for t in NODE_TYPES:
            self.register_buffer(f"mean_{t}", torch.zeros(NODE_IN_DIMS[t]))
            self.register_buffer(f"std_{t}", torch.ones(NODE_IN_DIMS[t]))
        for r in EDGE_TYPES:
            self.register_buffer(f"mean_e{r}", torch.zeros(EDGE_FEATURE_DIMS[r]))
            self.register_buffer(f"std_e{r}", torch.ones(EDGE_FEATURE_DIMS[r]))
        self.register_buffer("mean_ctx", torch.zeros(DEVICE_CTX_DIM))
        self.register_buffer("std_ctx", torch.ones(DEVICE_CTX_DIM))

    # ---------------------------------------------------------------- scaling

    def fit_scaler(self, graphs: Sequence[HeteroGraph]) -> None:
        """Set input means/stds from training graphs (zero spread maps to unit std)."""
        batch = collate(graphs)

        def put(name, x):
            if x.shape[0] == 0:
                return
            mean = x.mean(dim=0)
            std = x.std(dim=0, unbiased=False)
            std = torch.where(std > 1e-12, std, torch.ones_like(std))
            getattr(self, f"mean_{name}").copy_(mean)
            getattr(self, f"std_{name}").copy_(std)

        for t in NODE_TYPES:
            put(t, batch.x[t])
        for r in EDGE_TYPES:
            put(f"e{r}", batch.edges[r][2])
        put("ctx", batch.ctx)

    def _scaled(self, name: str, x: torch.Tensor) -> torch.Tensor:
        return (x - getattr(self, f"mean_{name}")) / getattr(self, f"std_{name}")

    # ---------------------------------------------------------------- stages

    def encode_nodes(self, batch: GraphBatch, train: bool = False, gen: torch.Generator | None = None) -> torch.Tensor:
        """Layer-0 embeddings (N, d) in task/resource/memory order."""
        out = []
        for t in NODE_TYPES:
            x = batch.x[t]
            if x.shape[1] != NODE_IN_DIMS[t]:
                raise ShapeError(f"{t}-node", NODE_IN_DIMS[t], x.shape[1])
            h = self._scaled(t, x)
            if train and self.cfg.feature_noise > 0:
                h = h + self.cfg.feature_noise * torch.randn(h.shape, generator=gen)
            for lin in self.encoders[t]:
                h = _dropout(F.relu(lin(h)), self.cfg.dropout, train, gen)
            out.append(h)
        return torch.cat(out, dim=0)

    def gat_layer(
        self,
        layer: int,
        h: torch.Tensor,
        batch: GraphBatch,
        train: bool = False,
        gen: torch.Generator | None = None,
        attention: list | None = None,
    ) -> torch.Tensor:
        """One typed attention layer: ELU(h + mean over heads of attended messages)."""
        cfg = self.cfg
        N, d, H = h.shape[0], cfg.hidden, cfg.heads
        off = batch.offsets
        counts = batch.counts
        logits, dsts, msgs_src, msgs_rel = [], [], [], []
        projected = {}
        for r in EDGE_TYPES:
            src, dst, feat = batch.edges[r]
            if src.shape[0] == 0:
                continue
            rel = self.gat[layer][r]
            a, b = EDGE_ENDS[r]
            lo = off[a] if off[a] <= off[b] else off[b]
            hi = max(off[a] + counts[a], off[b] + counts[b])
            wh = (h[lo:hi] @ rel.weight).view(hi - lo, H, d)
            s_src = (wh * rel.att_src).sum(-1)
            s_dst = (wh * rel.att_dst).sum(-1)
            phi = F.relu(rel.edge_proj(self._scaled(f"e{r}", feat)))
            s_edge = phi @ rel.att_edge.T
            gsrc, gdst = src + off[a], dst + off[b]
            pairs = [(gsrc, gdst)]
            if r in BIDIRECTIONAL:
                pairs.append((gdst, gsrc))
            for u, v in pairs:
                e = F.leaky_relu(s_src[u - lo] + s_dst[v - lo] + s_edge, cfg.negative_slope)
                if train and cfg.edge_dropout > 0:
                    keep = torch.rand(e.shape[0], generator=gen) >= cfg.edge_dropout
                    u, v, e = u[keep], v[keep], e[keep]
                logits.append(e)
                dsts.append(v)
                msgs_src.append(u - lo)
                msgs_rel.append(r)
            projected[r] = wh
        if not logits:
            return F.elu(h)
        all_logits = torch.cat(logits)
        if not bool(torch.isfinite(all_logits).all()):
            raise NumericError(f"non-finite attention logits in layer {layer}")
        all_dst = torch.cat(dsts)
        alpha = scatter_softmax(all_logits, all_dst, N)
        if attention is not None:
            attention.append((all_dst, alpha.detach()))
        # heads are averaged, so reduce over heads per edge before scattering
        parts, start = [], 0
        for u, r in zip(msgs_src, msgs_rel):
            n = u.shape[0]
            parts.append((alpha[start : start + n].unsqueeze(-1) * projected[r][u]).sum(dim=1))
            start += n
        agg = torch.zeros((N, d)).index_add(0, all_dst, torch.cat(parts))
        return F.elu(h + agg / H)

    def pool_graph(self, h: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        """Attention-weighted mean per node type; an absent type gives zeros."""
        G, d = batch.num_graphs, self.cfg.hidden
        off, counts = batch.offsets, batch.counts
        blocks = []
        for t in NODE_TYPES:
            ht = h[off[t] : off[t] + counts[t]]
            pooled = torch.zeros((G, d))
            if ht.shape[0]:
                owner = batch.graph_of[t]
                w = scatter_softmax(self.pool_score[t](ht), owner, G)
                pooled = pooled.index_add(0, owner, w * ht)
            blocks.append(pooled)
        return torch.cat(blocks, dim=1)

    def forward(
        self,
        batch: GraphBatch,
        train: bool = False,
        generator: torch.Generator | None = None,
        return_attention: bool = False,
    ):
        """Per-graph, per-metric NIG parameters, each a (G, K) tensor."""
        attention: list | None = [] if return_attention else None
        h = self.encode_nodes(batch, train, generator)
        for layer in range(self.cfg.layers):
            h = self.gat_layer(layer, h, batch, train, generator, attention)
        z = torch.cat([self.pool_graph(h, batch), self._scaled("ctx", batch.ctx)], dim=1)
        for lin in self.trunk:
            z = _dropout(F.relu(lin(z)), self.cfg.dropout, train, generator)
        raw = torch.stack([head(z) for head in self.heads], dim=1)
        gamma = raw[..., 0]
        nu = F.softplus(raw[..., 1]) + EPS_POS
        alpha = F.softplus(raw[..., 2]) + 1.0 + EPS_POS
        beta = F.softplus(raw[..., 3]) + EPS_POS
        if not bool(torch.isfinite(raw).all()):
            raise NumericError("non-finite model output")
        out = NigParams(gamma, nu, alpha, beta)
        return (out, attention) if return_attention else out

    @torch.no_grad()
    def predict(self, graphs: Sequence[HeteroGraph] | GraphBatch) -> NigParams:
        """Eval-mode forward returning numpy arrays of shape (G, K)."""
        batch = graphs if isinstance(graphs, GraphBatch) else collate(graphs)
        p = self.forward(batch)
        return NigParams(*(t.numpy().copy() for t in (p.gamma, p.nu, p.alpha, p.beta)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# --------------------------------------------------------------------------
# checkpoint: keyed text records, row-major values


def checkpoint_text(model: HeteroGAT, meta: Mapping[str, object] | None = None) -> str:
    lines = [
        f"#hetperf-checkpoint v{CHECKPOINT_VERSION}",
        "#config " + model.cfg.to_json(),
        "#meta " + json.dumps({"init_seed": model.seed, **(meta or {})}, sort_keys=True),
    ]
    for name, tensor in model.state_dict().items():
        flat = tensor.detach().reshape(-1).tolist()
        shape = ",".join(str(s) for s in tensor.shape)
        lines.append(f"{name} {shape}")
        lines.append(" ".join(repr(float(v)) for v in flat))
    return "\n".join(lines) + "\n"


def save_checkpoint(model: HeteroGAT, path: str | Path, meta: Mapping[str, object] | None = None) -> str:
    text = checkpoint_text(model, meta)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def parse_checkpoint(text: str) -> tuple[HeteroGAT, dict]:
    lines = text.splitlines()
    if not lines or lines[0] != f"#hetperf-checkpoint v{CHECKPOINT_VERSION}":
        raise SchemaMismatch("not a version-1 checkpoint")
    if not lines[1].startswith("#config ") or not lines[2].startswith("#meta "):
        raise SchemaMismatch("checkpoint header incomplete")
    cfg = ModelConfig(**json.loads(lines[1][len("#config ") :]))
    meta = json.loads(lines[2][len("#meta ") :])
    model = HeteroGAT(cfg, seed=int(meta.get("init_seed", 0)))
    expected = model.state_dict()
    state = {}
    body = lines[3:]
    for i in range(0, len(body) - 1, 2):
        name, shape_s = body[i].rsplit(" ", 1)
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        values = [float(v) for v in body[i + 1].split()] if body[i + 1] else []
        if name not in expected or tuple(expected[name].shape) != shape:
            raise SchemaMismatch(f"checkpoint tensor {name!r} does not fit the configured model")
        state[name] = torch.tensor(values, dtype=torch.float64).reshape(shape)
    missing = set(expected) - set(state)
    if missing:
        raise SchemaMismatch(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
    model.load_state_dict(state)
    return model, meta


def load_checkpoint(path: str | Path) -> tuple[HeteroGAT, dict]:
    return parse_checkpoint(Path(path).read_text())
