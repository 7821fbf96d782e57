"""Normal-Inverse-Gamma helpers: loss terms, uncertainty split, intervals.

Functions accept torch tensors (autograd flows through) or plain floats and
numpy arrays (returned as numpy/float).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
from scipy import stats

from .errors import EmptyBatch, InvalidArgument, InvalidParams, NumericError


@dataclass(frozen=True)
class NigParams:
    gamma: Any
    nu: Any
    alpha: Any
    beta: Any

    def check(self) -> None:
        nu, alpha, beta = (np.asarray(_np(x)) for x in (self.nu, self.alpha, self.beta))
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise NumericError("non-finite NIG parameters")
        if np.any(alpha <= 1):
            raise InvalidParams("alpha must exceed 1")
        if np.any(nu <= 0) or np.any(beta <= 0):
            raise InvalidParams("nu and beta must be positive")

    def student_t(self) -> tuple[Any, Any, Any]:
        """(degrees of freedom, location, scale) of the marginal over y."""
        scale = (self.beta * (1 + self.nu) / (self.nu * self.alpha)) ** 0.5
        return 2 * self.alpha, self.gamma, scale


@dataclass(frozen=True)
class UncertaintyReport:
    mean: Any
    aleatoric: Any
    epistemic: Any
    total: Any


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    rho_rank: float = 0.1
    margin: float = 0.1
    max_pairs: int = 32

    def __post_init__(self):
        if self.lam < 0 or self.rho_rank < 0:
            raise InvalidArgument("loss weights must be >= 0")


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return x


def decompose(p: NigParams) -> UncertaintyReport:
    if np.any(np.asarray(_np(p.alpha)) <= 1):
        raise InvalidParams("alpha must exceed 1")
    aleatoric = p.beta / (p.alpha - 1)
    epistemic = p.beta / (p.nu * (p.alpha - 1))
    return UncertaintyReport(p.gamma, aleatoric, epistemic, aleatoric + epistemic)


def _as_tensors(*xs):
    wrap = not any(isinstance(x, torch.Tensor) for x in xs)
    ts = [x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64) for x in xs]
    return wrap, ts


def _unwrap(t: torch.Tensor):
    arr = t.detach().numpy()
    return float(arr) if arr.ndim == 0 else arr


def nig_nll(y, p: NigParams):
    """Negative log of the Student-t marginal implied by the NIG prior."""
    wrap, (y, g, nu, a, b) = _as_tensors(y, p.gamma, p.nu, p.alpha, p.beta)
    if not all(torch.isfinite(t).all() for t in (y, g, nu, a, b)):
        raise NumericError("non-finite input to nig_nll")
    omega = 2 * b * (1 + nu)
    nll = (
        0.5 * torch.log(math.pi / nu)
        - a * torch.log(omega)
        + (a + 0.5) * torch.log(nu * (y - g) ** 2 + omega)
        + torch.lgamma(a)
        - torch.lgamma(a + 0.5)
    )
    return _unwrap(nll) if wrap else nll


def evidence_regularizer(y, p: NigParams):
    wrap, (y, g, nu, a) = _as_tensors(y, p.gamma, p.nu, p.alpha)
    reg = torch.abs(y - g) * (2 * nu + a)
    return _unwrap(reg) if wrap else reg


def ranking_loss(gamma_i, gamma_j, y_i, y_j, margin: float = 0.1):
    """Mean hinge ``max(0, margin - sign(y_j - y_i) (g_j - g_i))``; tied targets skipped."""
    wrap, (gi, gj, yi, yj) = _as_tensors(gamma_i, gamma_j, y_i, y_j)
    sign = torch.sign(yj - yi)
    keep = sign != 0
    if not bool(keep.any()):
        out = gi.sum() * 0.0
    else:
        out = torch.clamp(margin - sign[keep] * (gj[keep] - gi[keep]), min=0.0).mean()
    return _unwrap(out) if wrap else out


def ranking_pairs(groups: Sequence, max_pairs: int, generator: torch.Generator | None = None) -> list[tuple[int, int]]:
    """Index pairs (i < j) that share a group label, at most ``max_pairs``, seeded selection."""
    pairs = [(i, j) for i in range(len(groups)) for j in range(i + 1, len(groups)) if groups[i] == groups[j]]
    if len(pairs) <= max_pairs:
        return pairs
    perm = torch.randperm(len(pairs), generator=generator).tolist()
    return sorted(pairs[k] for k in perm[:max_pairs])


def evidential_loss(y, p: NigParams, cfg: LossConfig = LossConfig(), rank_pairs: Sequence[tuple[int, int]] = (), rank_metric: int = 0):
    """Mean over samples and metrics of NLL + lam*|y-g|*(2nu+alpha), plus the ranking term.

    Inputs are (N, K) arrays. The ranking term uses column ``rank_metric``
    (makespan) over the given pairs.
    """
    wrap, (y, g, nu, a, b) = _as_tensors(y, p.gamma, p.nu, p.alpha, p.beta)
    if y.numel() == 0:
        raise EmptyBatch("evidential_loss on an empty batch")
    q = NigParams(g, nu, a, b)
    per = nig_nll(y, q) + cfg.lam * evidence_regularizer(y, q)
    loss = per.reshape(per.shape[0], -1).sum(dim=1).sum() / per.numel()
    if cfg.rho_rank > 0 and rank_pairs:
        i = torch.tensor([pq[0] for pq in rank_pairs])
        j = torch.tensor([pq[1] for pq in rank_pairs])
        gk, yk = g.reshape(g.shape[0], -1)[:, rank_metric], y.reshape(y.shape[0], -1)[:, rank_metric]
        loss = loss + cfg.rho_rank * ranking_loss(gk[i], gk[j], yk[i], yk[j], cfg.margin)
    return _unwrap(loss) if wrap else loss


def prediction_interval(p: NigParams, level: float, temperature=1.0):
    """Central interval of the Student-t marginal; ``temperature`` rescales its width."""
    if not 0.0 < level < 1.0:
        raise InvalidArgument(f"interval level must be in (0, 1), got {level}")
    df, loc, scale = (np.asarray(_np(x), dtype=float) for x in NigParams(*(_np(v) for v in (p.gamma, p.nu, p.alpha, p.beta))).student_t())
    half = stats.t.ppf(0.5 + level / 2.0, df) * scale * np.asarray(temperature, dtype=float)
    lo, hi = loc - half, loc + half
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def scaled_report(p: NigParams, temperature=1.0) -> UncertaintyReport:
    """Uncertainty split with both components scaled by temperature**2."""
    rep = decompose(p)
    t2 = np.asarray(temperature, dtype=float) ** 2
    return UncertaintyReport(rep.mean, rep.aleatoric * t2, rep.epistemic * t2, rep.total * t2)


def student_t_nll(y, p: NigParams, temperature=1.0):
    """NLL of y under the temperature-scaled Student-t marginal (numpy)."""
    df, loc, scale = (np.asarray(_np(x), dtype=float) for x in NigParams(*(_np(v) for v in (p.gamma, p.nu, p.alpha, p.beta))).student_t())
    return -stats.t.logpdf(np.asarray(y, dtype=float), df, loc=loc, scale=scale * temperature)
