"""Temporal alignment metrics, the cosine text branch, losses and fusion.

Metrics take two (T, D') frame-feature sequences and return a scalar
distance Tensor.  All three are invariant to per-frame positive rescaling
(costs are cosine based) and to a simultaneous permutation of both
sequences' feature dimensions.

The ordered alignment distance uses this convention: frame cost
c[i, j] = 1 - cos(q_i, s_j); an alignment path starts on any cell of query
row 0, ends on any cell of row T-1 (relaxed start/end on the support axis,
equivalent to zero-cost padding columns), and moves by diagonal, vertical
or horizontal steps.  The distance is the soft minimum (temperature lam) of
path costs; lam -> 0 recovers the hard minimum over the same path family.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from fsar.config import ConfigError
from fsar.data import InputError
from fsar.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    logsumexp,
    matmul,
    softmax,
    softmin,
    stack,
)


def cosine_cost_matrix(q: Tensor, s: Tensor) -> Tensor:
    """Pairwise frame cost 1 - cosine: (Tq, Ts)."""
    if q.shape[-1] != s.shape[-1]:
        raise DimensionError(f"feature dims differ: {q.shape} vs {s.shape}")
    num = matmul(q, s.swapaxes(0, 1))
    qn = (q * q).sum(axis=1, keepdims=True).sqrt()
    sn = (s * s).sum(axis=1, keepdims=True).sqrt()
    return 1.0 - num / (qn * sn.swapaxes(0, 1))


def otam_distance(q: Tensor, s: Tensor, lam: float = 0.1, hard: bool = False, **_) -> Tensor:
    """Relaxed-boundary monotone alignment distance (see module docstring)."""
    if q.shape[0] != s.shape[0]:
        raise DimensionError(f"frame counts differ: {q.shape} vs {s.shape}")
    cost = cosine_cost_matrix(q, s)
    return _alignment_dp(cost, lam, hard)


def _alignment_dp(cost: Tensor, lam: float, hard: bool) -> Tensor:
    t_q, t_s = cost.shape

    def reduce(cands: list[Tensor]) -> Tensor:
        if len(cands) == 1:
            return cands[0]
        stacked = stack(cands, axis=0)
        if hard:
            return stacked.min(axis=0)
        return softmin(stacked, lam, axis=0)

    zero = Tensor(np.zeros(()))
    prev_row: list[Tensor] = []
    for j in range(t_s):
        # row 0: either start fresh at (0, j) or extend horizontally
        here = cost[0, j]
        prev_row.append(here if j == 0 else here + reduce([prev_row[j - 1], zero]))
    for i in range(1, t_q):
        row: list[Tensor] = []
        for j in range(t_s):
            cands = [prev_row[j]]  # vertical
            if j > 0:
                cands.append(prev_row[j - 1])  # diagonal
                cands.append(row[j - 1])  # horizontal
            row.append(cost[i, j] + reduce(cands))
        prev_row = row
    return reduce(prev_row)


def bimhm_distance(q: Tensor, s: Tensor, **_) -> Tensor:
    """Bidirectional mean of nearest-frame cosine costs, halved."""
    if q.shape[0] == 0 or s.shape[0] == 0:
        raise InputError("bimhm needs non-empty sequences")
    cost = cosine_cost_matrix(q, s)
    forward = cost.min(axis=1).mean(axis=0)
    backward = cost.min(axis=0).mean(axis=0)
    return (forward + backward) * 0.5


def _normalized(x: Tensor) -> Tensor:
    n = (x * x).sum(axis=1, keepdims=True).sqrt()
    return x / n


def _ordered_tuples(features: Tensor, size: int) -> Tensor:
    """Stack concatenations of ordered frame index tuples: (C(T,size), size*D')."""
    t = features.shape[0]
    rows = [
        concat([features[i, :] for i in idx], axis=0)
        for idx in combinations(range(t), size)
    ]
    return stack(rows, axis=0)


def trx_distance(q: Tensor, s: Tensor, omega: tuple[int, ...] = (2,), **_) -> Tensor:
    """Tuple cross-attention matching over ordered frame sub-sequences.

    Query tuples attend over support tuples (scaled dot product on
    frame-normalized concatenations, no learned maps); the distance is one
    minus the mean cosine between each query tuple and its reconstruction.
    """
    t = min(q.shape[0], s.shape[0])
    if any(w > t for w in omega):
        raise InputError(f"tuple sizes {omega} exceed sequence length {t}")
    qn = _normalized(q)
    sn = _normalized(s)
    per_size = []
    for w in omega:
        qt = _ordered_tuples(qn, w)  # (Pq, w*D)
        st = _ordered_tuples(sn, w)  # (Ps, w*D)
        logits = matmul(qt, st.swapaxes(0, 1)) * (1.0 / np.sqrt(qt.shape[1]))
        recon = matmul(softmax(logits, axis=-1), st)
        sim = (qt * recon).sum(axis=1) / (
            ((qt * qt).sum(axis=1).sqrt()) * ((recon * recon).sum(axis=1).sqrt())
        )
        per_size.append(1.0 - sim.mean(axis=0))
    return stack(per_size, axis=0).mean(axis=0) if len(per_size) > 1 else per_size[0]


@dataclass(frozen=True)
class MetricDescriptor:
    name: str
    fn: Callable[..., Tensor]
    differentiable: bool = True


METRIC_REGISTRY: dict[str, MetricDescriptor] = {}


def register_metric(name: str, fn: Callable[..., Tensor], differentiable: bool = True) -> MetricDescriptor:
    if name in METRIC_REGISTRY:
        raise ConfigError(f"metric {name!r} already registered")
    desc = MetricDescriptor(name, fn, differentiable)
    METRIC_REGISTRY[name] = desc
    return desc


register_metric("otam", otam_distance)
register_metric("bimhm", bimhm_distance)
register_metric("trx", trx_distance)


# -- text branch and losses -------------------------------------------------------


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors; zero vectors violate the similarity contract."""
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    return (a * b).sum() / ((a * a).sum().sqrt() * (b * b).sum().sqrt())


def text_branch(
    video_avgs: list[Tensor], text_vectors: list[np.ndarray], tau: float
) -> tuple[Tensor, Tensor]:
    """Cosine similarities of pooled video features against every class text.

    Returns (similarities, probabilities): both (num_videos, M); rows of the
    probabilities are softmax(sim / tau).
    """
    rows = []
    for v in video_avgs:
        row = [cosine_similarity(v, Tensor(np.asarray(t, dtype=np.float64))) for t in text_vectors]
        rows.append(stack(row, axis=0))
    sims = stack(rows, axis=0)
    return sims, softmax(sims * (1.0 / tau), axis=-1)


def cross_entropy_from_logits(logits: Tensor, index: int) -> Tensor:
    return logsumexp(logits, axis=-1) - logits[index]


def kl_one_hot_from_logits(logits: Tensor, index: int, smoothing: float = 0.0) -> Tensor:
    """KL(g || p) for a (smoothed) one-hot target g; equals CE when smoothing=0."""
    m = logits.shape[0]
    if smoothing == 0.0:
        return cross_entropy_from_logits(logits, index)
    g = np.full(m, smoothing / m)
    g[index] += 1.0 - smoothing
    log_p = logits - logsumexp(logits, axis=-1, keepdims=True)
    entropy = float((g * np.log(g)).sum())
    return entropy - (Tensor(g) * log_p).sum()


def fuse_predictions(p_q2t: np.ndarray, p_q2s: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination of the text and visual class distributions."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    p_q2t = np.asarray(p_q2t, dtype=np.float64)
    p_q2s = np.asarray(p_q2s, dtype=np.float64)
    if p_q2t.shape != p_q2s.shape:
        raise DimensionError(f"distribution shapes differ: {p_q2t.shape} vs {p_q2s.shape}")
    return alpha * p_q2t + (1.0 - alpha) * p_q2s


@dataclass(frozen=True)
class ScoreBundle:
    """Everything an episode's scoring produced, as plain arrays."""

    distances: np.ndarray  # (Q, M) metric distances
    p_q2s: np.ndarray  # (Q, M)
    sim_s2t: np.ndarray  # (S_videos, M) cosine similarities
    sim_q2t: np.ndarray  # (Q, M)
    p_s2t: np.ndarray  # (S_videos, M)
    p_q2t: np.ndarray  # (Q, M)
    fused: np.ndarray  # (Q, M) alpha * p_q2t + (1 - alpha) * p_q2s


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_score_bundle(
    distances: np.ndarray,
    sim_s2t: np.ndarray,
    sim_q2t: np.ndarray,
    alpha: float,
    tau: float,
    tau_d: float,
) -> ScoreBundle:
    """Assemble a bundle from raw distances / similarities (pure numpy)."""
    p_q2s = _np_softmax(-np.asarray(distances, dtype=np.float64) / tau_d)
    p_s2t = _np_softmax(np.asarray(sim_s2t, dtype=np.float64) / tau)
    p_q2t = _np_softmax(np.asarray(sim_q2t, dtype=np.float64) / tau)
    return ScoreBundle(
        distances=np.asarray(distances, dtype=np.float64),
        p_q2s=p_q2s,
        sim_s2t=np.asarray(sim_s2t, dtype=np.float64),
        sim_q2t=np.asarray(sim_q2t, dtype=np.float64),
        p_s2t=p_s2t,
        p_q2t=p_q2t,
        fused=fuse_predictions(p_q2t, p_q2s, alpha),
    )


@dataclass(frozen=True)
class EpisodeLosses:
    l_q2s: Tensor
    l_s2t: Tensor
    l_q2t: Tensor
    total: Tensor


def episode_losses(
    dist_logits: list[Tensor],
    query_labels: list[int],
    s2t_logits: list[Tensor],
    support_labels: list[int],
    q2t_logits: list[Tensor],
    alpha: float,
    smoothing: float = 0.0,
) -> EpisodeLosses:
    """Combine visual cross-entropy with the two text-branch KL terms.

    ``dist_logits``/``q2t_logits`` are per-query class logits; ``s2t_logits``
    is per support video.  total = alpha/2 (L_S2T + L_Q2T) + (1-alpha) L_Q2S.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    nq = len(query_labels)
    l_q2s = stack(
        [cross_entropy_from_logits(lg, y) for lg, y in zip(dist_logits, query_labels)], axis=0
    ).mean(axis=0)
    l_s2t = stack(
        [kl_one_hot_from_logits(lg, y, smoothing) for lg, y in zip(s2t_logits, support_labels)],
        axis=0,
    ).mean(axis=0)
    l_q2t = stack(
        [kl_one_hot_from_logits(lg, y, smoothing) for lg, y in zip(q2t_logits, query_labels)],
        axis=0,
    ).mean(axis=0)
    total = (l_s2t + l_q2t) * (0.5 * alpha) + l_q2s * (1.0 - alpha)
    return EpisodeLosses(l_q2s=l_q2s, l_s2t=l_s2t, l_q2t=l_q2t, total=total)
