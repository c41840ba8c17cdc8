"""Pixel-to-segment contrastive loss, goodness-of-grouping loss, total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class EmptyBatch(ValueError):
    pass


class TooFewCentroids(ValueError):
    pass


class NonFiniteComponent(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0 / 16
    lambda_e: float = 1.0
    lambda_f: float = 0.1
    lambda_g: float = 0.2
    k_affinity: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.lambda_e, self.lambda_f, self.lambda_g) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ContrastSets:
    """Positive/negative segment masks for the anchors that have a positive.

    ``anchors`` indexes the original anchor list; ``positive`` and
    ``negative`` are (len(anchors), n_segments) boolean masks.
    """

    anchors: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self):
        return len(self.anchors)


@dataclass
class AffinityGraph:
    adjacency: np.ndarray
    degree: np.ndarray
    n_edges: int


def build_contrast_sets(seg_instance, seg_group, anchor_segment) -> ContrastSets:
    """Id-keyed contrast sets for anchors given each segment's (instance, group).

    Positives share the anchor's instance and group; negatives are the rest
    of the batch.  The anchor's own segment is in neither set.  Views need no
    separate handling: segments of every view of an instance are pooled.
    """
    seg_instance = np.asarray(seg_instance)
    seg_group = np.asarray(seg_group)
    anchor_segment = np.asarray(anchor_segment, dtype=np.int64)
    inst = seg_instance[anchor_segment][:, None]
    grp = seg_group[anchor_segment][:, None]
    own = np.arange(len(seg_group))[None, :] == anchor_segment[:, None]
    same_inst = seg_instance[None, :] == inst
    pos = same_inst & (seg_group[None, :] == grp) & ~own
    neg = ~own & ~pos
    keep = np.flatnonzero(pos.any(axis=1))
    return ContrastSets(keep, pos[keep], neg[keep])


def contrastive_loss(anchor_features, segment_features, sets: ContrastSets,
                     temperature: float = 1.0 / 16) -> Tensor:
    """Mean over anchors of -log(sum_pos exp(v.u/T) / sum_{pos+neg} exp(v.u/T))."""
    if len(sets) == 0:
        raise EmptyBatch("no anchor has a positive segment")
    v = tn.as_tensor(anchor_features)[sets.anchors]
    logits = (v @ tn.transpose(tn.as_tensor(segment_features))) * (1.0 / temperature)
    return contrastive_from_logits(logits, sets)


def contrastive_from_logits(logits: Tensor, sets: ContrastSets) -> Tensor:
    """Same as ``contrastive_loss`` for precomputed logits already restricted to ``sets.anchors``."""
    if len(sets) == 0:
        raise EmptyBatch("no anchor has a positive segment")
    all_lse = tn.masked_logsumexp(logits, sets.positive | sets.negative)
    pos_lse = tn.masked_logsumexp(logits, sets.positive)
    return tn.reduce_mean(all_lse - pos_lse)


def build_affinity(centroids, k: int = 2) -> AffinityGraph:
    """Symmetrized binary k-nearest-neighbour graph under cosine similarity."""
    x = np.asarray(centroids.data if isinstance(centroids, Tensor) else centroids, dtype=np.float64)
    n = len(x)
    if n < k + 1:
        raise TooFewCentroids(f"{n} centroids cannot have {k} neighbours each")
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    sims = x @ x.T
    np.fill_diagonal(sims, -np.inf)
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    adj = np.zeros((n, n))
    adj[np.repeat(np.arange(n), k), nearest.ravel()] = 1.0
    adj = np.maximum(adj, adj.T)
    degree = adj.sum(axis=1)
    return AffinityGraph(adj, degree, int(adj.sum()) // 2)


def modularity_term(assign, graph: AffinityGraph) -> Tensor:
    """-(1/2e) trace(M^T (A - D D^T / 2e) M)."""
    assign = tn.as_tensor(assign)
    two_e = 2.0 * graph.n_edges
    modmat = graph.adjacency - np.outer(graph.degree, graph.degree) / two_e
    return tn.trace(tn.transpose(assign) @ (Tensor(modmat) @ assign)) * (-1.0 / two_e)


def collapse_term(assign) -> Tensor:
    """sqrt(n_l)/n_0 * ||1^T M||_F - 1."""
    assign = tn.as_tensor(assign)
    n0, nl = assign.shape
    return tn.frobenius(tn.reduce_sum(assign, axis=0)) * (math.sqrt(nl) / n0) - 1.0


def separation_term(z) -> Tensor:
    """Mean over centroids of -log softmax(z_k . z_j)_k."""
    z = tn.as_tensor(z)
    n = z.shape[0]
    gram = z @ tn.transpose(z)
    lse = tn.masked_logsumexp(gram, np.ones((n, n), dtype=bool))
    diag = tn.take(gram, (np.arange(n), np.arange(n)))
    return tn.reduce_mean(lse - diag)


def goodness_loss(assignments, graph: AffinityGraph, z_per_level) -> Tensor:
    """Sum over levels l >= 1 of modularity + collapse + separation terms."""
    total = None
    for m_l, z_l in zip(assignments, z_per_level):
        term = modularity_term(m_l, graph) + collapse_term(m_l) + separation_term(z_l)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(l_edge, l_levels, l_goodness, config: LossConfig) -> Tensor:
    parts = [tn.as_tensor(l_edge), tn.as_tensor(l_goodness)] + [tn.as_tensor(t) for t in l_levels]
    for t in parts:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteComponent("loss component is not finite")
    out = tn.as_tensor(l_edge) * config.lambda_e + tn.as_tensor(l_goodness) * config.lambda_g
    for t in l_levels:
        out = out + tn.as_tensor(t) * config.lambda_f
    return out
