"""Clustering transformer: level-l centroids to level-(l+1) centroids and transitions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .oversegment import is_refinement as is_merge  # noqa: F401
from .tensor import ShapeMismatch, Tensor

N_HEADS = 4
N_LAYERS = 2
DROPOUT = 0.1
STD_EPS = 1e-8


@dataclass
class TransformerParams:
    """Parameters for every coarsening level, keyed ``transformer.level{l}.*``."""

    m: int
    levels: tuple
    tensors: dict = field(default_factory=dict)
    heads: int = N_HEADS
    layers: int = N_LAYERS
    dropout: float = DROPOUT

    @classmethod
    def init(cls, m: int, levels, seed: int = 0, heads: int = N_HEADS, layers: int = N_LAYERS,
             ffn_mult: int = 2) -> "TransformerParams":
        levels = tuple(int(n) for n in levels)
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"levels must strictly decrease: {levels}")
        if m % heads:
            raise ValueError(f"m={m} not divisible by {heads} heads")
        rng = np.random.default_rng([seed, 2])
        t = {}

        def linear(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            t[name + ".w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            t[name + ".b"] = Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True)

        def norm(name):
            t[name + ".gamma"] = Tensor(np.ones(m), requires_grad=True)
            t[name + ".beta"] = Tensor(np.zeros(m), requires_grad=True)

        def attn(name):
            for proj in ("q", "k", "v", "o"):
                linear(f"{name}.{proj}", m, m)

        for lv, n_next in enumerate(levels):
            p = f"transformer.level{lv}"
            for i in range(layers):
                attn(f"{p}.enc{i}.self")
                linear(f"{p}.enc{i}.ff1", m, ffn_mult * m)
                linear(f"{p}.enc{i}.ff2", ffn_mult * m, m)
                norm(f"{p}.enc{i}.norm1")
                norm(f"{p}.enc{i}.norm2")
            for i in range(layers):
                attn(f"{p}.dec{i}.self")
                attn(f"{p}.dec{i}.cross")
                linear(f"{p}.dec{i}.ff1", m, ffn_mult * m)
                linear(f"{p}.dec{i}.ff2", ffn_mult * m, m)
                norm(f"{p}.dec{i}.norm1")
                norm(f"{p}.dec{i}.norm2")
                norm(f"{p}.dec{i}.norm3")
            t[f"{p}.query"] = Tensor(rng.uniform(-1.0, 1.0, (n_next, m)), requires_grad=True)
            linear(f"{p}.stat_mean", m, m)
            linear(f"{p}.stat_std", m, m)
            linear(f"{p}.out_x", m, m)
            linear(f"{p}.out_z", m, m)
        return cls(m=m, levels=levels, tensors=t, heads=heads, layers=layers)

    def level(self, lv: int) -> "LevelView":
        return LevelView(self, f"transformer.level{lv}")


@dataclass
class LevelView:
    owner: TransformerParams
    prefix: str

    def __getitem__(self, name) -> Tensor:
        return self.owner.tensors[f"{self.prefix}.{name}"]

    @property
    def n_out(self) -> int:
        return self["query"].shape[0]


@dataclass
class LevelOutput:
    y: Tensor
    x_next: Tensor
    z_next: Tensor
    transition: Tensor


@dataclass
class Hierarchy:
    x: list
    z: list
    transitions: list
    soft: list
    groups: list
    pixel_labels: list


def _linear(x, p, name):
    return x @ p[name + ".w"] + p[name + ".b"]


def _mha(xq, xkv, p, name, heads):
    q = _linear(xq, p, name + ".q")
    k = _linear(xkv, p, name + ".k")
    v = _linear(xkv, p, name + ".v")
    d = q.shape[1] // heads
    outs = []
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        outs.append(tn.attention(q[:, cols], k[:, cols], v[:, cols]))
    return _linear(tn.concat(outs, axis=1), p, name + ".o")


def _norm(x, p, name):
    return tn.batch_norm_rows(x, p[name + ".gamma"], p[name + ".beta"])


def _ffn(x, p, name):
    return _linear(tn.relu(_linear(x, p, name + ".ff1")), p, name + ".ff2")


def _drop(x, params, rng, train):
    return tn.dropout(x, params.dropout, rng, train)


def statistical_query_adaptation(y, query, p) -> Tensor:
    """Shift the queries by affine maps of the per-feature mean and std of ``y``."""
    y, query = tn.as_tensor(y), tn.as_tensor(query)
    if y.shape[1] != query.shape[1]:
        raise ShapeMismatch(f"features {y.shape} vs queries {query.shape}")
    mean = tn.reduce_mean(y, axis=0, keepdims=True)
    spread = tn.reshape(tn.std(y, axis=0, eps=STD_EPS), (1, y.shape[1]))
    return query + _linear(mean, p, "stat_mean") + _linear(spread, p, "stat_std")


def transformer_level(x, params: TransformerParams, lv: int, train: bool = False,
                      rng: np.random.Generator | None = None) -> LevelOutput:
    """Run the level-``lv`` encoder/decoder on centroids ``x`` (n_l x m)."""
    x = tn.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.m:
        raise ShapeMismatch(f"centroids {x.shape}, expected (n, {params.m})")
    p = params.level(lv)
    heads = params.heads
    y = x
    for i in range(params.layers):
        e = f"enc{i}"
        y = _norm(y + _drop(_mha(y, y, p, e + ".self", heads), params, rng, train), p, e + ".norm1")
        y = _norm(y + _drop(_ffn(y, p, e), params, rng, train), p, e + ".norm2")
    q = statistical_query_adaptation(y, p["query"], p)
    for i in range(params.layers):
        d = f"dec{i}"
        q = _norm(q + _drop(_mha(q, q, p, d + ".self", heads), params, rng, train), p, d + ".norm1")
        q = _norm(q + _drop(_mha(q, y, p, d + ".cross", heads), params, rng, train), p, d + ".norm2")
        q = _norm(q + _drop(_ffn(q, p, d), params, rng, train), p, d + ".norm3")
    x_next = tn.normalize_rows(_linear(q, p, "out_x"))
    z_next = tn.normalize_rows(_linear(q, p, "out_z"))
    # each level-l group spreads its mass over the level-(l+1) groups
    transition = tn.softmax((y @ tn.transpose(z_next)) * (1.0 / np.sqrt(params.m)), axis=1)
    return LevelOutput(y, x_next, z_next, transition)


def propagate(p_l, transition) -> Tensor:
    """P_{l+1} = P_l C."""
    p_l, transition = tn.as_tensor(p_l), tn.as_tensor(transition)
    if p_l.shape[1] != transition.shape[0]:
        raise ShapeMismatch(f"assignment {p_l.shape} vs transition {transition.shape}")
    return p_l @ transition


def binarize(p) -> np.ndarray:
    """Winner-take-all per row; ties go to the lowest column."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return data.argmax(axis=1)


def chain_groups(transitions) -> list:
    """Hard groups per level: g_0 = identity, g_{l+1} = argmax_b C_l[g_l, b]."""
    groups = [np.arange(tn.as_tensor(transitions[0]).shape[0])] if len(transitions) else []
    for c in transitions:
        groups.append(binarize(c)[groups[-1]])
    return groups


def hierarchy_forward(x0, g0: np.ndarray | None, params: TransformerParams, levels=None,
                      train: bool = False, rng: np.random.Generator | None = None) -> Hierarchy:
    """Chain the per-level transformers from base centroids ``x0``.

    Soft assignments follow P_{l+1} = P_l C_l.  Hard groups follow
    g_{l+1} = argmax_b C_l[g_l, b], i.e. winner-take-all applied to the
    one-hot level-l grouping propagated by C_l, so every level is an exact
    merge of the one below.  ``g0`` (pixel base labels, any shape) yields the
    pixel label maps; pass None to skip them.
    """
    x0 = tn.as_tensor(x0)
    levels = params.levels if levels is None else tuple(levels)
    n0 = x0.shape[0]
    soft = [Tensor(np.eye(n0))]
    xs, zs, cs = [x0], [None], []
    for lv, _ in enumerate(levels):
        out = transformer_level(xs[-1], params, lv, train=train, rng=rng)
        cs.append(out.transition)
        xs.append(out.x_next)
        zs.append(out.z_next)
        soft.append(out.transition if lv == 0 else propagate(soft[-1], out.transition))
    groups = chain_groups(cs) if cs else [np.arange(n0)]
    pixel = [] if g0 is None else [np.asarray(groups[l])[g0] for l in range(len(groups))]
    return Hierarchy(xs, zs, cs, soft, groups, pixel)

