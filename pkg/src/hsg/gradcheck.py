"""Finite-difference checks of the four differentiable components on toy sizes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import losses
from . import tensor as tn
from . import transformer as tf
from .tensor import Tensor, grad_check

TOY_ANCHORS = 6
TOY_SEGMENTS = 4
TOY_N0 = 6
TOY_N1 = 3
TOY_M = 8


@dataclass
class ComponentCheck:
    name: str
    report: tn.GradCheckReport

    def line(self) -> str:
        return f"{self.name:<18} {self.report}"


def _unit(rng, n, m):
    x = rng.normal(size=(n, m))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def check_contrastive(rng, step, tol) -> tn.GradCheckReport:
    anchors = rng.normal(size=(TOY_ANCHORS, TOY_M))
    segments = rng.normal(size=(TOY_SEGMENTS, TOY_M))
    seg_inst = np.array([0, 0, 0, 1])
    seg_group = np.array([0, 0, 1, 0])
    anchor_seg = rng.integers(0, 3, TOY_ANCHORS)
    sets = losses.build_contrast_sets(seg_inst, seg_group, anchor_seg)
    na = anchors.size

    def fn(x):
        v = tn.normalize_rows(tn.reshape(x[:na], anchors.shape))
        u = tn.normalize_rows(tn.reshape(x[na:], segments.shape))
        return losses.contrastive_loss(v, u, sets, temperature=1.0 / 16)

    return grad_check(fn, np.concatenate([anchors.ravel(), segments.ravel()]), step, tol)


def check_goodness(rng, step, tol) -> tn.GradCheckReport:
    graph = losses.build_affinity(_unit(rng, TOY_N0, TOY_M), k=2)
    logits = rng.normal(size=(TOY_N0, TOY_N1))
    z = rng.normal(size=(TOY_N1, TOY_M))
    nl = logits.size

    def fn(x):
        m_l = tn.softmax(tn.reshape(x[:nl], logits.shape), axis=1)
        z_l = tn.normalize_rows(tn.reshape(x[nl:], z.shape))
        return losses.goodness_loss([m_l], graph, [z_l])

    return grad_check(fn, np.concatenate([logits.ravel(), z.ravel()]), step, tol)


def check_transformer(rng, step, tol, seed=0) -> tn.GradCheckReport:
    params = tf.TransformerParams.init(TOY_M, (TOY_N1,), seed=seed)
    x0 = _unit(rng, TOY_N0, TOY_M)
    w_c = rng.normal(size=(TOY_N0, TOY_N1))
    w_x = rng.normal(size=(TOY_N1, TOY_M))
    w_z = rng.normal(size=(TOY_N1, TOY_M))
    query = params.tensors["transformer.level0.query"]
    nq = query.size

    def fn(x):
        params.tensors["transformer.level0.query"] = tn.reshape(x[:nq], query.shape)
        out = tf.transformer_level(tn.normalize_rows(tn.reshape(x[nq:], x0.shape)), params, 0)
        return ((out.transition * w_c).sum() + (out.x_next * w_x).sum()
                + (out.z_next * w_z).sum())

    try:
        return grad_check(fn, np.concatenate([query.data.ravel(), x0.ravel()]), step, tol)
    finally:
        params.tensors["transformer.level0.query"] = query


def check_encoder(rng, step, tol, seed=0, per_tensor=12) -> tn.GradCheckReport:
    params = enc.EncoderParams.init(TOY_M, seed)
    image = rng.uniform(0, 1, (1, 8, 8, 3))
    direction = _unit(rng, 1, TOY_M)[0]
    names = sorted(params.tensors)
    sizes = [params.tensors[n].size for n in names]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    point = np.concatenate([params.tensors[n].data.ravel() for n in names])
    picks = np.concatenate([
        off + rng.choice(size, size=min(per_tensor, size), replace=False)
        for off, size in zip(offsets[:-1], sizes)])
    original = dict(params.tensors)

    def fn(x):
        for n, a, b in zip(names, offsets[:-1], offsets[1:]):
            params.tensors[n] = tn.reshape(x[int(a):int(b)], original[n].shape)
        feats = enc.forward(image, params)
        return tn.reduce_mean(feats @ Tensor(direction[:, None]))

    try:
        return grad_check(fn, point, step, tol, indices=picks)
    finally:
        params.tensors.update(original)


COMPONENTS = {
    "contrastive": check_contrastive,
    "goodness": check_goodness,
    "transformer_level": check_transformer,
    "encoder": check_encoder,
}


def run_gradcheck(seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4) -> list:
    out = []
    for i, (name, check) in enumerate(COMPONENTS.items()):
        rng = np.random.default_rng([seed, 100 + i])
        out.append(ComponentCheck(name, check(rng, step, tolerance)))
    return out
