"""Pixel-wise unit-length embedding network and segment pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

WIDTHS = (32, 64, 64)
MIN_SIDE = 16


class ImageTooSmall(ValueError):
    pass


class EmptySegment(ValueError):
    pass


class ZeroMeanFeature(ValueError):
    pass


@dataclass
class EncoderParams:
    """Four 3x3 conv layers, channels 3 -> 32 -> 64 -> 64 -> m."""

    m: int
    seed: int
    tensors: dict = field(default_factory=dict)
    widths: tuple = WIDTHS

    @classmethod
    def init(cls, m: int = 128, seed: int = 0, widths=WIDTHS) -> "EncoderParams":
        if m < 2:
            raise ValueError("feature dimension m must be >= 2")
        rng = np.random.default_rng([seed, 1])
        chans = (3,) + tuple(widths) + (m,)
        tensors = {}
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            bound = 1.0 / np.sqrt(9 * cin)
            tensors[f"encoder.conv{i}.w"] = Tensor(
                rng.uniform(-bound, bound, (3, 3, cin, cout)), requires_grad=True)
            tensors[f"encoder.conv{i}.b"] = Tensor(
                rng.uniform(-bound, bound, (cout,)), requires_grad=True)
        return cls(m=m, seed=seed, tensors=tensors, widths=tuple(widths))

    @property
    def n_layers(self) -> int:
        return len(self.tensors) // 2


def forward(images, params: EncoderParams) -> Tensor:
    """Embed a batch of images (N, H, W, 3) into unit vectors (N, H, W, m)."""
    x = tn.as_tensor(images)
    if x.ndim == 3:
        x = tn.reshape(x, (1,) + x.shape)
    n_layers = params.n_layers
    for i in range(n_layers):
        x = tn.conv2d(x, params.tensors[f"encoder.conv{i}.w"], params.tensors[f"encoder.conv{i}.b"])
        if i < n_layers - 1:
            x = tn.relu(x)
    return tn.normalize_rows(x)


def extract_features(image, params: EncoderParams, min_side: int = MIN_SIDE) -> Tensor:
    """Unit-length features for one H x W x 3 image in [0, 1]; returns H x W x m."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {data.shape}")
    if min(data.shape[:2]) < min_side:
        raise ImageTooSmall(f"image {data.shape[:2]} smaller than {min_side}x{min_side}")
    out = forward(tn.reshape(tn.as_tensor(image), (1,) + data.shape), params)
    return tn.reshape(out, data.shape[:2] + (params.m,))


def segment_feature(features, mask) -> Tensor:
    """Normalized mean of the pixel vectors selected by ``mask``.

    ``mask`` is a boolean H x W array or an array of flat pixel indices.
    """
    features = tn.as_tensor(features)
    m = features.shape[-1]
    flat = tn.reshape(features, (-1, m))
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.ravel().astype(np.int64)
    if idx.size == 0:
        raise EmptySegment("segment has no pixels")
    if idx.min() < 0 or idx.max() >= flat.shape[0]:
        raise IndexError("segment pixel index out of range")
    mean = tn.reduce_mean(flat[idx], axis=0)
    if np.linalg.norm(mean.data) < 1e-8:
        raise ZeroMeanFeature("segment mean feature vanishes")
    return tn.normalize_rows(mean)


def pool_segments(flat_features, labels: np.ndarray, n_segments: int) -> Tensor:
    """Unit mean feature for every label of a flat (P, m) feature block."""
    counts = np.bincount(labels, minlength=n_segments)
    if np.any(counts == 0):
        raise EmptySegment("a segment id has no pixels")
    sums = tn.segment_sum(flat_features, labels, n_segments)
    if np.any(np.linalg.norm(sums.data, axis=1) < 1e-8 * counts):
        raise ZeroMeanFeature("segment mean feature vanishes")
    return tn.normalize_rows(sums)
