"""Augmented views with exact spatial records, and label warping into views."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

MIN_VIEW = 16
LUMA = np.array([0.299, 0.587, 0.114])


class CropImpossible(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Photometric:
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    grayscale: bool = False
    blur_sigma: float = 0.0


@dataclass(frozen=True)
class ViewTransform:
    """Crop (top, left, height, width) -> resize to ``scale`` -> optional h-flip."""

    crop: tuple
    flip_h: bool
    scale: tuple
    photometric: Photometric = Photometric()

    def source_coords(self):
        """Continuous (row, col) in the original image for every view pixel centre."""
        top, left, ch, cw = self.crop
        oh, ow = self.scale
        r = top + (np.arange(oh) + 0.5) * ch / oh - 0.5
        cols = np.arange(ow)
        if self.flip_h:
            cols = ow - 1 - cols
        c = left + (cols + 0.5) * cw / ow - 0.5
        return r, c

    def source_pixels(self):
        """Nearest original (row, col) integer index for every view pixel."""
        top, left, ch, cw = self.crop
        oh, ow = self.scale
        r = top + ((2 * np.arange(oh) + 1) * ch) // (2 * oh)
        cols = np.arange(ow)
        if self.flip_h:
            cols = ow - 1 - cols
        c = left + ((2 * cols + 1) * cw) // (2 * ow)
        return r, c


@dataclass(frozen=True)
class AugConfig:
    view_size: int = 32
    crop_min: float = 0.5
    crop_max: float = 1.0
    flip_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    gray_prob: float = 0.1
    blur_prob: float = 0.2
    blur_sigma_max: float = 1.0
    min_overlap: float = 0.25
    max_tries: int = 50

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(view_size=0, crop_min=1.0, crop_max=1.0, flip_prob=0.0, brightness=0.0,
                   contrast=0.0, saturation=0.0, gray_prob=0.0, blur_prob=0.0, min_overlap=0.0)


@dataclass
class ViewBatch:
    instance_id: int
    views: list = field(default_factory=list)

    @property
    def transforms(self):
        return [t for _, t in self.views]

    @property
    def images(self):
        return [img for img, _ in self.views]


def _overlap(a, b) -> int:
    h = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    w = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    return max(h, 0) * max(w, 0)


def _sample_crop(rng, h, w, cfg):
    ch = int(round(h * rng.uniform(cfg.crop_min, cfg.crop_max)))
    cw = int(round(w * rng.uniform(cfg.crop_min, cfg.crop_max)))
    ch, cw = min(max(ch, MIN_VIEW), h), min(max(cw, MIN_VIEW), w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


def _photometric(img: np.ndarray, p: Photometric) -> np.ndarray:
    out = img
    if p.brightness:
        out = out + p.brightness
    if p.contrast:
        mean = out.mean()
        out = (out - mean) * (1.0 + p.contrast) + mean
    if p.saturation:
        gray = (out @ LUMA)[..., None]
        out = gray + (out - gray) * (1.0 + p.saturation)
    if p.grayscale:
        out = np.repeat((out @ LUMA)[..., None], 3, axis=2)
    if p.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="reflect")
    return np.clip(out, 0.0, 1.0)


def apply_view(image: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Bilinear resample of ``image`` through ``t``, then photometric jitter."""
    image = np.asarray(image, dtype=np.float64)
    r, c = t.source_coords()
    rr, cc = np.meshgrid(r, c, indexing="ij")
    out = np.stack([ndimage.map_coordinates(image[..., ch], [rr, cc], order=1, mode="nearest")
                    for ch in range(image.shape[2])], axis=-1)
    return _photometric(out, t.photometric)


def make_views(image, n_views: int, cfg: AugConfig, seed, instance_id: int = 0) -> ViewBatch:
    """Sample ``n_views`` augmented views whose crops pairwise overlap."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h < MIN_VIEW or w < MIN_VIEW:
        raise CropImpossible(f"image {h}x{w} below {MIN_VIEW}x{MIN_VIEW}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    crops = []
    for _ in range(n_views):
        for _ in range(cfg.max_tries):
            crop = _sample_crop(rng, h, w, cfg)
            if all(_overlap(crop, o) >= cfg.min_overlap * h * w for o in crops):
                break
        else:
            crop = (0, 0, h, w)
        crops.append(crop)
    batch = ViewBatch(instance_id)
    for crop in crops:
        flip = bool(rng.random() < cfg.flip_prob)
        scale = (cfg.view_size, cfg.view_size) if cfg.view_size else (crop[2], crop[3])
        photo = Photometric(
            brightness=float(rng.uniform(-cfg.brightness, cfg.brightness)),
            contrast=float(rng.uniform(-cfg.contrast, cfg.contrast)),
            saturation=float(rng.uniform(-cfg.saturation, cfg.saturation)),
            grayscale=bool(rng.random() < cfg.gray_prob),
            blur_sigma=float(rng.uniform(0.1, cfg.blur_sigma_max)) if rng.random() < cfg.blur_prob else 0.0,
        )
        t = ViewTransform(crop, flip, scale, photo)
        batch.views.append((apply_view(image, t), t))
    return batch


def warp_labels(labels: np.ndarray, t: ViewTransform, original_shape=None) -> np.ndarray:
    """Nearest-neighbour resampling of an original-frame label map into the view."""
    labels = np.asarray(labels)
    top, left, ch, cw = t.crop
    if original_shape is not None and labels.shape != tuple(original_shape):
        raise DimensionMismatch(f"{labels.shape} vs {original_shape}")
    if top + ch > labels.shape[0] or left + cw > labels.shape[1] or top < 0 or left < 0:
        raise DimensionMismatch(f"crop {t.crop} outside labels {labels.shape}")
    r, c = t.source_pixels()
    return labels[np.ix_(r, c)]


def flipped(t: ViewTransform) -> ViewTransform:
    return replace(t, flip_h=not t.flip_h)
