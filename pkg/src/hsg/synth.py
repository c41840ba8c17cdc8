"""Deterministic synthetic scenes of multi-part objects, and corpus IO.

Each object is an ellipse whose parts tile it exactly.  Parts of one object
carry deliberately dissimilar colours and textures, so only their adjacency
and co-occurrence ties them to one whole.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

# class id -> (partition scheme, per-part (rgb, pattern))
CLASSES = {
    1: ("halves", [((0.85, 0.15, 0.10), "stripes"), ((0.95, 0.85, 0.20), "solid")]),
    2: ("bands", [((0.15, 0.25, 0.85), "checker"), ((0.95, 0.95, 0.95), "solid"),
                  ((0.10, 0.55, 0.75), "stripes")]),
    3: ("quadrants", [((0.20, 0.75, 0.25), "solid"), ((0.80, 0.20, 0.75), "checker"),
                      ((0.20, 0.75, 0.25), "stripes"), ((0.80, 0.20, 0.75), "solid")]),
    4: ("core", [((0.95, 0.55, 0.10), "noise"), ((0.45, 0.15, 0.55), "stripes")]),
}
BACKGROUNDS = ("gradient", "noise", "stripes")


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_radius: int = 9
    max_radius: int = 16
    n_classes: int = 4
    seed: int = 0
    max_tries: int = 60


@dataclass
class SceneSample:
    image: np.ndarray
    gt_parts: np.ndarray
    gt_objects: np.ndarray
    gt_semantic: np.ndarray
    metadata: dict = field(default_factory=dict)


def _pattern(rng, kind: str, shape) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "solid":
        return np.zeros(shape)
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 5.0)
        return 0.22 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    if kind == "checker":
        return 0.2 * (((yy // 3) + (xx // 3)) % 2 * 2 - 1)
    if kind == "noise":
        return ndimage.gaussian_filter(rng.normal(0, 0.25, shape), 0.7)
    raise ValueError(kind)


def _background(rng, size) -> np.ndarray:
    kind = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    base = rng.uniform(0.3, 0.55, 3) * np.array([1.0, 0.95, 0.85])
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "gradient":
        direction = rng.normal(size=2)
        ramp = (yy * direction[0] + xx * direction[1]) * 0.15
        img = base + ramp[..., None]
    elif kind == "noise":
        img = base + ndimage.gaussian_filter(rng.normal(0, 0.12, (size, size)), 1.5)[..., None]
    else:
        img = base + 0.06 * np.sin(2 * np.pi * yy * rng.uniform(4, 8))[..., None]
    return img


def _part_index(scheme: str, u: np.ndarray, v: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Part id inside an ellipse from local coords (u along major axis, v minor, r radius)."""
    if scheme == "halves":
        return (u >= 0).astype(int)
    if scheme == "bands":
        return np.digitize(u, [-1 / 3, 1 / 3])
    if scheme == "quadrants":
        return (u >= 0).astype(int) * 2 + (v >= 0).astype(int)
    if scheme == "core":
        return (r >= 0.55).astype(int)
    raise ValueError(scheme)


def _place(rng, spec: SceneSpec, occupied: np.ndarray):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(spec.max_tries):
        a = rng.uniform(spec.min_radius, spec.max_radius)
        b = rng.uniform(0.65, 1.0) * a
        cy, cx = rng.uniform(b, size - b), rng.uniform(b, size - b)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        r = np.sqrt(u * u + v * v)
        mask = r <= 1.0
        if mask.sum() < 40:
            continue
        if (ndimage.binary_dilation(mask) & occupied).any():
            continue
        return mask, u, v, r
    return None


def synth_scene(spec: SceneSpec, index: int) -> SceneSample:
    """Scene ``index`` of the corpus described by ``spec``; pure in (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size
    img = _background(rng, size)
    parts = np.zeros((size, size), dtype=np.int64)
    objects = np.zeros((size, size), dtype=np.int64)
    semantic = np.zeros((size, size), dtype=np.int64)
    wanted = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((size, size), dtype=bool)
    placed, next_part = 0, 1
    for _ in range(wanted):
        found = _place(rng, spec, occupied)
        if found is None:
            continue
        mask, u, v, r = found
        cls = int(rng.integers(1, spec.n_classes + 1))
        scheme, palette = CLASSES[(cls - 1) % len(CLASSES) + 1]
        pid = _part_index(scheme, u, v, r)
        placed += 1
        for k, (rgb, kind) in enumerate(palette):
            pm = mask & (pid == k)
            if not pm.any():
                continue
            color = np.clip(np.array(rgb) + rng.uniform(-0.06, 0.06, 3), 0, 1)
            tex = _pattern(rng, kind, (size, size))
            img[pm] = color + tex[pm][:, None]
            parts[pm] = next_part
            next_part += 1
        objects[mask] = placed
        semantic[mask] = cls
        occupied |= mask
    image = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    sample = SceneSample(image, parts, objects, semantic,
                         {"requested_objects": wanted, "objects": placed,
                          "placement_failures": wanted - placed})
    if not nests(parts, objects):
        raise AssertionError("part map does not nest inside object map")
    return sample


def nests(fine: np.ndarray, coarse: np.ndarray) -> bool:
    pairs = np.unique(np.stack([fine.ravel(), coarse.ravel()]), axis=1)
    return len(np.unique(pairs[0])) == pairs.shape[1]


# ---------------------------------------------------------------------------
# corpus on disk

SPLITS = ("train", "eval")


def write_sample(directory: Path, i: int, sample: SceneSample) -> list:
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"img_{i:05d}.ppm", f"parts_{i:05d}.pgm", f"objects_{i:05d}.pgm", f"sem_{i:05d}.pgm"]
    write_ppm(directory / names[0], sample.image)
    write_pgm(directory / names[1], sample.gt_parts)
    write_pgm(directory / names[2], sample.gt_objects)
    write_pgm(directory / names[3], sample.gt_semantic)
    return names


def write_corpus(out_dir, spec: SceneSpec, n_train: int = 200, n_eval: int = 50) -> Path:
    """Write ``{train,eval}/`` sample files and a sha-256 ``manifest.txt``."""
    out = Path(out_dir)
    counts = {"train": n_train, "eval": n_eval}
    offset = {"train": 0, "eval": n_train}
    for split in SPLITS:
        for i in range(counts[split]):
            write_sample(out / split, i, synth_scene(spec, offset[split] + i))
    write_manifest(out)
    return out


def write_manifest(root) -> Path:
    root = Path(root)
    lines = []
    for split in SPLITS:
        d = root / split
        if not d.is_dir():
            continue
        for name in sorted(os.listdir(d)):
            digest = hashlib.sha256((d / name).read_bytes()).hexdigest()
            lines.append(f"{digest}  {split}/{name}")
    path = root / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def split_size(root, split: str) -> int:
    return len(list((Path(root) / split).glob("img_*.ppm")))


def load_sample(root, split: str, i: int) -> SceneSample:
    d = Path(root) / split
    return SceneSample(read_ppm(d / f"img_{i:05d}.ppm"), read_pgm(d / f"parts_{i:05d}.pgm"),
                       read_pgm(d / f"objects_{i:05d}.pgm"), read_pgm(d / f"sem_{i:05d}.pgm"))


def load_split(root, split: str) -> list:
    n = split_size(root, split)
    if n == 0:
        raise FileNotFoundError(f"no samples in {Path(root) / split}")
    return [load_sample(root, split, i) for i in range(n)]
