"""Training, hierarchical segmentation, evaluation and gradient checking."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import encoder as enc
from . import losses
from . import metrics
from . import oversegment as ovs
from . import synth
from . import tensor as tn
from . import transformer as tf
from .config import RunConfig
from .multiview import make_views, warp_labels
from .netpbm import to_unit
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_edge", "loss_levels", "loss_goodness", "total")
MAX_CONSECUTIVE_ABORTS = 3
# failures that abort one step rather than the run
STEP_ERRORS = (ValueError, ArithmeticError)


@dataclass
class Model:
    encoder: enc.EncoderParams
    transformer: tf.TransformerParams

    @classmethod
    def init(cls, cfg: RunConfig) -> "Model":
        return cls(enc.EncoderParams.init(cfg.m, cfg.seed),
                   tf.TransformerParams.init(cfg.m, cfg.levels, cfg.seed))

    @property
    def tensors(self) -> dict:
        return {**self.encoder.tensors, **self.transformer.tensors}

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        tensors = self.tensors
        missing = set(tensors) ^ set(arrays)
        if missing:
            raise ckpt_io.IncompatibleCheckpoint(f"tensor names differ: {sorted(missing)[:5]}")
        for name, t in tensors.items():
            if t.shape != arrays[name].shape:
                raise ckpt_io.IncompatibleCheckpoint(f"{name}: {arrays[name].shape} vs {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def frozen(self) -> "Model":
        """Copy whose tensors are constants, so forward passes record no tape."""
        e = enc.EncoderParams(self.encoder.m, self.encoder.seed,
                              {k: Tensor(v.data) for k, v in self.encoder.tensors.items()},
                              self.encoder.widths)
        t = tf.TransformerParams(self.transformer.m, self.transformer.levels,
                                 {k: Tensor(v.data) for k, v in self.transformer.tensors.items()},
                                 self.transformer.heads, self.transformer.layers,
                                 self.transformer.dropout)
        return Model(e, t)


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> tuple[Model, RunConfig]:
    cfg = RunConfig.from_dict(ck.config)
    model = Model.init(cfg)
    model.load_arrays(ck.tensors)
    return model, cfg


def make_checkpoint(model: Model, cfg: RunConfig, step: int) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(cfg.to_dict(), step, model.arrays(),
                              {"scheme": "per-step", "seed": cfg.seed, "next_step": step + 1})


def learning_rate(cfg: RunConfig, step: int, total: int) -> float:
    """Step decay at 32%, 56% and 75% of the schedule (1-based ``step``)."""
    milestones = [int(f * total) for f in (0.32, 0.56, 0.75)]
    return cfg.lr * cfg.lr_decay ** sum(step > m for m in milestones)


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    step: int
    loss_edge: float
    loss_levels: float
    loss_goodness: float
    total: float

    def row(self):
        return [self.step, repr(self.loss_edge), repr(self.loss_levels),
                repr(self.loss_goodness), repr(self.total)]


@dataclass
class TrainData:
    images: list
    regions: list

    @classmethod
    def from_corpus(cls, root, cfg: RunConfig) -> "TrainData":
        samples = synth.load_split(root, "train")
        images = [to_unit(s.image) for s in samples]
        # coherent regions depend only on the source image; computed once
        regions = [ovs.coherent_regions(img, cfg.region_target) for img in images]
        return cls(images, regions)


def forward_losses(model: Model, cfg: RunConfig, data: TrainData, step: int):
    """Build the full objective for one step; returns (total, components)."""
    rng = np.random.default_rng([cfg.seed, 7, step])
    loss_cfg = cfg.loss_config()
    aug = cfg.aug_config()
    chosen = rng.choice(len(data.images), size=min(cfg.batch_size, len(data.images)), replace=False)

    view_images, view_meta = [], []
    for b, i in enumerate(chosen):
        batch = make_views(data.images[i], cfg.views, aug, rng, instance_id=b)
        for img, t in batch.views:
            view_images.append(img)
            view_meta.append((b, warp_labels(data.regions[i], t)))
    views = np.stack(view_images)
    n_views, h, w, _ = views.shape
    pix = h * w

    feats = enc.forward(views, model.encoder)
    flat = tn.reshape(feats, (n_views * pix, cfg.m))

    cluster_ids, seg_ids = [], []
    seg_inst, seg_region, seg_cluster, cluster_inst = [], [], [], []
    n_clusters = n_segs = 0
    for v, (b, region_map) in enumerate(view_meta):
        g0 = ovs.base_grouping(feats.data[v], cfg.grid_rows, cfg.grid_cols, cfg.kmeans_iters)
        segs = ovs.refine_segments(g0, region_map)
        k0, ks = int(g0.max()) + 1, int(segs.max()) + 1
        first = np.unique(segs.ravel(), return_index=True)[1]
        cluster_ids.append(g0.ravel() + n_clusters)
        seg_ids.append(segs.ravel() + n_segs)
        seg_inst.extend([b] * ks)
        seg_region.extend(region_map.ravel()[first].tolist())
        seg_cluster.extend((g0.ravel()[first] + n_clusters).tolist())
        cluster_inst.extend([b] * k0)
        n_clusters += k0
        n_segs += ks
    cluster_ids = np.concatenate(cluster_ids)
    seg_ids = np.concatenate(seg_ids)
    seg_inst, seg_region = np.array(seg_inst), np.array(seg_region)
    seg_cluster, cluster_inst = np.array(seg_cluster), np.array(cluster_inst)

    x0 = enc.pool_segments(flat, cluster_ids, n_clusters)
    u = enc.pool_segments(flat, seg_ids, n_segs)

    n_levels = len(cfg.levels)
    cluster_group = [np.zeros(n_clusters, dtype=np.int64) for _ in range(n_levels)]
    goodness = []
    for b in range(len(chosen)):
        rows = np.flatnonzero(cluster_inst == b)
        x0b = x0[rows]
        hier = tf.hierarchy_forward(x0b, None, model.transformer, train=True, rng=rng)
        graph = losses.build_affinity(x0b.data, loss_cfg.k_affinity)
        goodness.append(losses.goodness_loss(hier.soft[1:], graph, hier.z[1:]))
        for lv in range(n_levels):
            cluster_group[lv][rows] = hier.groups[lv + 1]
    l_good = tn.reduce_mean(tn.concat([tn.reshape(g, (1,)) for g in goodness]))

    anchor_pix = np.concatenate([
        v * pix + rng.choice(pix, size=min(cfg.anchors, pix), replace=False)
        for v in range(n_views)])
    anchor_seg = seg_ids[anchor_pix]
    logits = (flat[anchor_pix] @ tn.transpose(u)) * (1.0 / loss_cfg.temperature)

    def contrast(seg_group):
        sets = losses.build_contrast_sets(seg_inst, seg_group, anchor_seg)
        return losses.contrastive_from_logits(logits[sets.anchors], sets)

    l_edge = contrast(seg_region)
    l_levels = [contrast(cluster_group[lv][seg_cluster]) for lv in range(n_levels)]
    total = losses.total_loss(l_edge, l_levels, l_good, loss_cfg)
    parts = (l_edge.item(), float(sum(t.item() for t in l_levels)), l_good.item(), total.item())
    return total, parts


def sgd_update(model: Model, grads: dict, lr: float, weight_decay: float) -> None:
    for t in model.tensors.values():
        g = grads.get(t)
        if g is None:
            g = np.zeros_like(t.data)
        t.data = t.data - lr * (g + weight_decay * t.data)


def train_step(model: Model, cfg: RunConfig, data: TrainData, step: int, total_steps: int) -> StepResult:
    loss, (le, ll, lg, lt) = forward_losses(model, cfg, data, step)
    if not math.isfinite(lt):
        raise ArithmeticError(f"non-finite loss at step {step}")
    grads = tn.backward(loss)
    sgd_update(model, grads, learning_rate(cfg, step, total_steps), cfg.weight_decay)
    return StepResult(step, le, ll, lg, lt)


@dataclass
class TrainResult:
    model: Model
    config: RunConfig
    step: int
    log: list = field(default_factory=list)

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return make_checkpoint(self.model, self.config, self.step)


def train(cfg: RunConfig, resume: ckpt_io.Checkpoint | None = None, data: TrainData | None = None,
          out_dir=None, progress=None) -> TrainResult:
    """Run (or resume) training; writes ``checkpoint.hsg`` and ``loss_log.csv`` under ``out_dir``."""
    data = data or TrainData.from_corpus(cfg.corpus, cfg)
    model = Model.init(cfg)
    start = 0
    if resume is not None:
        model.load_arrays(resume.tensors)
        start = resume.step
    total_steps = cfg.total_steps(len(data.images))
    last = total_steps if not cfg.max_steps else min(total_steps, cfg.max_steps)
    result = TrainResult(model, cfg, start)
    aborted = 0
    for step in range(start + 1, last + 1):
        try:
            res = train_step(model, cfg, data, step, total_steps)
        except STEP_ERRORS as exc:
            aborted += 1
            log.warning("step %d aborted: %s: %s", step, type(exc).__name__, exc)
            if aborted > MAX_CONSECUTIVE_ABORTS:
                raise RuntimeError(f"{aborted} consecutive aborted steps; last: {exc}") from exc
            result.step = step
            continue
        aborted = 0
        result.log.append(res)
        result.step = step
        if progress is not None:
            progress(res)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_io.save(out / "checkpoint.hsg", result.checkpoint())
        write_loss_log(out / "loss_log.csv", result.log, append=resume is not None)
    return result


def write_loss_log(path, rows, append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow(r.row())


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss_edge"]), float(r["loss_levels"]),
                 float(r["loss_goodness"]), float(r["total"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# inference


@dataclass
class Segmentation:
    levels: list
    base_features: np.ndarray
    base_labels: np.ndarray


def segment_image(model: Model, cfg: RunConfig, image: np.ndarray) -> Segmentation:
    """Hierarchical segmentation of one float image; no coherent regions involved."""
    frozen = model if not any(t.requires_grad for t in model.tensors.values()) else model.frozen()
    feats = enc.extract_features(image, frozen.encoder).data
    h, w, m = feats.shape
    g0 = ovs.base_grouping(feats, cfg.grid_rows, cfg.grid_cols, cfg.kmeans_iters)
    n0 = int(g0.max()) + 1
    sums = np.zeros((n0, m))
    np.add.at(sums, g0.ravel(), feats.reshape(-1, m))
    x0 = sums / np.linalg.norm(sums, axis=1, keepdims=True)
    hier = tf.hierarchy_forward(x0, g0, frozen.transformer, train=False)
    maps = [ovs.relabel(lab)[0] for lab in hier.pixel_labels]
    for fine, coarse in zip(maps, maps[1:]):
        if not tf.is_merge(fine, coarse):
            raise AssertionError("emitted hierarchy is not a merge")
    return Segmentation(maps, x0, g0)


def _cluster_labels(seg: Segmentation, semantic: np.ndarray, n_classes: int) -> np.ndarray:
    n0 = len(seg.base_features)
    counts = np.zeros((n0, n_classes), dtype=np.int64)
    np.add.at(counts, (seg.base_labels.ravel(), semantic.ravel()), 1)
    return counts.argmax(axis=1)


def build_bank(model: Model, cfg: RunConfig, samples) -> metrics.SegmentBank:
    n_classes = synth.SceneSpec().n_classes + 1
    feats, labels = [], []
    for s in samples:
        seg = segment_image(model, cfg, to_unit(s.image))
        feats.append(seg.base_features)
        labels.append(_cluster_labels(seg, s.gt_semantic, n_classes))
    return metrics.SegmentBank(np.concatenate(feats), np.concatenate(labels))


def evaluate(model: Model, cfg: RunConfig, root=None, split: str = "eval",
             bank_split: str = "train", k: int | None = None) -> dict:
    """NFCovering per level plus k-NN retrieval mIoU / accuracy and the majority baseline."""
    root = root or cfg.corpus
    k = k or cfg.knn_k
    model = model.frozen()
    n_classes = synth.SceneSpec().n_classes + 1
    bank_samples = synth.load_split(root, bank_split)
    bank = build_bank(model, cfg, bank_samples)
    if len(bank) == 0:
        raise metrics.EmptyBank("bank split produced no segments")
    majority = metrics.majority_label(np.concatenate([s.gt_semantic.ravel() for s in bank_samples]),
                                      n_classes)
    samples = synth.load_split(root, split)
    n_levels = len(cfg.levels) + 1
    cover = [[] for _ in range(n_levels)]
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    cm_base = np.zeros_like(cm)
    for s in samples:
        seg = segment_image(model, cfg, to_unit(s.image))
        gt = metrics.GroundTruth.from_semantic(s.gt_semantic)
        if gt.foreground_regions:
            for lv, lab in enumerate(seg.levels):
                cover[lv].append(metrics.nfcovering(lab, gt))
        pred = metrics.knn_label_segments(seg.base_features, bank, k)[seg.base_labels]
        cm += metrics.confusion_matrix(pred, s.gt_semantic, n_classes)
        cm_base += metrics.confusion_matrix(np.full_like(s.gt_semantic, majority), s.gt_semantic, n_classes)
    report = {}
    for lv in range(n_levels):
        report[f"nfcovering_level{lv}"] = float(np.mean(cover[lv])) if cover[lv] else float("nan")
    report["miou"], report["accuracy"] = _scores(cm)
    report["baseline_miou"], report["baseline_accuracy"] = _scores(cm_base)
    report["knn_k"] = k
    report["n_images"] = len(samples)
    report["bank_segments"] = len(bank)
    return report


def _scores(cm: np.ndarray) -> tuple[float, float]:
    cm = cm.astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    present = union > 0
    return float((tp[present] / union[present]).mean()), float(tp.sum() / cm.sum())


def write_report(path, report: dict) -> None:
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def format_report(report: dict) -> str:
    width = max(len(k) for k in report)
    return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in report.items())


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = float(value)
    return out
