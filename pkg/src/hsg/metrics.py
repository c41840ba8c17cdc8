"""Segmentation evaluation: NFCovering, mIoU / accuracy, k-NN segment labeling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure


class NoForeground(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptyBank(ValueError):
    pass


@dataclass
class GroundTruth:
    semantic: np.ndarray
    background: int
    foreground_regions: list = field(default_factory=list)

    @classmethod
    def from_semantic(cls, semantic, background: int = 0) -> "GroundTruth":
        """Foreground regions = 4-connected components of each non-background class."""
        semantic = np.asarray(semantic)
        comps = measure.label(np.where(semantic == background, -1, semantic),
                              background=-1, connectivity=1)
        regions = [comps == i for i in range(1, comps.max() + 1)]
        return cls(semantic, background, regions)


@dataclass
class SegmentBank:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls, m: int) -> "SegmentBank":
        return cls(np.zeros((0, m)), np.zeros(0, dtype=np.int64))

    def extend(self, features, labels) -> "SegmentBank":
        return SegmentBank(np.concatenate([self.features, np.asarray(features)]),
                           np.concatenate([self.labels, np.asarray(labels, dtype=np.int64)]))


def nfcovering(pred: np.ndarray, gt: GroundTruth) -> float:
    """Mean over ground-truth foreground regions of the best IoU with any predicted region."""
    pred = np.asarray(pred)
    if pred.shape != gt.semantic.shape:
        raise DimensionMismatch(f"{pred.shape} vs {gt.semantic.shape}")
    if not gt.foreground_regions:
        raise NoForeground("ground truth has no foreground region")
    _, flat = np.unique(pred, return_inverse=True)
    flat = flat.ravel()
    n_pred = flat.max() + 1
    sizes = np.bincount(flat, minlength=n_pred)
    total = 0.0
    for region in gt.foreground_regions:
        region = region.ravel()
        inter = np.bincount(flat[region], minlength=n_pred)
        union = sizes + region.sum() - inter
        total += float((inter / union).max())
    return total / len(gt.foreground_regions)


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_accuracy(pred, gt, n_classes: int) -> tuple[float, float]:
    """Mean IoU over classes present in pred or gt, and overall pixel accuracy."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"{pred.shape} vs {gt.shape}")
    cm = confusion_matrix(pred, gt, n_classes).astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    miou = float((tp[present] / union[present]).mean())
    return miou, float(tp.sum() / cm.sum())


def knn_label_segments(queries, bank: SegmentBank, k: int = 5) -> np.ndarray:
    """Majority label among the k most cosine-similar bank entries.

    Vote ties go to whichever tied label has the nearest member.
    """
    if len(bank) == 0:
        raise EmptyBank("segment bank is empty")
    if len(bank) < k:
        raise EmptyBank(f"bank of {len(bank)} entries cannot supply {k} neighbours")
    q = np.asarray(queries, dtype=np.float64)
    sims = q @ bank.features.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    out = np.empty(len(q), dtype=np.int64)
    for i, nbrs in enumerate(order):
        labels = bank.labels[nbrs]
        votes: dict = {}
        for rank, lab in enumerate(labels.tolist()):
            count, first = votes.get(lab, (0, rank))
            votes[lab] = (count + 1, first)
        out[i] = min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1]))
    return out


def majority_label(labels: np.ndarray, n_classes: int) -> int:
    return int(np.bincount(np.asarray(labels).ravel(), minlength=n_classes).argmax())
