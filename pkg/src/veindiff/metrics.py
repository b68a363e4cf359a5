"""Segmentation and biometric evaluation metrics (numpy only)."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvariantError

REPORT_KEYS = ("eer", "identification_acc", "dice", "cl_dice", "pixel_acc", "auc", "miou")


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise InvariantError(f"{name} must be binary")
    return m.astype(bool)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; nan if one class is absent."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dice_suite(pred, gt, threshold: float = 0.5):
    """Return ``(dice, pixel_acc, auc, miou)`` for a soft prediction.

    Dice of two empty masks is 1. AUC is nan when ``gt`` has a single class.
    """
    pred = np.asarray(pred, dtype=np.float64)
    g = _binary(gt, "gt")
    if pred.shape != g.shape:
        raise InvariantError(f"shapes differ: {pred.shape} vs {g.shape}")
    p = pred >= threshold
    inter = np.logical_and(p, g).sum()
    total = p.sum() + g.sum()
    dice = 1.0 if total == 0 else 2.0 * inter / total
    acc = float((p == g).mean())
    ious = []
    for a, b in ((p, g), (~p, ~g)):
        union = np.logical_or(a, b).sum()
        ious.append(1.0 if union == 0 else np.logical_and(a, b).sum() / union)
    return float(dice), acc, roc_auc(pred, g), float(np.mean(ious))


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning; pixels outside the image count as background."""
    img = np.pad(np.asarray(mask).astype(bool), 1)
    while True:
        changed = False
        for first in (True, False):
            p2 = np.roll(img, 1, 0)
            p3 = np.roll(np.roll(img, 1, 0), -1, 1)
            p4 = np.roll(img, -1, 1)
            p5 = np.roll(np.roll(img, -1, 0), -1, 1)
            p6 = np.roll(img, -1, 0)
            p7 = np.roll(np.roll(img, -1, 0), 1, 1)
            p8 = np.roll(img, 1, 1)
            p9 = np.roll(np.roll(img, 1, 0), 1, 1)
            ring = [p2, p3, p4, p5, p6, p7, p8, p9]
            count = np.sum(ring, axis=0)
            transitions = np.sum([~ring[i] & ring[(i + 1) % 8] for i in range(8)], axis=0)
            if first:
                c1 = ~(p2 & p4 & p6)
                c2 = ~(p4 & p6 & p8)
            else:
                c1 = ~(p2 & p4 & p8)
                c2 = ~(p2 & p6 & p8)
            remove = img & (count >= 2) & (count <= 6) & (transitions == 1) & c1 & c2
            if remove.any():
                img = img & ~remove
                changed = True
        if not changed:
            break
    return img[1:-1, 1:-1]


def cl_dice(pred, gt) -> float:
    """Centerline Dice between two binary masks.

    Both skeletons empty gives 1; exactly one empty gives 0.
    """
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise InvariantError(f"shapes differ: {p.shape} vs {g.shape}")
    sp, sg = skeletonize(p), skeletonize(g)
    if not sp.any() and not sg.any():
        return 1.0
    if not sp.any() or not sg.any():
        return 0.0
    tprec = np.logical_and(sp, g).sum() / sp.sum()
    tsens = np.logical_and(sg, p).sum() / sg.sum()
    if tprec + tsens == 0:
        return 0.0
    return float(2.0 * tprec * tsens / (tprec + tsens))


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    far: float
    frr: float


def far_frr_at(genuine, impostor, threshold: float) -> tuple[float, float]:
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    return float(np.mean(impostor >= threshold)), float(np.mean(genuine < threshold))


def det_curve(genuine, impostor) -> list[DetPoint]:
    """FAR/FRR at every distinct score; higher scores mean "more genuine"."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or impostor.size == 0:
        raise InvariantError("genuine and impostor score lists must be nonempty")
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    far = (impostor.size - np.searchsorted(impostor, thresholds, side="left")) / impostor.size
    frr = np.searchsorted(genuine, thresholds, side="left") / genuine.size
    return [DetPoint(float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr)]


def eer(points: list[DetPoint]) -> float:
    """Equal error rate at the FAR/FRR crossing, interpolating linearly in threshold."""
    if not points:
        raise InvariantError("empty DET sweep")
    far = np.array([p.far for p in points])
    frr = np.array([p.frr for p in points])
    diff = far - frr
    idx = np.flatnonzero(diff <= 0)
    if idx.size == 0:
        # FAR stays above FRR over the whole sweep
        return float(np.clip(0.5 * (far[-1] + frr[-1]), 0.0, 1.0))
    i = int(idx[0])
    if diff[i] == 0 or i == 0:
        return float(np.clip(0.5 * (far[i] + frr[i]), 0.0, 1.0))
    # diff changes sign between i-1 and i
    w = diff[i - 1] / (diff[i - 1] - diff[i])
    value = far[i - 1] + w * (far[i] - far[i - 1])
    return float(np.clip(value, 0.0, 1.0))


def identification_acc(predicted, actual) -> float:
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise InvariantError("predicted and actual labels differ in length")
    if predicted.size == 0:
        raise InvariantError("no predictions")
    return float(np.mean(predicted == actual))


def verification_scores(gallery_emb, gallery_labels, probe_emb, probe_labels):
    """Genuine/impostor cosine scores against per-class mean gallery embeddings."""
    gallery_emb = np.asarray(gallery_emb, dtype=np.float64)
    probe_emb = np.asarray(probe_emb, dtype=np.float64)
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    classes = np.unique(gallery_labels)
    centers = np.stack([gallery_emb[gallery_labels == c].mean(axis=0) for c in classes])
    centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    probes = probe_emb / np.maximum(np.linalg.norm(probe_emb, axis=1, keepdims=True), 1e-12)
    sims = probes @ centers.T
    own = probe_labels[:, None] == classes[None, :]
    return sims[own], sims[~own]


@dataclass
class MetricsReport:
    eer: float
    identification_acc: float
    dice: float
    cl_dice: float
    pixel_acc: float
    auc: float
    miou: float
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_text(self) -> str:
        lines = [f"# {k} = {v}" for k, v in sorted(self.metadata.items())]
        lines += [f"{k} = {getattr(self, k)!r}" for k in REPORT_KEYS]
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def read(cls, path: str) -> "MetricsReport":
        values, meta = {}, {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                target = meta if line.startswith("#") else values
                key, _, value = line.lstrip("# ").partition("=")
                target[key.strip()] = value.strip()
        missing = set(REPORT_KEYS) - set(values)
        if missing:
            raise InvariantError(f"report is missing keys {sorted(missing)}")
        return cls(**{k: float(values[k]) for k in REPORT_KEYS}, metadata=meta)


def write_det_csv(path: str, points: list[DetPoint]) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,far,frr\n")
        for p in points:
            fh.write(f"{p.threshold!r},{p.far!r},{p.frr!r}\n")


def nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else math.nan
