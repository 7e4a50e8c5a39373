"""Classification AUC, lesion-localisation PR-AUC over IoU thresholds, diversity reporting."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .imaging import resize_bilinear

IOU_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 11))
EXCLUDE_BELOW = 0.1


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_or_nan(scores, labels):
    try:
        return roc_auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def binarize_map(similarity_map, size, threshold=0.5):
    """Upsample a similarity map bilinearly to ``size`` and keep values strictly above ``threshold``."""
    return resize_bilinear(similarity_map, size) > threshold


def iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class LocalisationCase:
    image: int
    probability: float  # ensemble cancer probability
    region: np.ndarray
    mask: np.ndarray
    iou: float = None

    def __post_init__(self):
        if self.region.shape != self.mask.shape:
            raise ValueError("region and mask must share the image dimensions")
        if self.iou is None:
            self.iou = iou(self.region, self.mask)

    @property
    def excluded(self):
        return self.probability < EXCLUDE_BELOW


def average_precision(confidences, hits, n_relevant):
    """Sum over distinct confidence cuts (descending) of ``(R_n - R_{n-1}) * P_n``."""
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(hits, dtype=bool)
    if n_relevant == 0 or conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    conf, hits = conf[order], hits[order]
    tp = np.cumsum(hits)
    # last index of each run of equal confidences
    ends = np.flatnonzero(np.r_[conf[1:] != conf[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / n_relevant
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_auc_at_iou(cases, iou_threshold, recall_base="cases"):
    """Localisation PR-AUC: one detection per non-excluded case, confidence = cancer probability.

    A detection is correct when its region reaches ``iou_threshold`` IoU with
    the mask. Recall is relative to the number of evaluated cases (one lesion
    each); ``recall_base="hits"`` instead normalises by the number of correct
    detections.
    """
    kept = [c for c in cases if not c.excluded]
    if not kept:
        raise UndefinedMetricError("no evaluable localisation cases (all excluded or none given)")
    hits = np.array([c.iou >= iou_threshold for c in kept])
    conf = np.array([c.probability for c in kept])
    if recall_base == "cases":
        base = len(kept)
    elif recall_base == "hits":
        base = int(hits.sum())
    else:
        raise ValueError(f"unknown recall_base {recall_base!r}")
    return average_precision(conf, hits, base)


def localisation_sweep(cases, thresholds=IOU_THRESHOLDS):
    return [(float(t), pr_auc_at_iou(cases, t)) for t in thresholds]


def sweep_csv(curve):
    return "iou_threshold,pr_auc\n" + "".join(f"{t:.2f},{v:.6f}\n" for t, v in curve)


def localisation_cases(state, images, masks, prediction, threshold=0.5):
    """Cases for every image with a ground-truth mask, using the top-scoring cancer prototype's map."""
    protos = state.prototypes
    cancer = protos.of_class(1)
    size = (state.config.height, state.config.width)
    cases = []
    for i, mask in enumerate(masks):
        if mask is None:
            continue
        m = cancer[int(np.argmax(prediction.scores[i, cancer]))]
        region = binarize_map(prediction.maps[i, m], size, threshold)
        cases.append(LocalisationCase(i, float(prediction.ensemble_probs[i, 1]), region, np.asarray(mask, dtype=bool)))
    return cases


def localisation_csv(cases):
    lines = ["image,probability,excluded,iou,region_area,mask_area"]
    for c in cases:
        lines.append(
            f"{c.image},{c.probability:.6f},{int(c.excluded)},{c.iou:.6f},{int(c.region.sum())},{int(c.mask.sum())}"
        )
    return "\n".join(lines) + "\n"
