"""
Clustering evaluation metrics: pair-counting confusion, global and
individual Fowlkes-Mallows index, normalized mutual information and purity.

Pair counts come from the contingency table, never from pair enumeration.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from viewselect.clustering import ClusterAssignment
from utils.errors import ValidationError

Labels = Union[ClusterAssignment, Sequence, np.ndarray]


class MetricId(str, Enum):
    """Clustering metrics"""
    FM = "FM"
    NMI = "NMI"
    PUR = "PUR"


@dataclass(frozen=True)
class PairConfusion:
    """Pair counts over all unordered pairs, globally and per item"""
    tp: int
    fp: int
    fn: int
    tn: int
    per_item_tp: np.ndarray
    per_item_fp: np.ndarray
    per_item_fn: np.ndarray

    @property
    def n(self) -> int:
        return len(self.per_item_tp)


def _as_labels(labels: Labels) -> np.ndarray:
    if isinstance(labels, ClusterAssignment):
        return np.asarray(labels.labels)
    return np.asarray(labels)


def contingency_table(pred: Labels, truth: Labels, min_items: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Build the predicted-cluster x truth-class count table

    Args:
        pred: Predicted labels or ClusterAssignment
        truth: Ground-truth labels of any hashable type
        min_items: Minimum accepted length

    Returns:
        (table, pred_codes, truth_codes)

    Raises:
        ValidationError: On length mismatch or too few items
    """
    p = _as_labels(pred)
    t = _as_labels(truth)
    if p.shape[0] != t.shape[0]:
        raise ValidationError("Prediction and truth lengths differ", context={"pred": p.shape[0], "truth": t.shape[0]})
    if p.shape[0] < min_items:
        raise ValidationError(f"At least {min_items} items are required", context={"n": p.shape[0]})
    _, p_codes = np.unique(p, return_inverse=True)
    _, t_codes = np.unique(t, return_inverse=True)
    table = np.zeros((p_codes.max() + 1, t_codes.max() + 1), dtype=np.int64)
    np.add.at(table, (p_codes, t_codes), 1)
    return table, p_codes, t_codes


def _pairs(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) // 2


def pair_confusion(pred: Labels, truth: Labels) -> PairConfusion:
    """
    Count true/false positive/negative pairs

    Args:
        pred: Predicted labels
        truth: Ground-truth labels

    Returns:
        PairConfusion with global and per-item counts

    Raises:
        ValidationError: On length mismatch or n < 2
    """
    table, p_codes, t_codes = contingency_table(pred, truth, min_items=2)
    n = p_codes.shape[0]
    cluster_sizes = table.sum(axis=1)
    class_sizes = table.sum(axis=0)

    tp = int(_pairs(table).sum())
    fp = int(_pairs(cluster_sizes).sum()) - tp
    fn = int(_pairs(class_sizes).sum()) - tp
    tn = n * (n - 1) // 2 - tp - fp - fn

    cell = table[p_codes, t_codes]
    return PairConfusion(
        tp=tp, fp=fp, fn=fn, tn=tn,
        per_item_tp=cell - 1,
        per_item_fp=cluster_sizes[p_codes] - cell,
        per_item_fn=class_sizes[t_codes] - cell,
    )


def _fm(tp, fp, fn):
    """TP / sqrt((TP+FP)(TP+FN)) with 0 on empty denominators"""
    tp = np.asarray(tp, dtype=np.float64)
    denom = np.sqrt((tp + fp) * (tp + fn))
    return np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)


def fm_global(conf: PairConfusion) -> float:
    """Fowlkes-Mallows index of the whole clustering"""
    return float(_fm(conf.tp, conf.fp, conf.fn))


def fm_individual(conf: PairConfusion, item: int) -> float:
    """
    Fowlkes-Mallows index restricted to pairs containing one item

    Raises:
        ValidationError: If item is out of range
    """
    if not 0 <= item < conf.n:
        raise ValidationError("Item index out of range", context={"item": item, "n": conf.n})
    return float(_fm(conf.per_item_tp[item], conf.per_item_fp[item], conf.per_item_fn[item]))


def fm_individual_all(conf: PairConfusion) -> np.ndarray:
    """Individual Fowlkes-Mallows index of every item"""
    return _fm(conf.per_item_tp, conf.per_item_fp, conf.per_item_fn)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred: Labels, truth: Labels) -> float:
    """
    Normalized mutual information with geometric-mean normalization.

    1.0 when both partitions are single blocks, 0.0 when exactly one is.
    """
    table, p_codes, _ = contingency_table(pred, truth, min_items=1)
    n = p_codes.shape[0]
    h_pred = _entropy(table.sum(axis=1), n)
    h_truth = _entropy(table.sum(axis=0), n)
    if h_pred == 0.0 and h_truth == 0.0:
        return 1.0
    if h_pred == 0.0 or h_truth == 0.0:
        return 0.0

    joint = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nonzero = joint > 0
    mutual = float((joint[nonzero] * np.log(joint[nonzero] / outer[nonzero])).sum())
    return float(np.clip(mutual / np.sqrt(h_pred * h_truth), 0.0, 1.0))


def purity(pred: Labels, truth: Labels) -> float:
    """Fraction of items in the majority truth class of their cluster"""
    table, p_codes, _ = contingency_table(pred, truth, min_items=1)
    return float(table.max(axis=1).sum() / p_codes.shape[0])


def score_metrics(pred: Labels, truth: Labels) -> Dict[MetricId, float]:
    """FM, NMI and purity of one clustering"""
    return {
        MetricId.FM: fm_global(pair_confusion(pred, truth)),
        MetricId.NMI: nmi(pred, truth),
        MetricId.PUR: purity(pred, truth),
    }
