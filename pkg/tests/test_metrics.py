"""
Tests for clustering metrics against brute-force pair enumeration
"""

import itertools
import math

import numpy as np
import pytest

from viewselect.clustering import ClusterAssignment
from viewselect.metrics import (
    MetricId,
    contingency_table,
    fm_global,
    fm_individual,
    fm_individual_all,
    nmi,
    pair_confusion,
    purity,
    score_metrics,
)
from utils.errors import ValidationError


def brute_force_pairs(pred, truth):
    """Enumerate every unordered pair"""
    n = len(pred)
    tp = fp = fn = tn = 0
    per = np.zeros((n, 3), dtype=np.int64)
    for i, j in itertools.combinations(range(n), 2):
        same_pred = pred[i] == pred[j]
        same_truth = truth[i] == truth[j]
        if same_pred and same_truth:
            tp += 1
            per[[i, j], 0] += 1
        elif same_pred:
            fp += 1
            per[[i, j], 1] += 1
        elif same_truth:
            fn += 1
            per[[i, j], 2] += 1
        else:
            tn += 1
    return tp, fp, fn, tn, per


def brute_force_fm(tp, fp, fn):
    denom = math.sqrt((tp + fp) * (tp + fn))
    return tp / denom if denom > 0 else 0.0


def brute_force_nmi(pred, truth):
    n = len(pred)
    p_vals, t_vals = sorted(set(pred)), sorted(set(truth))

    def entropy(labels, values):
        h = 0.0
        for v in values:
            p = labels.count(v) / n
            h -= p * math.log(p)
        return h

    h_p, h_t = entropy(list(pred), p_vals), entropy(list(truth), t_vals)
    if h_p == 0 and h_t == 0:
        return 1.0
    if h_p == 0 or h_t == 0:
        return 0.0
    mi = 0.0
    for a in p_vals:
        for b in t_vals:
            joint = sum(1 for x, y in zip(pred, truth) if x == a and y == b) / n
            if joint > 0:
                mi += joint * math.log(joint / ((list(pred).count(a) / n) * (list(truth).count(b) / n)))
    return mi / math.sqrt(h_p * h_t)


def brute_force_purity(pred, truth):
    total = 0
    for a in set(pred):
        members = [y for x, y in zip(pred, truth) if x == a]
        total += max(members.count(b) for b in set(members))
    return total / len(pred)


def test_hand_case_fm_and_individual_fm():
    """Test FM and individual FM for truth [A,A,B,B] and pred [0,0,0,1]"""
    conf = pair_confusion([0, 0, 0, 1], ["A", "A", "B", "B"])
    assert (conf.tp, conf.fp, conf.fn, conf.tn) == (1, 2, 1, 2)
    assert fm_global(conf) == pytest.approx(1 / math.sqrt(6), abs=1e-12)
    assert fm_individual(conf, 0) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_hand_case_nmi_and_purity():
    """Test NMI and purity on a hand-computed case"""
    pred, truth = [0, 0, 0, 1], ["A", "A", "B", "B"]
    assert nmi(pred, truth) == pytest.approx(0.3456, abs=1e-4)
    assert purity(pred, truth) == pytest.approx(0.75)


def test_oracle_equivalence_random_labelings():
    """Test that counts match the brute-force oracle exactly and scores within 1e-12"""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        pred = rng.integers(0, rng.integers(1, 5), size=n).tolist()
        truth = rng.integers(0, rng.integers(1, 5), size=n).tolist()

        tp, fp, fn, tn, per = brute_force_pairs(pred, truth)
        conf = pair_confusion(pred, truth)
        assert (conf.tp, conf.fp, conf.fn, conf.tn) == (tp, fp, fn, tn)
        assert np.array_equal(conf.per_item_tp, per[:, 0])
        assert np.array_equal(conf.per_item_fp, per[:, 1])
        assert np.array_equal(conf.per_item_fn, per[:, 2])

        assert fm_global(conf) == pytest.approx(brute_force_fm(tp, fp, fn), abs=1e-12)
        individual = fm_individual_all(conf)
        for i in range(n):
            assert individual[i] == pytest.approx(brute_force_fm(*per[i]), abs=1e-12)
        assert nmi(pred, truth) == pytest.approx(brute_force_nmi(pred, truth), abs=1e-12)
        assert purity(pred, truth) == pytest.approx(brute_force_purity(pred, truth), abs=1e-12)


def test_counting_identities():
    """Test the pair counting identities"""
    rng = np.random.default_rng(1)
    for _ in range(10000):
        n = int(rng.integers(2, 30))
        pred = rng.integers(0, 6, size=n)
        truth = rng.integers(0, 6, size=n)
        conf = pair_confusion(pred, truth)
        assert conf.tp + conf.fp + conf.fn + conf.tn == n * (n - 1) // 2
        assert conf.per_item_tp.sum() == 2 * conf.tp
        assert conf.per_item_fp.sum() == 2 * conf.fp
        assert conf.per_item_fn.sum() == 2 * conf.fn


def test_perfect_clustering_scores_one():
    """Test that a perfect clustering scores one on every metric"""
    truth = ["a", "a", "b", "b", "c"]
    pred = [2, 2, 0, 0, 1]
    scores = score_metrics(pred, truth)
    assert scores[MetricId.FM] == pytest.approx(1.0)
    assert scores[MetricId.NMI] == pytest.approx(1.0)
    assert scores[MetricId.PUR] == pytest.approx(1.0)


def test_all_singletons_give_zero_fm():
    """Test that all singletons give zero FM"""
    conf = pair_confusion([0, 1, 2, 3], ["a", "a", "b", "b"])
    assert fm_global(conf) == 0.0
    assert np.all(fm_individual_all(conf) == 0.0)


def test_nmi_degenerate_partitions():
    """Test NMI when a partition has one block"""
    assert nmi([0, 0, 0], ["a", "a", "a"]) == 1.0
    assert nmi([0, 0, 0], ["a", "b", "a"]) == 0.0


def test_accepts_cluster_assignment():
    """Test that metrics accept a cluster assignment"""
    assignment = ClusterAssignment(labels=np.array([0, 0, 1, 1]), k=2)
    assert fm_global(pair_confusion(assignment, [5, 5, 7, 7])) == pytest.approx(1.0)


def test_contingency_table_counts():
    """Test the contingency table"""
    table, p_codes, t_codes = contingency_table([0, 0, 1], ["x", "y", "y"])
    assert table.tolist() == [[1, 1], [0, 1]]
    assert p_codes.tolist() == [0, 0, 1]
    assert t_codes.tolist() == [0, 1, 1]


def test_length_mismatch_raises():
    """Test that label vectors of different length are rejected"""
    with pytest.raises(ValidationError):
        pair_confusion([0, 1], [0, 1, 2])


def test_single_item_raises():
    """Test that a single item is rejected"""
    with pytest.raises(ValidationError):
        pair_confusion([0], [0])


def test_individual_index_out_of_range():
    """Test that an individual index outside the problem is rejected"""
    conf = pair_confusion([0, 1], [0, 1])
    with pytest.raises(ValidationError):
        fm_individual(conf, 2)
