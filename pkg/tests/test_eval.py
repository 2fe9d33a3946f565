import numpy as np
import pytest

from oracles import brute_force_eer
from wavmtl.evaluation import ScoredTrial, compute_eer, roc_auc, top1_accuracy, write_results


def _trials(pos, neg):
    return [ScoredTrial(s, True) for s in pos] + [ScoredTrial(s, False) for s in neg]


def test_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(1000):
        n_pos, n_neg = rng.integers(1, 30, size=2)
        shift = rng.uniform(-1, 3)
        pos = rng.normal(shift, 1.0, n_pos)
        neg = rng.normal(0.0, 1.0, n_neg)
        if i % 2:   # coarse scores produce ties within and across classes
            pos, neg = np.round(pos, 1), np.round(neg, 1)
        got = compute_eer(_trials(pos.tolist(), neg.tolist()))
        worst = max(worst, abs(got - brute_force_eer(pos.tolist(), neg.tolist())))
    assert worst <= 1e-9


def test_worked_example():
    assert compute_eer(_trials([0.9, 0.8, 0.3], [0.7, 0.2, 0.1])) == pytest.approx(1 / 3, abs=1e-15)


def test_separable_scores():
    assert compute_eer(_trials([0.5, 0.9, 0.6], [0.1, -0.3])) == 0.0


def test_identical_distributions():
    scores = [0.1, 0.4, 0.4, 0.8]
    assert compute_eer(_trials(scores, scores)) == 0.5


def test_inverted_scores_give_full_error():
    assert compute_eer(_trials([-1.0, -2.0], [1.0, 2.0])) == 1.0


def test_monotone_transform_and_label_swap_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pos, neg = rng.normal(1, 1, 12), rng.normal(0, 1, 9)
        base = compute_eer(_trials(pos, neg))
        assert compute_eer(_trials(np.exp(pos), np.exp(neg))) == pytest.approx(base, abs=1e-12)
        assert compute_eer(_trials(-neg, -pos)) == pytest.approx(base, abs=1e-12)


def test_one_class_trials_are_rejected():
    with pytest.raises(ValueError, match="at least one"):
        compute_eer(_trials([0.1, 0.2], []))
    with pytest.raises(ValueError, match="finite"):
        compute_eer(_trials([np.nan], [0.0]))


def test_auc():
    assert roc_auc(_trials([0.9, 0.8], [0.1, 0.2])) == 1.0
    assert roc_auc(_trials([0.5], [0.5])) == 0.5


def test_top1_counting():
    labels = np.array([0, 2, 1, 1])
    assert top1_accuracy(np.eye(3)[labels], labels) == 1.0
    assert top1_accuracy(np.eye(3)[(labels + 1) % 3], labels) == 0.0
    logits = np.eye(3)[labels]
    logits[3] = [0, 0, 5]
    assert top1_accuracy(logits, labels) == 0.75
    assert top1_accuracy(np.zeros((2, 3)), [0, 1]) == 0.5    # ties go to class 0
    with pytest.raises(ValueError):
        top1_accuracy(np.zeros((0, 3)), [])


def test_results_file_and_score_dump(tmp_path):
    trials = _trials([0.25], [-0.5])
    write_results(tmp_path / "r.txt", {"sv_eer": 0.0, "config_hash": "ab"}, trials,
                  tmp_path / "s.txt")
    assert (tmp_path / "r.txt").read_text() == "sv_eer=0.0\nconfig_hash=ab\n"
    assert (tmp_path / "s.txt").read_text() == "0.25 1\n-0.5 0\n"
