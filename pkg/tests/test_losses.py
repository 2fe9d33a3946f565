import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavmtl.losses import (AngularSoftmaxConfig, angular_softmax_loss, cosine_similarity,
                           cross_entropy)
from wavmtl.tensor import Tensor


def test_uniform_logits_give_log_n():
    loss = cross_entropy(Tensor(np.zeros((5, 12))), [0, 3, 7, 11, 2]).item()
    assert abs(loss - math.log(12)) <= 1e-12


def test_cross_entropy_closed_form():
    loss = cross_entropy(Tensor(np.array([2.0, 0.0, 0.0])), [0]).item()
    assert loss == pytest.approx(-math.log(math.e ** 2 / (math.e ** 2 + 2)), abs=1e-14)
    assert loss == pytest.approx(0.2395, abs=1e-4)


def test_confident_true_class_drives_loss_to_zero():
    assert cross_entropy(Tensor(np.array([[800.0, 0.0, -5.0]])), [0]).item() == 0.0


def test_out_of_range_label():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 6))
    labels = rng.integers(0, 6, 4)
    a = cross_entropy(Tensor(logits), labels).item()
    b = cross_entropy(Tensor(logits + shift), labels).item()
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


# -- angular softmax ---------------------------------------------------------------------

def _cosine_logit_ce(emb, labels, weight):
    w = weight / np.linalg.norm(weight, axis=1, keepdims=True)
    logits = emb @ w.T
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


@pytest.mark.parametrize("lam", [0.0, 5.0, 1000.0])
def test_margin_one_is_plain_cosine_softmax(lam):
    rng = np.random.default_rng(int(lam))
    for _ in range(20):
        emb = rng.standard_normal((5, 8))
        weight = rng.standard_normal((7, 8))
        labels = rng.integers(0, 7, 5)
        got = angular_softmax_loss(Tensor(emb), labels, Tensor(weight), margin=1, lam=lam).item()
        assert abs(got - _cosine_logit_ce(emb, labels, weight)) <= 1e-9


def test_two_dimensional_case_against_scalar_formula():
    emb = np.array([[np.cos(np.pi / 4), np.sin(np.pi / 4)]])
    weight = np.array([[1.0, 0.0], [np.cos(np.pi), np.sin(np.pi)]])
    lam, m = 5.0, 2
    got = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=m, lam=lam).item()
    # theta_y = pi/4 lies in [pi/2 * 0, pi/2): k = 0, psi = cos(2 theta) = 0
    theta_y, theta_o = np.pi / 4, 3 * np.pi / 4
    psi = math.cos(m * theta_y)
    f_y = (lam * math.cos(theta_y) + psi) / (1 + lam)
    f_o = math.cos(theta_o)
    expected = -math.log(math.exp(f_y) / (math.exp(f_y) + math.exp(f_o)))
    assert got == pytest.approx(expected, abs=1e-12)


def test_psi_branch_beyond_first_interval():
    theta = 2.0   # in [pi/2, 3pi/4) for m=4: k = 2
    emb = np.array([[math.cos(theta), math.sin(theta)]])
    weight = np.array([[1.0, 0.0], [0.0, -1.0]])
    got = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=4, lam=0.0).item()
    k = math.floor(4 * theta / math.pi)
    psi = (-1) ** k * math.cos(4 * theta) - 2 * k
    other = math.cos(theta + math.pi / 2)
    expected = -math.log(math.exp(psi) / (math.exp(psi) + math.exp(other)))
    assert got == pytest.approx(expected, abs=1e-12)


def test_aligned_embedding_keeps_full_target_logit():
    emb = np.array([[3.0, 0.0]])
    weight = np.array([[2.0, 0.0], [0.0, 1.0]])
    a4 = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=4).item()
    a1 = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=1).item()
    assert a4 == pytest.approx(a1, abs=1e-12)


def test_margin_penalises_the_target():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(200):
        emb = rng.standard_normal((1, 4))
        weight = rng.standard_normal((3, 4))
        cos_y = emb[0] @ weight[0] / np.linalg.norm(emb) / np.linalg.norm(weight[0])
        if not 0 < np.arccos(cos_y) < np.pi / 4:
            continue
        checked += 1
        m4 = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=4, lam=1.0).item()
        m1 = angular_softmax_loss(Tensor(emb), [0], Tensor(weight), margin=1, lam=1.0).item()
        assert m4 >= m1
    assert checked > 5


def test_zero_embedding_is_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        angular_softmax_loss(Tensor(np.zeros((1, 3))), [0], Tensor(np.ones((2, 3))))


def test_lambda_schedule():
    cfg = AngularSoftmaxConfig()
    values = [cfg.lam(t) for t in range(0, 5000, 7)]
    assert values[0] == 1000.0 and values[-1] == 5.0
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert cfg.lam(5) == pytest.approx(1000.0 / 2.0)


@pytest.mark.parametrize("bad", [dict(margin=0), dict(margin=2.5), dict(lambda_min=-1),
                                 dict(lambda_base=1.0, lambda_min=5.0)])
def test_angular_config_validation(bad):
    with pytest.raises(ValueError):
        AngularSoftmaxConfig(**bad)


# -- cosine similarity ----------------------------------------------------------------------

def test_cosine_similarity_cases():
    a = np.array([1.0, 2.0, -0.5])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    b = np.array([0.3, -1.0, 2.0])
    assert cosine_similarity(2 * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-15)
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(3), a)
