import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgpretrain.errors import ContractError, NumericError
from ecgpretrain.losses import (
    ArcFaceConfig,
    ContrastiveConfig,
    arcface,
    bce_multilabel,
    combined,
    global_contrastive,
    global_terms,
    info_nce,
    local_contrastive,
)
from ecgpretrain.numerics import Rng, Tensor, backward, grad_check


def _softmax_ce(logits, label):
    z = logits - logits.max()
    return -(z[label] - math.log(np.exp(z).sum()))


# -- local ---------------------------------------------------------------------

def test_zero_distractors_give_exactly_zero():
    rng = np.random.default_rng(0)
    c, q = rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4))
    mask = np.zeros((1, 5), dtype=bool)
    mask[0, 2] = True
    out = local_contrastive(Tensor(c), Tensor(q), mask, ContrastiveConfig(n_distractors=4), Rng(0))
    assert out.loss.item() == 0.0


def test_uniform_similarities_give_log_k_plus_one():
    # all q rows equal -> every candidate has the same cosine with c_t
    c = np.random.default_rng(1).normal(size=(1, 8, 3))
    q = np.tile([0.3, -1.0, 2.0], (1, 8, 1))
    mask = np.zeros((1, 8), dtype=bool)
    mask[0, :5] = True
    out = local_contrastive(Tensor(c), Tensor(q), mask, ContrastiveConfig(n_distractors=4), Rng(0))
    assert out.loss.item() == pytest.approx(math.log(5), abs=1e-12)
    assert out.loss.item() == pytest.approx(1.6094, abs=1e-4)


def test_distractor_count_is_clamped():
    c = np.random.default_rng(2).normal(size=(1, 6, 3))
    q = np.tile([1.0, 0.0, 0.0], (1, 6, 1))
    mask = np.zeros((1, 6), dtype=bool)
    mask[0, :3] = True  # only 2 other masked steps available
    out = local_contrastive(Tensor(c), Tensor(q), mask, ContrastiveConfig(n_distractors=20), Rng(0))
    assert out.loss.item() == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.parametrize("k", [1, 4, 20, 100])
def test_separated_candidates_are_bounded_by_k_exp_minus_20(k):
    # sim(c, q+) = 1, sim(c, q-) = -1, tau = 0.1: L = log(1 + K e^-20) <= K e^-20
    sims = np.array([[1.0] + [-1.0] * k])
    loss = info_nce(Tensor(sims), 0.1).item()
    assert loss == pytest.approx(math.log1p(k * math.exp(-20.0)), rel=1e-9)
    assert loss <= k * math.exp(-20.0)
    if k <= 4:
        assert loss < 1e-8


@given(st.integers(0, 10_000), st.floats(-50, 50))
@settings(max_examples=30, deadline=None)
def test_info_nce_is_shift_invariant(seed, shift):
    sims = np.random.default_rng(seed).uniform(-1, 1, size=(3, 6))
    a = info_nce(Tensor(sims), 0.1).data
    b = info_nce(Tensor(sims + shift), 0.1).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_distractors_come_from_other_masked_steps_of_the_same_sample():
    # sample 1 has a single masked step -> its loss term must be 0 even though sample 0 has many
    rng = np.random.default_rng(3)
    c, q = rng.normal(size=(2, 10, 4)), rng.normal(size=(2, 10, 4))
    mask = np.zeros((2, 10), dtype=bool)
    mask[0, :6] = True
    mask[1, 4] = True
    cfg = ContrastiveConfig(n_distractors=3)
    both = local_contrastive(Tensor(c), Tensor(q), mask, cfg, Rng(1))
    only0 = mask.copy()
    only0[1] = False
    first = local_contrastive(Tensor(c), Tensor(q), only0, cfg, Rng(1))
    assert both.n_targets == 7
    assert both.loss.item() == pytest.approx(first.loss.item() * 6 / 7, rel=1e-12)


def test_top1_is_chance_for_random_features():
    rng = np.random.default_rng(4)
    c, q = rng.normal(size=(16, 60, 8)), rng.normal(size=(16, 60, 8))
    mask = np.ones((16, 60), dtype=bool)
    out = local_contrastive(Tensor(c), Tensor(q), mask, ContrastiveConfig(n_distractors=9), Rng(2))
    assert abs(out.top1 - 0.1) < 0.03
    perfect = local_contrastive(Tensor(q), Tensor(q), mask, ContrastiveConfig(n_distractors=9), Rng(2))
    assert perfect.top1 == 1.0


def test_empty_mask_is_an_error():
    with pytest.raises(ContractError):
        local_contrastive(Tensor(np.ones((1, 3, 2))), Tensor(np.ones((1, 3, 2))), np.zeros((1, 3), bool),
                          ContrastiveConfig(), Rng(0))


def test_contrastive_config_validation():
    with pytest.raises(ContractError):
        ContrastiveConfig(tau_local=0.0)
    with pytest.raises(ContractError):
        ContrastiveConfig(n_distractors=-1)


# -- global ---------------------------------------------------------------------

def test_single_pair_has_zero_global_loss():
    g = np.random.default_rng(0).normal(size=(2, 5))
    assert global_contrastive(Tensor(g), 0.1).item() == 0.0


def test_orthogonal_construction_matches_closed_form():
    g = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    terms = global_terms(Tensor(g), 1.0).data
    expected = -math.log(math.e / (math.e + 2.0))
    assert terms[0] == pytest.approx(expected, abs=1e-12)
    assert terms[1] == pytest.approx(expected, abs=1e-12)
    # rows 3 and 4 see three zero similarities
    assert terms[2] == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.parametrize("n_pairs", [1, 2, 5])
def test_identical_globals_give_log_2n_minus_1(n_pairs):
    g = np.tile([0.5, -1.0, 2.0], (2 * n_pairs, 1))
    assert global_contrastive(Tensor(g), 0.1).item() == pytest.approx(math.log(2 * n_pairs - 1), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_global_terms_are_positive_with_negatives(seed):
    g = np.random.default_rng(seed).normal(size=(6, 4))
    assert np.all(global_terms(Tensor(g), 0.1).data > 0)


def test_global_brute_force_oracle():
    g = np.random.default_rng(5).normal(size=(6, 3))
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    s = gn @ gn.T / 0.1
    expected = []
    for i in range(6):
        j = i ^ 1
        denom = sum(math.exp(s[i, k]) for k in range(6) if k != i)
        expected.append(-math.log(math.exp(s[i, j]) / denom))
    assert global_contrastive(Tensor(g), 0.1).item() == pytest.approx(np.mean(expected), rel=1e-10)


def test_zero_global_is_an_error():
    g = np.ones((4, 3))
    g[2] = 0.0
    with pytest.raises(ContractError):
        global_contrastive(Tensor(g), 0.1)


# -- combined -------------------------------------------------------------------

def test_combined_is_the_plain_sum():
    assert combined(Tensor(0.0), Tensor(0.0)).item() == 0.0
    assert combined(Tensor(1.5), Tensor(0.5)).item() == 2.0
    with pytest.raises(NumericError):
        combined(Tensor(np.nan), Tensor(0.0))


def test_combined_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(4, 3))
    f1 = lambda x: global_contrastive(x, 0.1)
    f2 = lambda x: bce_multilabel(x, np.eye(4, 3))
    grads = []
    for f in (f1, f2, lambda x: combined(f1(x), f2(x))):
        x = Tensor(x0, requires_grad=True)
        backward(f(x))
        grads.append(x.grad)
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], atol=1e-14)


# -- arcface --------------------------------------------------------------------

def test_arcface_without_margin_is_softmax_over_cosines():
    rng = np.random.default_rng(7)
    e, w = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    labels = np.array([0, 2, 1, 1, 0])
    cos = (e / np.linalg.norm(e, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
    oracle = np.mean([_softmax_ce(cos[i], labels[i]) for i in range(5)])
    got = arcface(Tensor(e), Tensor(w), labels, ArcFaceConfig(s=1.0, m=0.0)).item()
    assert got == pytest.approx(oracle, abs=1e-10)


def test_arcface_single_class_is_zero():
    e = np.random.default_rng(8).normal(size=(3, 4))
    assert arcface(Tensor(e), Tensor(np.ones((1, 4))), [0, 0, 0], ArcFaceConfig()).item() == 0.0


def test_arcface_two_class_hand_value():
    # cos(theta_y) = 1 (clamped to 1 - 1e-7), cos(theta_other) = 0, s = 2, m = 0.5
    got = arcface(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), [0], ArcFaceConfig(2.0, 0.5)).item()
    theta = math.acos(1 - 1e-7)
    assert got == pytest.approx(math.log1p(math.exp(-2 * math.cos(theta + 0.5))), rel=1e-12)
    assert got == pytest.approx(math.log1p(math.exp(-2 * math.cos(0.5))), abs=1e-3)


def test_arcface_decreases_as_true_cosine_grows():
    w = np.array([[1.0, 0.0], [0.0, 1.0], [-0.6, -0.8]])
    losses = []
    for angle in np.linspace(1.4, 0.05, 12):  # rotate the embedding toward class 0
        e = np.array([[math.cos(angle), math.sin(angle)]])
        losses.append(arcface(Tensor(e), Tensor(w), [0], ArcFaceConfig(s=8.0, m=0.3)).item())
    assert np.all(np.diff(losses) < 0)


def test_arcface_rejects_bad_inputs():
    with pytest.raises(ContractError):
        arcface(Tensor(np.zeros((1, 2))), Tensor(np.eye(2)), [0], ArcFaceConfig())
    with pytest.raises(ContractError):
        arcface(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), [2], ArcFaceConfig())
    with pytest.raises(ContractError):
        ArcFaceConfig(m=4.0)


# -- multi-label ----------------------------------------------------------------

def test_bce_anchors():
    assert bce_multilabel(Tensor(np.zeros((2, 3))), np.eye(2, 3)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_multilabel(Tensor([[50.0]]), [[1.0]]).item() < 1e-20


def test_bce_matches_direct_formula():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4)) * 3
    y = rng.integers(0, 2, size=(3, 4))
    sig = 1 / (1 + np.exp(-x))
    oracle = -np.mean(y * np.log(sig) + (1 - y) * np.log(1 - sig))
    assert bce_multilabel(Tensor(x), y).item() == pytest.approx(oracle, abs=1e-10)


# -- gradients ------------------------------------------------------------------

def _local_case(rng):
    q = Tensor(rng.normal(size=(2, 9, 5)))
    mask = np.zeros((2, 9), dtype=bool)
    mask[0, 1:7] = True
    mask[1, [0, 4, 8]] = True
    cfg = ContrastiveConfig(n_distractors=3)
    return (2, 9, 5), lambda c: local_contrastive(c, q, mask, cfg, Rng(0)).loss


def _loss_cases(rng):
    w = Tensor(rng.normal(size=(4, 6)))
    y = rng.integers(0, 2, size=(3, 4))
    return {
        "local": _local_case(rng),
        "global": ((6, 5), lambda g: global_contrastive(g, 0.1)),
        "combined": ((6, 5), lambda g: combined(global_contrastive(g, 0.5), bce_multilabel(g[:, :4], np.eye(6, 4)))),
        "arcface": ((3, 6), lambda e: arcface(e, w, [0, 3, 1], ArcFaceConfig(s=8.0, m=0.5))),
        "bce": ((3, 4), lambda x: bce_multilabel(x, y)),
    }


@pytest.mark.parametrize("name", list(_loss_cases(np.random.default_rng(0))))
def test_losses_pass_grad_check(name):
    for trial in range(5):
        rng = np.random.default_rng(100 + trial)
        shape, f = _loss_cases(rng)[name]
        assert grad_check(f, rng.normal(size=shape)) < 1e-4
