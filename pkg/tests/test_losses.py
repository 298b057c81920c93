import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incseg.datamodel import IGNORE, build_task_schedule
from incseg.errors import ShapeError, UsageError
from incseg.losses import (FEWSHOT, PSEUDO, LossWeights, distillation_loss, masked_cross_entropy,
                           soft_cross_entropy, total_objective)

from .conftest import softmax
from .oracles import ce_loop, kd_loop


def _instance(rng, H, W, C, n_old, ignore_frac=0.2):
    logits = rng.normal(size=(H, W, C)) * 1.5
    labels = rng.integers(0, C, size=(H, W)).astype(np.uint8)
    labels[rng.random((H, W)) < ignore_frac] = IGNORE
    teacher = softmax(rng.normal(size=(H, W, n_old)))
    return logits, labels, teacher


def test_single_pixel_hand_case(impl):
    probs = np.array([[[0.8, 0.15, 0.05]]])
    labels = np.array([[0]])
    value, grad = masked_cross_entropy(probs, labels, {0, 1}, impl=impl)
    assert value == pytest.approx(0.22314355131420976, abs=1e-12)
    assert value == pytest.approx(-math.log(0.8))
    np.testing.assert_allclose(grad[0, 0], [0.8 - 1, 0.15, 0.05])


def test_one_hot_correct_is_zero(impl):
    probs = np.zeros((2, 2, 3))
    labels = np.array([[0, 1], [2, IGNORE]])
    for (i, j), y in np.ndenumerate(labels):
        probs[i, j, y if y != IGNORE else 0] = 1.0
    value, _ = masked_cross_entropy(probs, labels, {0, 1, 2}, impl=impl)
    assert value == 0.0


def test_all_ignore_gives_zero_and_zero_grad(impl):
    probs = softmax(np.random.default_rng(0).normal(size=(3, 3, 4)))
    value, grad = masked_cross_entropy(probs, np.full((3, 3), IGNORE), {0, 1}, impl=impl)
    assert value == 0.0
    assert not grad.any()


def test_label_without_channel_is_domain_error():
    probs = softmax(np.zeros((2, 2, 3)))
    with pytest.raises(ShapeError):
        masked_cross_entropy(probs, np.array([[0, 5], [1, 1]]), {0, 1, 5})
    with pytest.raises(ShapeError):
        masked_cross_entropy(probs, np.array([[0, 5], [1, 1]]), {0, 1})


def test_kd_one_hot_match_is_zero(impl):
    student = np.array([[[0.0, 1.0, 0.0]]])
    teacher = np.array([[[0.0, 1.0]]])
    value, _ = distillation_loss(student, teacher, np.array([[IGNORE]]), {2}, {0, 1}, impl=impl)
    assert value == 0.0


def test_kd_uniform_teacher_is_ln2(impl):
    student = np.array([[[0.5, 0.5, 0.0]]])
    teacher = np.array([[[0.5, 0.5]]])
    value, _ = distillation_loss(student, teacher, np.array([[IGNORE]]), {2}, {0, 1}, impl=impl)
    assert value == pytest.approx(math.log(2), abs=1e-12)


def test_kd_empty_complement(impl):
    rng = np.random.default_rng(1)
    student = softmax(rng.normal(size=(2, 2, 4)))
    teacher = softmax(rng.normal(size=(2, 2, 2)))
    value, grad = distillation_loss(student, teacher, np.full((2, 2), 3), {2, 3}, {0, 1}, impl=impl)
    assert value == 0.0 and not grad.any()


@pytest.mark.parametrize("seed", range(20))
def test_losses_match_loop_oracle(impl, seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(1, 9, size=2)
    C = int(rng.integers(3, 7))
    n_old = int(rng.integers(1, C))
    logits, labels, teacher = _instance(rng, H, W, C, n_old)
    probs = softmax(logits)
    old = set(range(n_old))
    novel = set(range(n_old, C))
    ce, _ = masked_cross_entropy(probs, labels, novel, impl=impl)
    assert abs(ce - ce_loop(probs, labels, novel)) <= 1e-9
    kd, _ = distillation_loss(probs, teacher, labels, novel, old, impl=impl)
    assert abs(kd - kd_loop(probs, teacher, labels, novel, old)) <= 1e-9


def _fd_grad(fn, logits, h=1e-4):
    g = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up = logits.copy()
        dn = logits.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (fn(up) - fn(dn)) / (2 * h)
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(impl, seed):
    rng = np.random.default_rng(100 + seed)
    logits, labels, teacher = _instance(rng, 4, 5, 5, 3)
    novel, old = {3, 4}, {0, 1, 2}

    def ce(z):
        return masked_cross_entropy(softmax(z), labels, novel, impl=impl).value

    def kd(z):
        return distillation_loss(softmax(z), teacher, labels, novel, old, impl=impl).value

    for fn, loss in ((ce, masked_cross_entropy(softmax(logits), labels, novel, impl=impl)),
                     (kd, distillation_loss(softmax(logits), teacher, labels, novel, old, impl=impl))):
        assert _rel_err(loss.grad, _fd_grad(fn, logits)) <= 1e-4


def test_soft_ce_gradient(impl):
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 3, 4))
    targets = softmax(rng.normal(size=(3, 3, 2)))
    targets[0, 0] = 0.0
    fn = lambda z: soft_cross_entropy(softmax(z), targets, {2, 3}, impl=impl).value  # noqa: E731
    loss = soft_cross_entropy(softmax(logits), targets, {2, 3}, impl=impl)
    assert _rel_err(loss.grad, _fd_grad(fn, logits)) <= 1e-4
    assert not loss.grad[0, 0].any()


@pytest.fixture
def sched():
    return build_task_schedule({"tasks": [["a", "b", "c"], ["d", "e"]]})


def test_total_objective_is_term_sum(sched):
    rng = np.random.default_rng(5)
    logits, labels, teacher = _instance(rng, 4, 4, 5, 3)
    probs = softmax(logits)
    obj = total_objective(probs, teacher, labels, FEWSHOT, sched, 2)
    expect = ce_loop(probs, labels, {3, 4}) + kd_loop(probs, teacher, labels, {3, 4}, {0, 1, 2})
    assert abs(obj.value - expect) <= 1e-9
    assert set(obj.terms) == {"ce_fewshot", "kd"}


def test_total_objective_pseudo_matches_fewshot_ce(sched):
    rng = np.random.default_rng(6)
    logits, labels, teacher = _instance(rng, 4, 4, 5, 3)
    probs = softmax(logits)
    a = total_objective(probs, teacher, labels, FEWSHOT, sched, 2)
    b = total_objective(probs, teacher, labels, PSEUDO, sched, 2)
    assert a.terms["ce_fewshot"] == b.terms["ce_pseudo"]
    assert a.value == b.value


def test_total_objective_weights_route_terms(sched):
    rng = np.random.default_rng(8)
    logits, labels, teacher = _instance(rng, 3, 3, 5, 3)
    probs = softmax(logits)
    w = LossWeights(ce_fewshot=2.0, ce_pseudo=0.0, kd=0.5)
    few = total_objective(probs, teacher, labels, FEWSHOT, sched, 2, w)
    assert few.value == pytest.approx(2 * few.terms["ce_fewshot"] + 0.5 * few.terms["kd"])
    pse = total_objective(probs, teacher, labels, PSEUDO, sched, 2, w)
    assert pse.value == pytest.approx(0.5 * pse.terms["kd"])


def test_total_objective_gradient(sched):
    rng = np.random.default_rng(9)
    logits, labels, teacher = _instance(rng, 3, 4, 5, 3)
    fn = lambda z: total_objective(softmax(z), teacher, labels, FEWSHOT, sched, 2).value  # noqa: E731
    obj = total_objective(softmax(logits), teacher, labels, FEWSHOT, sched, 2)
    assert _rel_err(obj.grad, _fd_grad(fn, logits)) <= 1e-4


def test_base_task_rejects_teacher(sched):
    probs = softmax(np.zeros((2, 2, 3)))
    with pytest.raises(UsageError):
        total_objective(probs, probs, np.zeros((2, 2), np.uint8), FEWSHOT, sched, 1)
    obj = total_objective(probs, None, np.zeros((2, 2), np.uint8), FEWSHOT, sched, 1)
    assert obj.value == pytest.approx(math.log(3))


def test_soft_pseudo_target_routes_through_soft_ce(sched):
    rng = np.random.default_rng(10)
    probs = softmax(rng.normal(size=(3, 3, 5)))
    teacher = softmax(rng.normal(size=(3, 3, 3)))
    soft = np.zeros((3, 3, 2))
    soft[1, 1] = [0.7, 0.3]
    obj = total_objective(probs, teacher, soft, PSEUDO, sched, 2)
    expect_ce = -(0.7 * math.log(probs[1, 1, 3]) + 0.3 * math.log(probs[1, 1, 4]))
    assert obj.terms["ce_pseudo"] == pytest.approx(expect_ce, abs=1e-12)
    kd_mask = np.ones((3, 3), bool)
    kd_mask[1, 1] = False
    expect_kd = distillation_loss(probs, teacher, None, {3, 4}, {0, 1, 2}, pixel_mask=kd_mask).value
    assert obj.terms["kd"] == pytest.approx(expect_kd, abs=1e-12)


instances = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(3, 6), st.integers(0, 2**31 - 1))


@settings(max_examples=40, deadline=None)
@given(instances)
def test_loss_properties(params):
    H, W, C, seed = params
    rng = np.random.default_rng(seed)
    logits, labels, teacher = _instance(rng, H, W, C, C - 2)
    probs = softmax(logits)
    novel, old = {C - 2, C - 1}, set(range(C - 2))
    ce = masked_cross_entropy(probs, labels, novel).value
    kd = distillation_loss(probs, teacher, labels, novel, old).value
    assert ce >= 0 and kd >= 0

    # pixel order does not matter
    perm = rng.permutation(H * W)
    p2 = probs.reshape(-1, C)[perm]
    l2 = labels.reshape(-1)[perm]
    t2 = teacher.reshape(-1, C - 2)[perm]
    assert masked_cross_entropy(p2, l2, novel).value == pytest.approx(ce, abs=1e-12)
    assert distillation_loss(p2, t2, l2, novel, old).value == pytest.approx(kd, abs=1e-12)

    # cross-entropy >= entropy; equality when the student matches the teacher on old classes
    mask = ~np.isin(labels, list(novel))
    if mask.any():
        ent = -(teacher * np.log(teacher)).sum(-1)[mask].mean()
        assert kd >= ent - 1e-12
        matched = np.concatenate([teacher, np.zeros((H, W, 2))], axis=-1)
        kd_same = distillation_loss(matched, teacher, labels, novel, old).value
        assert kd_same == pytest.approx(ent, abs=1e-12)
