import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incseg.datamodel import IGNORE, FewShotSet, Sample, read_labelmap
from incseg.errors import ConfigError, UsageError
from incseg.losses import FEWSHOT, PSEUDO
from incseg.network import build_model, extend_head, forward
from incseg.pseudolabel import (HARD, SOFT, PseudoItem, PseudoLabeledSet, assemble_augmented_set,
                                gate_probabilities, infer_pseudo_labels, pseudo_label_quality_report,
                                write_pseudo_labels)

from .conftest import softmax


def _gate_loop(probs, novel, tau):
    H, W, C = probs.shape
    out = np.full((H, W), IGNORE, np.uint8)
    for i in range(H):
        for j in range(W):
            row = [float(v) for v in probs[i, j]]
            best = max(range(C), key=lambda c: (row[c], -c))
            if best in novel and row[best] >= tau:
                out[i, j] = best
    return out


def test_gate_hand_case(impl):
    p = np.array([[[0.1, 0.7, 0.2]]])
    assert gate_probabilities(p, {1, 2}, 0.5, impl=impl)[0, 0] == 1
    assert gate_probabilities(p, {1, 2}, 0.75, impl=impl)[0, 0] == IGNORE
    old_wins = np.array([[[0.9, 0.05, 0.05]]])
    assert gate_probabilities(old_wins, {1, 2}, 0.0, impl=impl)[0, 0] == IGNORE


def test_gate_tie_lowest_index(impl):
    p = np.array([[[0.2, 0.4, 0.4]]])
    assert gate_probabilities(p, {1, 2}, 0.0, impl=impl)[0, 0] == 1


def test_tau_range():
    p = np.full((1, 1, 2), 0.5)
    with pytest.raises(ConfigError):
        gate_probabilities(p, {1}, 1.0)
    with pytest.raises(ConfigError):
        gate_probabilities(p, {1}, -0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 0.99))
def test_gate_matches_oracle_and_is_monotone(seed, tau):
    rng = np.random.default_rng(seed)
    p = softmax(rng.normal(size=(5, 4, 5)) * 2)
    novel = {3, 4}
    got = gate_probabilities(p, novel, tau)
    assert np.array_equal(got, _gate_loop(p, novel, tau))
    assert np.array_equal(gate_probabilities(p, novel, 0.0), _gate_loop(p, novel, 0.0))
    higher = gate_probabilities(p, novel, min(0.99, tau + 0.1))
    assert (higher != IGNORE).sum() <= (got != IGNORE).sum()
    # a uniform monotone transform keeps the argmax; at tau=0 the labels are unchanged
    assert np.array_equal(gate_probabilities(softmax(3 * np.log(p)), novel, 0.0),
                          gate_probabilities(p, novel, 0.0))


@pytest.fixture
def model():
    m = build_model(3, seed=0)
    extend_head(m, 2, seed=0)
    return m


def test_infer_hard_matches_forward(model, rng):
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(3)]
    pset = infer_pseudo_labels(model, imgs, [4, 9, 2], {3, 4}, tau=0.0, batch_size=2)
    assert pset.ids == (4, 9, 2) and pset.mode == HARD
    for img, it in zip(imgs, pset.items):
        assert np.array_equal(it.labels, _gate_loop(forward(model, img), {3, 4}, 0.0))
        assert set(np.unique(it.labels).tolist()) <= {3, 4, IGNORE}


def test_infer_high_tau_near_uniform(model, rng):
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)]
    pset = infer_pseudo_labels(model, imgs, [1], {3, 4}, tau=0.99)
    assert pset.coverage() == 0.0 and len(pset) == 1
    rep = pseudo_label_quality_report(pset, {1: np.full((16, 16), 3, np.uint8)})
    assert rep["per_class"][3]["precision"] is None and rep["per_class"][3]["recall"] == 0.0


def test_infer_soft(model, rng):
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)]
    hard = infer_pseudo_labels(model, imgs, [1], {3, 4}, tau=0.0)
    soft = infer_pseudo_labels(model, imgs, [1], {3, 4}, tau=0.0, mode=SOFT)
    lab = soft.items[0].labels
    assert lab.shape == (16, 16, 2)
    assert np.array_equal(soft.hard_labels(soft.items[0]), hard.items[0].labels)
    p = forward(model, imgs[0])
    kept = hard.items[0].labels != IGNORE
    np.testing.assert_allclose(lab[kept], p[kept][:, 3:])
    assert not lab[~kept].any()
    with pytest.raises(ConfigError):
        infer_pseudo_labels(model, imgs, [1], {3, 4}, mode="fuzzy")
    with pytest.raises(UsageError):
        infer_pseudo_labels(model, imgs, [1], {3, 7})


def _fewshot(n, step=2):
    items = [Sample(np.zeros((4, 4, 3), np.uint8), np.full((4, 4), 3, np.uint8), f"f{k}") for k in range(n)]
    return FewShotSet(items, step, n)


def _pset(ids, step=2):
    items = [PseudoItem(i, np.zeros((4, 4, 3), np.uint8), np.full((4, 4), 4, np.uint8)) for i in ids]
    return PseudoLabeledSet(items, 0.5, step, HARD, (3, 4))


def test_assemble_counts_and_order(rng):
    ids = rng.permutation(np.arange(1, 200))[:38].tolist()
    out = assemble_augmented_set(_fewshot(5), _pset(ids))
    assert len(out) == 43
    assert [t.source for t in out].count(FEWSHOT) == 5 and [t.source for t in out].count(PSEUDO) == 38
    assert all(t.source == FEWSHOT for t in out[:5])
    assert [t.id for t in out[5:]] == sorted(ids)


def test_assemble_degenerate_and_errors():
    assert len(assemble_augmented_set(_fewshot(5), _pset([]))) == 5
    assert len(assemble_augmented_set(_fewshot(5), None)) == 5
    with pytest.raises(UsageError):
        assemble_augmented_set(_fewshot(2), _pset([1], step=3))
    with pytest.raises(UsageError):
        assemble_augmented_set(_fewshot(2), _pset([1, 1]))


def test_quality_report_matches_counting(rng):
    items, gt = [], {}
    for i in range(1, 7):
        lab = rng.choice([3, 4, IGNORE], size=(6, 6)).astype(np.uint8)
        items.append(PseudoItem(i, None, lab))
        gt[i] = rng.choice([0, 1, 3, 4], size=(6, 6)).astype(np.uint8)
    pset = PseudoLabeledSet(items, 0.5, 2, HARD, (3, 4))
    rep = pseudo_label_quality_report(pset, gt)
    for c in (3, 4):
        tp = pred = true = 0
        for it in items:
            for a, b in zip(it.labels.ravel().tolist(), gt[it.id].ravel().tolist()):
                tp += a == c and b == c
                pred += a == c
                true += b == c
        assert rep["per_class"][c]["precision"] == tp / pred
        assert rep["per_class"][c]["recall"] == tp / true
    nonignored = sum(int((it.labels != IGNORE).sum()) for it in items)
    assert rep["coverage"] == nonignored / (6 * 36)
    exact = PseudoLabeledSet([PseudoItem(1, None, gt[1])], 0.5, 2, HARD, (3, 4))
    rep = pseudo_label_quality_report(exact, {1: gt[1]})
    assert all(v["precision"] == 1.0 and v["recall"] == 1.0 for v in rep["per_class"].values())


def test_write_pseudo_labels(tmp_path):
    pset = _pset([3, 1])
    path = write_pseudo_labels(pset, tmp_path, model_digest="abc")
    side = json.loads(path.read_text())
    assert side["tau"] == 0.5 and side["step"] == 2 and side["source_model"] == "abc"
    assert [e["id"] for e in side["items"]] == [1, 3]
    assert np.array_equal(read_labelmap(tmp_path / "labels" / "1.png"), pset.items[1].labels)
