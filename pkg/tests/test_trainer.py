from dataclasses import replace

import numpy as np
import pytest
import torch

from incseg.datamodel import IGNORE, UnlabeledPool, base_training_set, sample_few_shot
from incseg.errors import ConfigError, DataError, ScheduleError
from incseg.losses import FEWSHOT, LossWeights, total_objective
from incseg.network import images_to_tensor, model_bytes_digest, predict_proba, restore
from incseg.pseudolabel import TrainItem
from incseg.synthetic import make_synthetic_data
from incseg.trainer import (ExperimentData, TrainConfig, build_neighborhood, fit, run_experiment,
                            run_incremental_step, train_base, train_increment_initial)

FAST = TrainConfig(epochs_base=3, epochs_phase1=2, epochs_phase2=2, batch_size=4, k_neighbors=3)


@pytest.fixture(scope="module")
def base(tiny_data):
    sched = tiny_data.schedule
    return train_base(base_training_set(tiny_data.splits["train_1"], sched), sched, FAST)


@pytest.fixture(scope="module")
def fewshot(tiny_data):
    sched = tiny_data.schedule
    return sample_few_shot(tiny_data.splits["train_2"], sched.classes(2), 3, seed=1)


def _pool(tiny_data):
    unl = tiny_data.splits["unlabeled_2"]
    return UnlabeledPool([s.image for s in unl], stems=tuple(s.stem for s in unl))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(tau=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(crop=12)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})
    cfg = TrainConfig(weights=LossWeights(kd=0.5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_base_is_deterministic(tiny_data, base):
    sched = tiny_data.schedule
    snap, report = base
    again, _ = train_base(base_training_set(tiny_data.splits["train_1"], sched), sched, FAST)
    assert again.to_bytes() == snap.to_bytes()
    assert snap.class_count == 3 and snap.position == 1
    assert len(report.phase_losses["base"]) == 3
    with pytest.raises(DataError):
        train_base([], sched, FAST)


def test_base_loss_decreases():
    from incseg.synthetic import SyntheticWorldSpec
    data = make_synthetic_data(SyntheticWorldSpec(), {"train_1": 200}, seed=11)
    sched = data.schedule
    _, report = train_base(base_training_set(data.splits["train_1"], sched), sched,
                           replace(FAST, epochs_base=5, batch_size=8))
    losses = report.phase_losses["base"]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_logged_loss_matches_offline(tiny_data, base):
    sched = tiny_data.schedule
    model = restore(base[0])
    items = [TrainItem(s.image, s.labels, FEWSHOT)
             for s in base_training_set(tiny_data.splits["train_1"][:6], sched)]
    before = model_bytes_digest(model)
    cfg = replace(FAST, lr=0.0, hflip=False)
    logged = fit(model, items, sched, 1, 1, cfg)[0]
    assert model_bytes_digest(model) == before
    probs = predict_proba(model, [it.image for it in items])
    offline = np.mean([total_objective(p, None, it.target, FEWSHOT, sched, 1).value
                       for p, it in zip(probs, items)])
    assert logged == pytest.approx(offline, abs=1e-9)


def test_phase1_keeps_teacher_and_routes_terms(tiny_data, base, fewshot):
    sched = tiny_data.schedule
    snap = base[0]
    x = images_to_tensor([tiny_data.splits["val"][0].image])
    with torch.no_grad():
        ref = restore(snap).eval()(x)
    digest = snap.digest
    s_kd, losses = train_increment_initial(snap, fewshot, sched, FAST)
    assert snap.digest == digest
    with torch.no_grad():
        assert torch.equal(restore(snap).eval()(x), ref)
    assert s_kd.position == 2 and s_kd.class_count == 5 and len(losses) == 2
    # use_kd=False is the same as a zero KD multiplier
    s_ft, _ = train_increment_initial(snap, fewshot, sched, replace(FAST, use_kd=False))
    s_zero, _ = train_increment_initial(snap, fewshot, sched, replace(FAST, weights=LossWeights(kd=0.0)))
    assert s_ft.to_bytes() == s_zero.to_bytes() != s_kd.to_bytes()


def test_one_shot_and_position_checks(tiny_data, base):
    sched = tiny_data.schedule
    one = sample_few_shot(tiny_data.splits["train_2"], sched.classes(2), 1, seed=4)
    snap, _ = train_increment_initial(base[0], one, sched, FAST)
    assert snap.position == 2
    with pytest.raises(ScheduleError):
        train_increment_initial(snap, one, sched, FAST)


def test_full_step(tiny_data, base, fewshot):
    sched = tiny_data.schedule
    pool = _pool(tiny_data)
    final, report = run_incremental_step(base[0], fewshot, pool, sched, FAST, keep_pseudo=True)
    assert final.position == 2 and not report.degraded
    assert set(report.phase_losses) == {"phase1", "phase2"}
    nb = build_neighborhood(fewshot, pool, 3)
    assert report.neighborhood == [list(r) for r in nb.per_query]
    assert report.pseudo.ids == nb.union and report.pseudo_items == len(nb.union)
    for it in report.pseudo.items:
        assert set(np.unique(it.labels).tolist()) <= set(sched.classes(2)) | {IGNORE}
    again, _ = run_incremental_step(base[0], fewshot, pool, sched, FAST)
    assert again.to_bytes() == final.to_bytes()


def test_no_pl_and_empty_pool(tiny_data, base, fewshot):
    sched = tiny_data.schedule
    init, _ = train_increment_initial(base[0], fewshot, sched, FAST)
    no_pl, rep = run_incremental_step(base[0], fewshot, _pool(tiny_data), sched, replace(FAST, use_pl=False))
    assert no_pl.to_bytes() == init.to_bytes() and not rep.degraded
    empty, rep = run_incremental_step(base[0], fewshot, UnlabeledPool([]), sched, FAST)
    assert rep.degraded and empty.to_bytes() == init.to_bytes()


def test_run_experiment_structure(tiny_data):
    sched = tiny_data.schedule
    data = ExperimentData.from_splits(tiny_data.splits, sched)
    cfg = replace(FAST, epochs_base=1, epochs_phase1=1, epochs_phase2=1, shots=2)
    out = run_experiment(sched, data, cfg, n_runs=2, methods=("ftkd", "ftkdpl"))
    assert out["seeds"] == [0, 1] and out["failures"] == []
    cell = out["results"]["ftkdpl"]["T1,T2"]["T1u2"]
    assert cell["n"] == 2 and len(cell["values"]) == 2 and cell["ci95"] is not None
    assert set(out["results"]["ftkd"]["T1,T2"]) == {"T1", "T2", "T1u2"}
    with pytest.raises(ConfigError):
        run_experiment(sched, data, cfg, methods=("magic",))


def test_run_experiment_records_failures(tiny_data):
    sched = tiny_data.schedule
    data = ExperimentData.from_splits(tiny_data.splits, sched)
    cfg = replace(FAST, epochs_base=1, epochs_phase1=1, epochs_phase2=1, shots=500)
    out = run_experiment(sched, data, cfg, n_runs=2, methods=("ftkd",))
    assert [f["seed"] for f in out["failures"]] == [0, 1]
    assert "SamplingError" in out["failures"][0]["error"]


def test_zero_phase2_from_initial_is_phase1(tiny_data, base, fewshot):
    sched = tiny_data.schedule
    cfg = replace(FAST, epochs_phase2=0, retrain_init="initial", weights=LossWeights(ce_pseudo=0.0))
    final, rep = run_incremental_step(base[0], fewshot, _pool(tiny_data), sched, cfg)
    assert rep.phase_losses["phase2"] == []
    assert final.digest == rep.snapshots["initial"]
    assert len(rep.neighborhood) == len(fewshot) and rep.pseudo_items <= 3 * len(fewshot)
