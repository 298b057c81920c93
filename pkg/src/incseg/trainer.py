"""Base training, the two-phase incremental step, and repeated experiments.

An incremental step at task ``t``:

1. extend the previous model's head and train it on the few-shot set with
   few-shot CE + distillation from the frozen previous model;
2. embed the few-shot images and the unlabelled pool, take the K nearest
   pool images of every shot;
3. pseudo-label those neighbours with the phase-1 model;
4. retrain on few-shot + pseudo-labelled images with all three terms.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .datamodel import (FewShotSet, Sample, TaskSchedule, UnlabeledPool, base_training_set,
                        sample_few_shot)
from .embedding import default_embedder
from .errors import ConfigError, DataError, ScheduleError
from .evaluation import aggregate_runs, evaluate_model, stage_columns
from .losses import FEWSHOT, LossWeights, total_objective
from .network import (ArchConfig, ModelSnapshot, build_model, extend_head, images_to_tensor,
                      probs_from_logits, restore, snapshot)
from .pseudolabel import (HARD, PseudoLabeledSet, TrainItem, assemble_augmented_set,
                          infer_pseudo_labels)
from .retrieval import EmbeddingMatrix, embed_set, knn_neighborhoods, pairwise_cosine_distance

log = logging.getLogger(__name__)

RETRAIN_FROM_TEACHER = "teacher"
RETRAIN_FROM_INITIAL = "initial"

METHODS = {
    "ft": (False, False),
    "ftpl": (False, True),
    "ftkd": (True, False),
    "ftkdpl": (True, True),
}
METHOD_LABELS = {"ft": "FT", "ftpl": "FT+PL", "ftkd": "FT+KD", "ftkdpl": "FT+KD+PL"}


@dataclass(frozen=True)
class TrainConfig:
    epochs_base: int = 30
    epochs_phase1: int = 20
    epochs_phase2: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    hflip: bool = True
    crop: int | None = None  # square random crop size; must be a multiple of the model stride
    tau: float = 0.5
    k_neighbors: int = 10
    shots: int = 5
    pseudo_mode: str = HARD
    use_kd: bool = True
    use_pl: bool = True
    weights: LossWeights = LossWeights()
    retrain_init: str = RETRAIN_FROM_TEACHER
    head_init_scale: float = 0.01
    arch: ArchConfig = ArchConfig()
    num_threads: int = 1

    def __post_init__(self):
        for name in ("epochs_base", "epochs_phase1", "epochs_phase2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("lr must be >= 0 and batch_size >= 1")
        if not 0 <= self.tau < 1:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if self.k_neighbors < 1 or self.shots < 1:
            raise ConfigError("k_neighbors and shots must be >= 1")
        if self.retrain_init not in (RETRAIN_FROM_TEACHER, RETRAIN_FROM_INITIAL):
            raise ConfigError(f"retrain_init must be 'teacher' or 'initial', got {self.retrain_init!r}")
        if self.crop is not None and self.crop % self.arch.stride:
            raise ConfigError(f"crop {self.crop} is not a multiple of the model stride {self.arch.stride}")

    @property
    def kd_weights(self) -> LossWeights:
        return self.weights if self.use_kd else replace(self.weights, kd=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in d["arch"].items()})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepReport:
    step: int
    method: str = ""
    seed: int = 0
    phase_losses: dict = field(default_factory=dict)  # phase -> per-epoch mean loss
    pseudo_items: int = 0
    pseudo_coverage: float | None = None
    neighborhood: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # role -> digest
    degraded: bool = False
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _augment(batch: Sequence[TrainItem], rng: np.random.Generator, config: TrainConfig):
    images, targets = [], []
    for item in batch:
        img, tgt = item.image, item.target
        if config.hflip and rng.random() < 0.5:
            img, tgt = img[:, ::-1], tgt[:, ::-1]
        if config.crop is not None:
            H, W = img.shape[:2]
            c = config.crop
            if c > H or c > W:
                raise ConfigError(f"crop {c} larger than image {H}x{W}")
            y = int(rng.integers(H - c + 1))
            x = int(rng.integers(W - c + 1))
            img, tgt = img[y:y + c, x:x + c], tgt[y:y + c, x:x + c]
        images.append(np.ascontiguousarray(img))
        targets.append(np.ascontiguousarray(tgt))
    return images, targets


def fit(model, items: Sequence[TrainItem], schedule: TaskSchedule, t: int, epochs: int,
        config: TrainConfig, teacher=None, weights: LossWeights | None = None,
        rng_key: Sequence[int] = ()) -> list[float]:
    """SGD over ``items`` for ``epochs``; returns the mean per-sample objective of each epoch."""
    if not items:
        raise DataError("empty training set")
    weights = weights or config.weights
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng([config.seed, t, *rng_key])
    model.train()
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(items))
        values = []
        for start in range(0, len(items), config.batch_size):
            batch = [items[i] for i in order[start:start + config.batch_size]]
            images, targets = _augment(batch, rng, config)
            x = images_to_tensor(images)
            logits = model(x)
            probs = probs_from_logits(logits)
            tprobs = None
            if teacher is not None:
                with torch.no_grad():
                    tprobs = probs_from_logits(teacher(x))
            grads = np.empty_like(probs)
            for k, item in enumerate(batch):
                obj = total_objective(probs[k], None if tprobs is None else tprobs[k], targets[k],
                                      item.source, schedule, t, weights)
                values.append(obj.value)
                grads[k] = obj.grad / len(batch)
            opt.zero_grad()
            logits.backward(torch.from_numpy(grads).permute(0, 3, 1, 2).to(logits.dtype))
            opt.step()
        history.append(float(np.mean(values)))
    return history


def _frozen(snap: ModelSnapshot):
    teacher = restore(snap).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def _head_seed(seed: int, t: int) -> int:
    return seed * 1009 + t


def train_base(samples: Sequence[Sample], schedule: TaskSchedule, config: TrainConfig = TrainConfig()):
    """Train the base model on task-1 labels; returns ``(snapshot, StepReport)``."""
    if not samples:
        raise DataError("empty base training set")
    torch.set_num_threads(config.num_threads)
    tic = time.perf_counter()
    model = build_model(schedule.class_count(1), config.arch, seed=config.seed)
    items = [TrainItem(s.image, s.labels, FEWSHOT, s.stem) for s in samples]
    losses = fit(model, items, schedule, 1, config.epochs_base, config, rng_key=(0,))
    snap = snapshot(model)
    report = StepReport(step=1, method="base", seed=config.seed, phase_losses={"base": losses},
                        snapshots={"final": snap.digest},
                        wall_clock={"base": time.perf_counter() - tic})
    return snap, report


def _student_for(teacher_snap: ModelSnapshot, schedule: TaskSchedule, config: TrainConfig):
    t = teacher_snap.position + 1
    model = restore(teacher_snap)
    extend_head(model, len(schedule.classes(t)), seed=_head_seed(config.seed, t),
                init_scale=config.head_init_scale)
    return model


def train_increment_initial(teacher_snap: ModelSnapshot, fewshot: FewShotSet, schedule: TaskSchedule,
                            config: TrainConfig = TrainConfig()):
    """Phase 1: few-shot CE + distillation. Returns ``(snapshot, per-epoch losses)``."""
    t = teacher_snap.position + 1
    if fewshot.task_index != t:
        raise ScheduleError(f"few-shot set is for task {fewshot.task_index}, teacher is at step "
                            f"{teacher_snap.position} (expected task {t})")
    if t > schedule.num_tasks:
        raise ScheduleError(f"schedule has no task {t}")
    if teacher_snap.class_count != schedule.class_count(t - 1):
        raise ScheduleError(f"teacher has {teacher_snap.class_count} classes, schedule expects "
                            f"{schedule.class_count(t - 1)} after task {t - 1}")
    torch.set_num_threads(config.num_threads)
    student = _student_for(teacher_snap, schedule, config)
    teacher = _frozen(teacher_snap) if config.use_kd else None
    items = assemble_augmented_set(fewshot, None)
    losses = fit(student, items, schedule, t, config.epochs_phase1, config, teacher=teacher,
                 weights=replace(config.kd_weights, ce_pseudo=0.0), rng_key=(1,))
    return snapshot(student), losses


def build_neighborhood(fewshot: FewShotSet, pool: UnlabeledPool, k: int, embedder=None, cache=None):
    embedder = embedder or default_embedder()
    F = embed_set(embedder, [s.image for s in fewshot.items],
                  ids=[s.stem or f"shot{i}" for i, s in enumerate(fewshot.items)])
    # cache is keyed by stem so it survives across runs; columns carry pool ids
    G = embed_set(embedder, pool.images, ids=pool.stems, cache=cache)
    G = EmbeddingMatrix(G.values, pool.ids)
    return knn_neighborhoods(pairwise_cosine_distance(F, G), k)


def run_incremental_step(teacher_snap: ModelSnapshot, fewshot: FewShotSet, pool: UnlabeledPool,
                         schedule: TaskSchedule, config: TrainConfig = TrainConfig(), embedder=None,
                         cache=None, keep_pseudo: bool = False):
    """Full incremental step; returns ``(final snapshot, StepReport)``.

    With ``use_pl`` off, or an empty pool, the phase-1 model is returned
    (the latter flagged as degraded). ``keep_pseudo`` attaches the
    pseudo-labelled set to the report as ``report.pseudo``.
    """
    t = teacher_snap.position + 1
    report = StepReport(step=t, seed=config.seed,
                        method=("ftkd" if config.use_kd else "ft") + ("pl" if config.use_pl else ""))
    report.snapshots["teacher"] = teacher_snap.digest
    tic = time.perf_counter()
    init_snap, losses = train_increment_initial(teacher_snap, fewshot, schedule, config)
    report.phase_losses["phase1"] = losses
    report.snapshots["initial"] = init_snap.digest
    report.wall_clock["phase1"] = time.perf_counter() - tic

    if not config.use_pl or len(pool) == 0:
        report.degraded = config.use_pl and len(pool) == 0
        if report.degraded:
            log.warning("step %d: empty unlabelled pool, returning the phase-1 model", t)
        report.snapshots["final"] = init_snap.digest
        return init_snap, report

    tic = time.perf_counter()
    nb = build_neighborhood(fewshot, pool, config.k_neighbors, embedder, cache)
    report.neighborhood = [list(r) for r in nb.per_query]
    initial = restore(init_snap)
    pseudo: PseudoLabeledSet = infer_pseudo_labels(
        initial, [pool.image(i) for i in nb.union], nb.union, schedule.classes(t), config.tau,
        config.pseudo_mode, step=t, stems=[pool.stems[pool.ids.index(i)] for i in nb.union])
    report.pseudo_items = len(pseudo)
    report.pseudo_coverage = pseudo.coverage()
    report.wall_clock["pseudo"] = time.perf_counter() - tic

    tic = time.perf_counter()
    if config.retrain_init == RETRAIN_FROM_TEACHER:
        student = _student_for(teacher_snap, schedule, config)
    else:
        student = initial
    teacher = _frozen(teacher_snap) if config.use_kd else None
    items = assemble_augmented_set(fewshot, pseudo)
    report.phase_losses["phase2"] = fit(student, items, schedule, t, config.epochs_phase2, config,
                                        teacher=teacher, weights=config.kd_weights, rng_key=(2,))
    final = snapshot(student)
    report.snapshots["final"] = final.digest
    report.wall_clock["phase2"] = time.perf_counter() - tic
    if keep_pseudo:
        report.pseudo = pseudo
    return final, report


@dataclass
class ExperimentData:
    """Labelled splits ``train_<t>``, pools ``unlabeled_<t>`` and ``val``."""

    train: dict  # t -> list[Sample] with full ground truth
    pools: dict  # t -> UnlabeledPool
    val: list

    @classmethod
    def from_splits(cls, splits: dict, schedule: TaskSchedule) -> "ExperimentData":
        train, pools = {}, {}
        for t in range(1, schedule.num_tasks + 1):
            if f"train_{t}" not in splits:
                raise DataError(f"missing split train_{t}")
            train[t] = list(splits[f"train_{t}"])
            if t > 1:
                unl = splits.get(f"unlabeled_{t}", [])
                if isinstance(unl, UnlabeledPool):
                    pools[t] = unl
                else:
                    pools[t] = UnlabeledPool([s.image for s in unl],
                                             tuple(range(1, len(unl) + 1)),
                                             tuple(s.stem for s in unl))
        if "val" not in splits:
            raise DataError("missing split val")
        return cls(train, pools, list(splits["val"]))


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def stage_label(t: int) -> str:
    return ",".join(f"T{s}" for s in range(1, t + 1))


def run_experiment(schedule: TaskSchedule, data: ExperimentData, config: TrainConfig = TrainConfig(),
                   n_runs: int = 1, methods: Sequence[str] = ("ftkd", "ftkdpl"), embedder=None,
                   last_task: int | None = None) -> dict:
    """Repeat the whole pipeline for seeds ``seed .. seed+n_runs-1``.

    Every run trains its own base model and draws its own few-shot sets, which
    all methods of that run share (paired comparison). A failing seed is
    recorded under ``failures`` and the remaining seeds still run.
    """
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    last = last_task or schedule.num_tasks
    seeds = [config.seed + r for r in range(n_runs)]
    raw: dict = {m: {} for m in methods}
    base_scores: dict = {}
    failures = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        try:
            per_seed = _run_once(schedule, data, cfg, methods, embedder, last)
        except Exception as exc:  # noqa: BLE001 - reported per seed
            log.exception("seed %d failed", seed)
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        base_scores[seed] = per_seed.pop("base")
        for m, stages in per_seed.items():
            for stage, cols in stages.items():
                for col, v in cols.items():
                    raw[m].setdefault(stage, {}).setdefault(col, {})[seed] = v

    def summarize(by_seed: dict) -> dict:
        ok = {s: v for s, v in by_seed.items() if v is not None and not math.isnan(v)}
        vals = [ok[s] for s in sorted(ok)]
        mean, ci = aggregate_runs(vals) if vals else (None, None)
        return {"mean": mean, "ci95": ci, "n": len(vals), "seeds": sorted(ok),
                "values": [_jsonable(by_seed[s]) for s in sorted(by_seed)]}

    results = {m: {stage: {col: summarize(v) for col, v in cols.items()}
                   for stage, cols in stages.items()} for m, stages in raw.items()}
    base = {}
    for col in {c for cols in base_scores.values() for c in cols}:
        base[col] = summarize({s: cols[col] for s, cols in base_scores.items()})
    return {
        "config": config.to_dict(),
        "schedule": schedule.to_config(),
        "n_runs": n_runs,
        "seeds": seeds,
        "methods": list(methods),
        "base": {stage_label(1): base},
        "results": results,
        "failures": failures,
    }


def _run_once(schedule, data: ExperimentData, cfg: TrainConfig, methods, embedder, last) -> dict:
    base_snap, _ = train_base(base_training_set(data.train[1], schedule), schedule, cfg)
    base_eval = evaluate_model(restore(base_snap), data.val, schedule, 1)
    out: dict = {"base": base_eval.columns}
    fewshots = {t: sample_few_shot(data.train[t], schedule.classes(t), cfg.shots,
                                   seed=cfg.seed * 7919 + t, task_index=t)
                for t in range(2, last + 1)}
    for m in methods:
        use_kd, use_pl = METHODS[m]
        mcfg = replace(cfg, use_kd=use_kd, use_pl=use_pl)
        prev = base_snap
        out[m] = {}
        for t in range(2, last + 1):
            prev, _ = run_incremental_step(prev, fewshots[t], data.pools[t], schedule, mcfg, embedder)
            ev = evaluate_model(restore(prev), data.val, schedule, t, stage_columns(t))
            out[m][stage_label(t)] = ev.columns
    return out
