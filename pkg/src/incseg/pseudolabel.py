"""Pseudo-labels for retrieved neighbour images and the augmented training set."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .datamodel import IGNORE, FewShotSet, write_labelmap
from .errors import ConfigError, UsageError
from .losses import FEWSHOT, PSEUDO
from .network import predict_proba

HARD = "hard"
SOFT = "soft"


@dataclass
class PseudoItem:
    id: int
    image: np.ndarray
    labels: np.ndarray  # hard: (H, W) uint8; soft: (H, W, |C_t|) float, zero rows = ungated
    stem: str = ""


@dataclass
class PseudoLabeledSet:
    items: list[PseudoItem]
    tau: float
    step: int
    mode: str = HARD
    novel_classes: tuple[int, ...] = ()

    def __len__(self):
        return len(self.items)

    @property
    def ids(self):
        return tuple(it.id for it in self.items)

    def hard_labels(self, item: PseudoItem) -> np.ndarray:
        """Hard view of an item (argmax of the stored distribution in soft mode)."""
        if self.mode == HARD:
            return item.labels
        mass = item.labels.sum(axis=-1)
        best = np.asarray(self.novel_classes)[item.labels.argmax(axis=-1)]
        return np.where(mass > 0, best, IGNORE).astype(np.uint8)

    def coverage(self) -> float:
        if not self.items:
            return 0.0
        total = sum(self.hard_labels(it).size for it in self.items)
        kept = sum(int((self.hard_labels(it) != IGNORE).sum()) for it in self.items)
        return kept / total


def _check_tau(tau):
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"confidence threshold tau must be in [0, 1), got {tau}")


def gate_probabilities(probs: np.ndarray, novel_class_set, tau: float, impl=None) -> np.ndarray:
    """Hard pseudo-label map from one ``(H, W, C)`` probability map.

    A pixel keeps its argmax class only if that class is novel and its
    probability reaches ``tau``; otherwise it becomes IGNORE.
    """
    _check_tau(tau)
    H, W, C = probs.shape
    novel = np.zeros(C, dtype=np.uint8)
    novel[list(novel_class_set)] = 1
    out = kernels.gated_argmax(probs.reshape(-1, C), novel, tau, IGNORE, impl=impl)
    return out.reshape(H, W).astype(np.uint8)


def infer_pseudo_labels(model, images: Sequence[np.ndarray], ids: Sequence[int], novel_class_set,
                        tau: float = 0.5, mode: str = HARD, step: int = 2,
                        stems: Sequence[str] | None = None, batch_size: int = 32) -> PseudoLabeledSet:
    _check_tau(tau)
    if mode not in (HARD, SOFT):
        raise ConfigError(f"pseudo-label mode must be 'hard' or 'soft', got {mode!r}")
    novel = tuple(sorted(novel_class_set))
    if max(novel) >= model.class_count:
        raise UsageError(f"model has {model.class_count} outputs but novel classes reach {max(novel)}")
    stems = list(stems) if stems is not None else [str(i) for i in ids]
    items = []
    for start in range(0, len(images), batch_size):
        chunk = list(images[start:start + batch_size])
        probs = predict_proba(model, chunk)
        for k, p in enumerate(probs):
            hard = gate_probabilities(p, novel, tau)
            if mode == HARD:
                lab = hard
            else:
                lab = np.where((hard != IGNORE)[..., None], p[..., list(novel)], 0.0)
            j = start + k
            items.append(PseudoItem(int(ids[j]), chunk[k], lab, stems[j]))
    return PseudoLabeledSet(items, tau, step, mode, novel)


@dataclass
class TrainItem:
    image: np.ndarray
    target: np.ndarray
    source: str
    id: object = None


def assemble_augmented_set(fewshot: FewShotSet, pseudo: PseudoLabeledSet | None) -> list[TrainItem]:
    """Few-shot items first, then pseudo-labelled items by ascending pool id."""
    out = [TrainItem(s.image, s.labels, FEWSHOT, s.stem) for s in fewshot.items]
    if pseudo is None or not pseudo.items:
        return out
    if pseudo.step != fewshot.task_index:
        raise UsageError(f"pseudo-labels from step {pseudo.step} mixed with few-shot data of step "
                         f"{fewshot.task_index}")
    ids = [it.id for it in pseudo.items]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate pool ids in the pseudo-labelled set")
    for it in sorted(pseudo.items, key=lambda it: it.id):
        out.append(TrainItem(it.image, it.labels, PSEUDO, it.id))
    return out


def pseudo_label_quality_report(pset: PseudoLabeledSet, gt: dict | None = None) -> dict:
    """Coverage, and per-class precision/recall when ground truth (by id) is given.

    Undefined ratios (no predicted or no true pixels of a class) are reported
    as ``None``.
    """
    report = {"coverage": pset.coverage(), "items": len(pset), "tau": pset.tau,
              "step": pset.step, "mode": pset.mode}
    if gt is None:
        return report
    per_class = {}
    for c in pset.novel_classes:
        tp = pred = true = 0
        for it in pset.items:
            lab = pset.hard_labels(it)
            g = np.asarray(gt[it.id])
            tp += int(((lab == c) & (g == c)).sum())
            pred += int((lab == c).sum())
            true += int((g == c).sum())
        per_class[int(c)] = {
            "precision": tp / pred if pred else None,
            "recall": tp / true if true else None,
            "predicted_pixels": pred,
            "true_pixels": true,
        }
    report["per_class"] = per_class
    return report


def write_pseudo_labels(pset: PseudoLabeledSet, out_dir, model_digest: str = "") -> Path:
    """Dump label PNGs (same format as ground truth) plus a JSON sidecar."""
    out_dir = Path(out_dir)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in sorted(pset.items, key=lambda it: it.id):
        name = it.stem or str(it.id)
        write_labelmap(out_dir / "labels" / f"{name}.png", pset.hard_labels(it))
        if pset.mode == SOFT:
            np.save(out_dir / "labels" / f"{name}.soft.npy", it.labels.astype(np.float32))
        entries.append({"id": it.id, "stem": name})
    sidecar = {
        "tau": pset.tau,
        "step": pset.step,
        "mode": pset.mode,
        "novel_classes": list(pset.novel_classes),
        "source_model": model_digest,
        "coverage": pset.coverage(),
        "items": entries,
    }
    path = out_dir / "pseudo_labels.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path
