"""Masked cross-entropy, distillation and the combined incremental objective.

Every loss takes a probability map ``(H, W, C)`` (or ``(P, C)``) from one
joint softmax and returns ``(value, grad)`` where ``grad`` is the gradient
with respect to the *logits* that produced those probabilities. Losses are
means over their pixel set; an empty pixel set contributes exactly 0 with a
zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .datamodel import IGNORE, TaskSchedule
from .errors import ShapeError, UsageError

LOG_FLOOR = 1e-12

FEWSHOT = "fewshot"
PSEUDO = "pseudo"


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


class Objective(NamedTuple):
    value: float
    grad: np.ndarray
    terms: dict


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the three objective terms (all 1 by default)."""

    ce_fewshot: float = 1.0
    ce_pseudo: float = 1.0
    kd: float = 1.0


def _flat(probs):
    probs = np.asarray(probs)
    if probs.ndim < 2:
        raise ShapeError(f"probability map must be at least 2-D, got {probs.shape}")
    return probs.reshape(-1, probs.shape[-1])


def _class_mask(classes, C, what):
    classes = np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= C):
        raise ShapeError(f"{what} {classes.tolist()} not covered by {C} probability channels")
    mask = np.zeros(C, dtype=np.uint8)
    mask[classes] = 1
    return classes, mask


def masked_cross_entropy(probs, labels, class_set, ignore_value: int = IGNORE,
                         impl=None) -> LossValue:
    """Hard-label CE averaged over pixels whose label is in ``class_set``."""
    flat = _flat(probs)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if labels.shape[0] != flat.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {flat.shape[0]} pixels")
    C = flat.shape[1]
    classes, in_set = _class_mask(class_set, C, "class set")
    present = np.unique(labels[(labels != ignore_value)])
    missing = present[np.isin(present, classes, invert=True) & (present >= C)]
    if missing.size:
        raise ShapeError(f"label values {missing.tolist()} have no probability channel (C={C})")
    value, grad, _ = kernels.hard_ce(flat, labels, in_set, ignore_value, LOG_FLOOR, impl=impl)
    return LossValue(float(value), grad.reshape(np.shape(probs)))


def soft_cross_entropy(probs, targets, class_set, pixel_mask=None, impl=None) -> LossValue:
    """CE against per-pixel soft targets over ``class_set`` channels.

    ``targets`` has one column per entry of ``sorted(class_set)``. Pixels
    default to those with positive target mass.
    """
    flat = _flat(probs)
    C = flat.shape[1]
    classes, _ = _class_mask(class_set, C, "class set")
    tgt = np.asarray(targets, dtype=np.float64).reshape(flat.shape[0], -1)
    if tgt.shape[1] != classes.size:
        raise ShapeError(f"targets have {tgt.shape[1]} columns for {classes.size} classes")
    if pixel_mask is None:
        pixel_mask = tgt.sum(axis=1) > 0
    pixel_mask = np.asarray(pixel_mask).reshape(-1)
    value, grad, _ = kernels.soft_ce(flat, tgt, classes, pixel_mask, LOG_FLOOR, impl=impl)
    return LossValue(float(value), grad.reshape(np.shape(probs)))


def distillation_mask(labels, novel_class_set) -> np.ndarray:
    """Pixels outside the novel-labelled set (ignore pixels included)."""
    return ~np.isin(np.asarray(labels), list(novel_class_set))


def distillation_loss(student_probs, teacher_probs, labels, novel_class_set, old_class_set,
                      pixel_mask=None, impl=None) -> LossValue:
    """Teacher-to-student cross-entropy over old classes on non-novel pixels.

    Teacher channel ``c`` holds the teacher's probability for global class
    ``c``; student old-class probabilities come straight from the joint
    softmax (no renormalisation over old classes).
    """
    flat = _flat(student_probs)
    teacher = _flat(teacher_probs)
    if teacher.shape[0] != flat.shape[0]:
        raise ShapeError(f"teacher covers {teacher.shape[0]} pixels, student {flat.shape[0]}")
    old, _ = _class_mask(old_class_set, teacher.shape[1], "old classes (teacher)")
    _class_mask(old_class_set, flat.shape[1], "old classes (student)")
    if pixel_mask is None:
        labels = np.asarray(labels).reshape(-1)
        if labels.shape[0] != flat.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {flat.shape[0]} pixels")
        pixel_mask = distillation_mask(labels, novel_class_set)
    pixel_mask = np.asarray(pixel_mask).reshape(-1)
    value, grad, _ = kernels.soft_ce(flat, teacher[:, old], old, pixel_mask, LOG_FLOOR, impl=impl)
    return LossValue(float(value), grad.reshape(np.shape(student_probs)))


def total_objective(student_probs, teacher_probs, target, source: str, schedule: TaskSchedule,
                    t: int, weights: LossWeights = LossWeights(), ignore_value: int = IGNORE,
                    impl=None) -> Objective:
    """Per-sample objective for task ``t``.

    ``target`` is a hard label map, or for soft pseudo-labels an
    ``(H, W, |C_t|)`` array whose all-zero rows mark ungated pixels.
    ``source`` routes the CE term: few-shot ground truth or pseudo-label.
    Distillation applies to both sources whenever a teacher is given.
    """
    if source not in (FEWSHOT, PSEUDO):
        raise UsageError(f"unknown sample source {source!r}")
    if t == 1:
        if teacher_probs is not None:
            raise UsageError("the base task has no teacher; distillation does not apply")
        ce = masked_cross_entropy(student_probs, target, schedule.classes(1), ignore_value, impl)
        return Objective(ce.value, ce.grad, {"ce_fewshot": ce.value})

    novel = schedule.classes(t)
    old = schedule.previous(t)
    target = np.asarray(target)
    soft = target.ndim == np.ndim(student_probs)
    if soft:
        ce = soft_cross_entropy(student_probs, target, novel, impl=impl)
        novel_pixels = target.reshape(-1, target.shape[-1]).sum(axis=1) > 0
    else:
        ce = masked_cross_entropy(student_probs, target, novel, ignore_value, impl)
        novel_pixels = np.isin(target.reshape(-1), novel)
    w_ce = weights.ce_fewshot if source == FEWSHOT else weights.ce_pseudo
    value = w_ce * ce.value
    grad = w_ce * ce.grad
    terms = {"ce_" + source: ce.value}
    if teacher_probs is not None:
        kd = distillation_loss(student_probs, teacher_probs, None, novel, old,
                               pixel_mask=~novel_pixels, impl=impl)
        value += weights.kd * kd.value
        grad = grad + weights.kd * kd.grad
        terms["kd"] = kd.value
    return Objective(float(value), grad, terms)
